#![allow(dead_code)]

pub mod beam;
pub mod gradcheck;

use cress_core::data::{build_vocab, encode_corpus, generate_synthetic_corpus, SynthTaskConfig};
use cress_core::data::{BOS, EOS};
use cress_core::model::{ConvSpec, ModelInput};
use cress_core::rng::rng_from;
use cress_core::tensor::softmax;
use cress_core::training::gumbel_select;
use cress_core::{Example, ModelConfig, Tensor, TranslationModel, Vocabulary};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A small task: short sentences, few frames, a handful of word types.
pub fn tiny_task() -> SynthTaskConfig {
    SynthTaskConfig {
        vocab_size: 8,
        min_len: 2,
        max_len: 5,
        min_frames: 2,
        max_frames: 3,
        d_feat: 6,
        ..SynthTaskConfig::default()
    }
}

pub fn tiny_corpus(n: usize, seed: u64) -> (Vocabulary, Vec<Example>) {
    let triplets = generate_synthetic_corpus(&tiny_task(), n, seed).unwrap();
    let vocab = build_vocab(&triplets).unwrap();
    let examples = encode_corpus(&triplets, &vocab);
    (vocab, examples)
}

pub fn tiny_model_config(vocab_size: usize, d_feat: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 8,
        heads: 2,
        d_ffn: 12,
        dropout,
        vocab_size,
        d_feat,
        conv: ConvSpec::default(),
        tie_embeddings: false,
    }
}

pub fn tiny_model(vocab: &Vocabulary, examples: &[Example], dropout: f64, seed: u64) -> TranslationModel {
    let d_feat = examples[0].s.frames.cols();
    TranslationModel::init(tiny_model_config(vocab.len(), d_feat, dropout), seed).unwrap()
}

/// Beam search recomputing every prefix with the parallel decoder: same
/// selection rule as the cached search, none of its bookkeeping. Returns
/// finished `(tokens, score)` pairs, best first.
pub fn reference_beam(
    model: &TranslationModel,
    input: ModelInput<'_>,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Vec<(Vec<usize>, f64)> {
    let memory = model.encode(input).unwrap();
    let key = |score: f64, len: usize| if alpha == 0.0 { score } else { score / (len.max(1) as f64).powf(alpha) };
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let order = |v: &mut Vec<(Vec<usize>, f64)>| {
        v.sort_by(|a, b| {
            key(b.1, b.0.len() - 1)
                .total_cmp(&key(a.1, a.0.len() - 1))
                .then_with(|| a.0[1..].cmp(&b.0[1..]))
        })
    };
    while !live.is_empty() {
        let forced = live[0].0.len() >= max_len;
        let mut cands = Vec::new();
        for (h, (prefix, score)) in live.iter().enumerate() {
            let trace = model.decode_parallel(&memory, prefix).unwrap();
            let lp = trace.log_probs.row(trace.len() - 1);
            for (t, l) in lp.iter().enumerate() {
                if !forced || t == EOS {
                    cands.push((score + l, h, t));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(2 * beam);
        let mut next = Vec::new();
        for (r, &(score, h, t)) in cands.iter().enumerate() {
            let mut tokens = live[h].0.clone();
            tokens.push(t);
            if t == EOS {
                if r < beam {
                    finished.push((tokens, score));
                }
            } else if next.len() < beam {
                next.push((tokens, score));
            }
        }
        live = next;
        if finished.len() >= beam && !live.is_empty() {
            order(&mut finished);
            let worst = key(finished[beam - 1].1, finished[beam - 1].0.len() - 1);
            let bound = live
                .iter()
                .map(|(p, s)| if alpha > 0.0 { key(*s, max_len) } else { key(*s, p.len()) })
                .fold(f64::NEG_INFINITY, f64::max);
            if bound <= worst {
                break;
            }
        }
    }
    order(&mut finished);
    finished
}

pub const DRAWS: usize = 100_000;
pub const ALPHA: f64 = 0.001;

/// Pearson statistic of Gumbel-Max selections against `softmax(logits)`, with
/// its p-value.
pub fn goodness_of_fit(logits: &[f64], seed: u64) -> (f64, f64) {
    let probs = softmax(&Tensor::vector(logits.to_vec()), 0).unwrap();
    let mut counts = vec![0usize; logits.len()];
    let mut rng = rng_from(seed);
    for _ in 0..DRAWS {
        counts[gumbel_select(logits, &mut rng).0] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(probs.data())
        .map(|(&c, &p)| {
            let e = p * DRAWS as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((logits.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}

