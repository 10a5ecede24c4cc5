//! Brute-force oracle for search on a toy vocabulary.

use cress_core::data::{BOS, EOS, NUM_SPECIALS};
use cress_core::decoding::rescore;
use cress_core::model::ModelInput;
use cress_core::TranslationModel;

use super::tiny_model_config;

pub const TOY_VOCAB: usize = 6;
pub const TOY_MAX_LEN: usize = 4;

/// Every output `BOS w… EOS` of at most `max_len` generated tokens, any
/// non-EOS id allowed before the final EOS.
pub fn all_outputs(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![vec![BOS]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            let mut done = p.clone();
            done.push(EOS);
            out.push(done);
            if p.len() < max_len {
                next.extend((0..vocab).filter(|&t| t != EOS).map(|t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                }));
            }
        }
        frontier = next;
    }
    out
}

pub fn key(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len as f64).powf(alpha)
    }
}

/// Exhaustive ranking by length-penalized score, ties broken by token order.
pub fn exhaustive(model: &TranslationModel, input: ModelInput<'_>, alpha: f64) -> Vec<(Vec<usize>, f64)> {
    let mut scored: Vec<(Vec<usize>, f64)> = all_outputs(TOY_VOCAB, TOY_MAX_LEN)
        .into_iter()
        .map(|t| {
            let s = rescore(model, input, &t).unwrap();
            (t, s)
        })
        .collect();
    scored.sort_by(|a, b| {
        key(b.1, b.0.len() - 1, alpha)
            .total_cmp(&key(a.1, a.0.len() - 1, alpha))
            .then_with(|| a.0[1..].cmp(&b.0[1..]))
    });
    scored
}

pub fn toy_model(seed: u64) -> TranslationModel {
    TranslationModel::init(tiny_model_config(TOY_VOCAB, 3, 0.0), seed).unwrap()
}

pub fn toy_source(seed: u64) -> Vec<usize> {
    (0..3 + seed as usize % 3)
        .map(|i| NUM_SPECIALS + (i + seed as usize) % (TOY_VOCAB - NUM_SPECIALS))
        .chain([EOS])
        .collect()
}
