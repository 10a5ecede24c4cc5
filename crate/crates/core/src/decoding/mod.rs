//! Teacher-forced scoring and autoregressive search. Search runs on the
//! cached incremental decoder and records the last-layer representation
//! behind every generated token.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecoderTrace, EncoderMemory, ModelInput, TokenSeq, TranslationModel};
use crate::training::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    /// Exponent `α` of the length divisor in `score / len^α`.
    pub length_penalty: f64,
    /// Output length cap (EOS included); `None` means `2·|encoder states| + 10`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 8,
            length_penalty: 1.0,
            max_len: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam.beam", "must be at least 1"));
        }
        if self.max_len == Some(0) {
            return Err(Error::config("beam.max_len", "must be at least 1"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("beam.length_penalty", "must be finite"));
        }
        Ok(())
    }
}

/// A decoded sequence `BOS … [EOS]` with its score and per-step data.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities.
    pub score: f64,
    pub step_log_probs: Vec<f64>,
    /// Last-layer representation at each generated position.
    pub reps: Vec<Vec<f64>>,
}

impl Hypothesis {
    /// Generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output words without BOS and EOS.
    pub fn output(&self) -> &[usize] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&EOS) => &body[..body.len() - 1],
            _ => body,
        }
    }

    /// Ranking key `score / len^α`.
    pub fn penalized(&self, alpha: f64) -> f64 {
        penalized(self.score, self.len(), alpha)
    }
}

fn penalized(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(alpha)
    }
}

/// Best penalized key any extension of a live hypothesis could still reach.
fn upper_bound(score: f64, len: usize, max_len: usize, alpha: f64) -> f64 {
    if alpha > 0.0 {
        penalized(score, max_len, alpha)
    } else {
        penalized(score, len + 1, alpha)
    }
}

pub fn default_max_len(encoder_len: usize) -> usize {
    2 * encoder_len + 10
}

/// Decoder trace under the gold prefix `BOS y`.
pub fn teacher_forced_trace(
    model: &TranslationModel,
    input: ModelInput<'_>,
    gold: &TokenSeq,
) -> Result<DecoderTrace> {
    if gold.is_empty() {
        return Err(Error::invalid("gold sequence is empty"));
    }
    let memory = model.encode(input)?;
    model.decode_parallel(&memory, &gold.decoder_prefix().ids)
}

/// Sum of the log-probabilities `model` assigns to `tokens` (`BOS … EOS`).
pub fn rescore(model: &TranslationModel, input: ModelInput<'_>, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 || tokens[0] != BOS {
        return Err(Error::invalid("rescoring needs BOS followed by at least one token"));
    }
    let memory = model.encode(input)?;
    let trace = model.decode_parallel(&memory, &tokens[..tokens.len() - 1])?;
    Ok(tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| trace.log_probs.get2(i, t))
        .sum())
}

struct Prepared {
    memory: EncoderMemory,
    max_len: usize,
}

fn prepare(model: &TranslationModel, input: ModelInput<'_>, max_len: Option<usize>) -> Result<Prepared> {
    let enc = model.encode(input)?;
    let max_len = max_len.unwrap_or_else(|| default_max_len(enc.rows()));
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    Ok(Prepared {
        memory: model.encoder_memory(&enc)?,
        max_len,
    })
}

/// Argmax decoding (lowest id on ties). The last permitted position is forced to EOS.
pub fn greedy_decode(
    model: &TranslationModel,
    input: ModelInput<'_>,
    max_len: Option<usize>,
) -> Result<Hypothesis> {
    let prep = prepare(model, input, max_len)?;
    let mut cache = model.new_decoder_cache();
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        step_log_probs: Vec::new(),
        reps: Vec::new(),
    };
    loop {
        let last = *hyp.tokens.last().unwrap();
        let (rep, lp) = model.decode_step(&prep.memory, &mut cache, last)?;
        let tok = if hyp.len() + 1 >= prep.max_len {
            EOS
        } else {
            argmax(&lp)
        };
        hyp.score += lp[tok];
        hyp.step_log_probs.push(lp[tok]);
        hyp.reps.push(rep);
        hyp.tokens.push(tok);
        if tok == EOS {
            return Ok(hyp);
        }
    }
}

/// Finished hypotheses ranked best first, plus the mean representation of
/// the live candidates at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub hyps: Vec<Hypothesis>,
    pub step_mean_reps: Vec<Vec<f64>>,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }
}

struct Live {
    hyp: Hypothesis,
    cache: crate::model::DecoderCache,
}

fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.penalized(alpha)
        .total_cmp(&a.penalized(alpha))
        .then_with(|| a.tokens[1..].cmp(&b.tokens[1..]))
}

/// Beam search. Each step keeps the best `2·beam` expansions; an EOS
/// expansion among the best `beam` finishes its hypothesis, and the first
/// `beam` other expansions stay live. Search ends when `beam` hypotheses have
/// finished and no live one can still outrank the worst of them, or when
/// nothing is live. Positions at `max_len` are forced to EOS.
pub fn beam_decode(
    model: &TranslationModel,
    input: ModelInput<'_>,
    cfg: &BeamConfig,
) -> Result<BeamResult> {
    cfg.validate()?;
    let prep = prepare(model, input, cfg.max_len)?;
    let alpha = cfg.length_penalty;
    let beam = cfg.beam;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: vec![BOS],
            score: 0.0,
            step_log_probs: Vec::new(),
            reps: Vec::new(),
        },
        cache: model.new_decoder_cache(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut step_mean_reps = Vec::new();
    let d = model.config().d_model;

    while !live.is_empty() {
        let mut outputs = Vec::with_capacity(live.len());
        let mut mean = vec![0.0; d];
        for l in live.iter_mut() {
            let last = *l.hyp.tokens.last().unwrap();
            let (rep, lp) = model.decode_step(&prep.memory, &mut l.cache, last)?;
            for (m, r) in mean.iter_mut().zip(&rep) {
                *m += r;
            }
            outputs.push((rep, lp));
        }
        mean.iter_mut().for_each(|m| *m /= live.len() as f64);
        step_mean_reps.push(mean);

        let forced_eos = live[0].hyp.len() + 1 >= prep.max_len;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, (_, lp)) in outputs.iter().enumerate() {
            let score = live[h].hyp.score;
            if forced_eos {
                cands.push((score + lp[EOS], h, EOS));
            } else {
                cands.extend(lp.iter().enumerate().map(|(t, &l)| (score + l, h, t)));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(2 * beam);

        let mut next: Vec<Live> = Vec::with_capacity(beam);
        for (r, &(score, h, tok)) in cands.iter().enumerate() {
            let parent = &live[h];
            let (rep, lp) = &outputs[h];
            let extend = |hyp: &Hypothesis| {
                let mut child = hyp.clone();
                child.tokens.push(tok);
                child.score = score;
                child.step_log_probs.push(lp[tok]);
                child.reps.push(rep.clone());
                child
            };
            if tok == EOS {
                if r < beam {
                    finished.push(extend(&parent.hyp));
                }
            } else if next.len() < beam {
                next.push(Live {
                    hyp: extend(&parent.hyp),
                    cache: parent.cache.clone(),
                });
            }
        }
        live = next;

        if finished.len() >= beam && !live.is_empty() {
            finished.sort_by(|a, b| rank(a, b, alpha));
            let worst = finished[beam - 1].penalized(alpha);
            let best_live = live
                .iter()
                .map(|l| upper_bound(l.hyp.score, l.hyp.len(), prep.max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, alpha));
    Ok(BeamResult {
        hyps: finished,
        step_mean_reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(v: usize, seed: u64) -> TranslationModel {
        TranslationModel::init(
            ModelConfig {
                enc_layers: 1,
                dec_layers: 1,
                d_model: 8,
                heads: 2,
                d_ffn: 16,
                vocab_size: v,
                d_feat: 3,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let m = model(9, seed);
            let src = [4, 5, 6, 7, EOS];
            let g = greedy_decode(&m, ModelInput::Text(&src), None).unwrap();
            let b = beam_decode(
                &m,
                ModelInput::Text(&src),
                &BeamConfig {
                    beam: 1,
                    length_penalty: 0.0,
                    max_len: None,
                },
            )
            .unwrap();
            assert_eq!(b.best().tokens, g.tokens);
        }
    }

    #[test]
    fn scores_match_rescoring() {
        let m = model(7, 3);
        let src = [4, 6, EOS];
        let b = beam_decode(&m, ModelInput::Text(&src), &BeamConfig::default()).unwrap();
        for h in &b.hyps {
            let r = rescore(&m, ModelInput::Text(&src), &h.tokens).unwrap();
            assert!((r - h.score).abs() < 1e-9);
            assert_eq!(h.reps.len(), h.len());
        }
    }

    #[test]
    fn max_len_forces_eos() {
        let m = model(7, 1);
        let g = greedy_decode(&m, ModelInput::Text(&[4, EOS]), Some(1)).unwrap();
        assert_eq!(g.tokens, vec![BOS, EOS]);
    }
}
