//! Parallel scheduled sampling: prefix words are predicted from one
//! teacher-forced pass, chosen by the Gumbel-Max trick, and mixed with gold
//! words with a probability that decays over epochs.

use rand::Rng;

use crate::data::BOS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const U_CLAMP: f64 = 1e-12;

/// Probability of keeping the gold word at epoch `epoch`: `μ / (μ + exp(e/μ))`.
pub fn decay_probability(epoch: usize, mu: f64) -> f64 {
    mu / (mu + (epoch as f64 / mu).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub p_gold: f64,
}

impl ScheduleState {
    pub fn at(epoch: usize, mu: f64) -> Self {
        ScheduleState {
            epoch,
            p_gold: decay_probability(epoch, mu),
        }
    }
}

/// `−ln(−ln u)` with `u` clamped to `[1e-12, 1 − 1e-12]`.
pub fn gumbel_noise(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    -(-u.ln()).ln()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One Gumbel-Max draw from `softmax(logits)`: returns the chosen index with
/// the uniform draw and noise of the winning component.
pub fn gumbel_select(logits: &[f64], rng: &mut impl Rng) -> (usize, f64, f64) {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_u = 0.0;
    let mut best_eta = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let u: f64 = rng.random();
        let eta = gumbel_noise(u);
        let v = l + eta;
        if v > best_val {
            best = i;
            best_val = v;
            best_u = u;
            best_eta = eta;
        }
    }
    (best, best_u, best_eta)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord {
    /// Uniform draw behind the winning Gumbel component.
    pub u: f64,
    pub eta: f64,
    /// Mixing draw; gold is kept iff `p ≤ p_gold`.
    pub p: f64,
    pub gold: bool,
    pub token: usize,
}

/// A decoder context `BOS ỹ₁ … ỹ_n` mixing gold and predicted words.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPrefix {
    pub tokens: Vec<usize>,
    pub records: Vec<SampleRecord>,
}

impl MixedPrefix {
    pub fn gold_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 1.0;
        }
        self.records.iter().filter(|r| r.gold).count() as f64 / self.records.len() as f64
    }
}

/// Mix `prefix` (`BOS y₁ … y_n`) with words drawn from the teacher-forced
/// distributions `log_probs` (row `t` predicts position `t + 1`). Gumbel noise
/// and mixing draws come from separate streams so they can be shared or not
/// between modalities independently.
pub fn build_mixed_prefix(
    log_probs: &Tensor,
    prefix: &[usize],
    p_gold: f64,
    noise: &mut impl Rng,
    mixing: &mut impl Rng,
) -> Result<MixedPrefix> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::invalid("mixed prefix must start from a BOS-led gold prefix"));
    }
    if log_probs.rows() < prefix.len() - 1 {
        return Err(Error::shape(format!(
            "trace has {} rows, prefix needs {}",
            log_probs.rows(),
            prefix.len() - 1
        )));
    }
    let mut tokens = Vec::with_capacity(prefix.len());
    tokens.push(BOS);
    let mut records = Vec::with_capacity(prefix.len() - 1);
    for (i, &gold) in prefix.iter().enumerate().skip(1) {
        let (pred, u, eta) = gumbel_select(log_probs.row(i - 1), noise);
        let p: f64 = mixing.random();
        let keep = p <= p_gold;
        let token = if keep { gold } else { pred };
        tokens.push(token);
        records.push(SampleRecord {
            u,
            eta,
            p,
            gold: keep,
            token,
        });
    }
    Ok(MixedPrefix { tokens, records })
}
