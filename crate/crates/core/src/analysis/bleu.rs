use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    None,
    /// A zero match count at order `n` becomes `1 / (2^k · total_n)`, where
    /// `k` counts the zero-match orders seen so far.
    Exp,
}

/// Clipped n-gram statistics of one hypothesis/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for NgramStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn sentence_stats<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> NgramStats {
    let mut s = NgramStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..NgramStats::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// Corpus score on a 0–100 scale.
    pub bleu: f64,
    /// Modified n-gram precisions (after smoothing), orders 1–4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn from_stats(s: &NgramStats, smoothing: Smoothing) -> Self {
        let bp = if s.hyp_len == 0 {
            0.0
        } else if s.hyp_len < s.ref_len {
            (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
        } else {
            1.0
        };
        let mut precisions = [0.0; MAX_ORDER];
        let mut smooth = 1.0;
        let mut defined = true;
        for n in 0..MAX_ORDER {
            if s.totals[n] == 0 {
                defined = false;
                break;
            }
            precisions[n] = if s.matches[n] > 0 {
                s.matches[n] as f64 / s.totals[n] as f64
            } else {
                match smoothing {
                    Smoothing::Exp => {
                        smooth *= 2.0;
                        1.0 / (smooth * s.totals[n] as f64)
                    }
                    Smoothing::None => 0.0,
                }
            };
        }
        let bleu = if defined && precisions.iter().all(|&p| p > 0.0) {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * bp * log_mean.exp()
        } else {
            0.0
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty: bp,
            hyp_len: s.hyp_len,
            ref_len: s.ref_len,
        }
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::invalid("no hypotheses to score"));
    }
    if a != b {
        return Err(Error::invalid(format!("{a} hypotheses but {b} references")));
    }
    Ok(())
}

pub fn corpus_bleu<T: Hash + Eq>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    smoothing: Smoothing,
) -> Result<BleuReport> {
    check_aligned(hyps.len(), refs.len())?;
    let mut total = NgramStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total += sentence_stats(h, r);
    }
    Ok(BleuReport::from_stats(&total, smoothing))
}

/// Paired bootstrap: the fraction of resampled test sets on which system A
/// does not beat system B. Small values mean A is significantly better.
pub fn paired_bootstrap<T: Hash + Eq>(
    hyps_a: &[Vec<T>],
    hyps_b: &[Vec<T>],
    refs: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_aligned(hyps_a.len(), refs.len())?;
    check_aligned(hyps_b.len(), refs.len())?;
    if resamples < 100 {
        return Err(Error::invalid("paired bootstrap needs at least 100 resamples"));
    }
    let sa: Vec<NgramStats> = hyps_a.iter().zip(refs).map(|(h, r)| sentence_stats(h, r)).collect();
    let sb: Vec<NgramStats> = hyps_b.iter().zip(refs).map(|(h, r)| sentence_stats(h, r)).collect();
    let n = refs.len();
    let mut rng = rng_from(seed);
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let (mut ta, mut tb) = (NgramStats::default(), NgramStats::default());
        for _ in 0..n {
            let i = rng.random_range(0..n);
            ta += sa[i];
            tb += sb[i];
        }
        let a = BleuReport::from_stats(&ta, Smoothing::Exp).bleu;
        let b = BleuReport::from_stats(&tb, Smoothing::Exp).bleu;
        if a <= b {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / resamples as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive upper edge.
    pub hi: usize,
    pub n: usize,
    /// `None` when no reference falls in the bucket.
    pub report: Option<BleuReport>,
}

/// Corpus BLEU per reference-length bucket `[edges[j], edges[j+1])`.
pub fn bleu_by_length<T: Hash + Eq>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    edges: &[usize],
    smoothing: Smoothing,
) -> Result<Vec<LengthBucket>> {
    check_aligned(hyps.len(), refs.len())?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "bucket edges {edges:?} must be at least two strictly increasing values"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len() - 1];
    for (i, r) in refs.iter().enumerate() {
        let len = r.len();
        let j = edges
            .windows(2)
            .position(|w| w[0] <= len && len < w[1])
            .ok_or_else(|| {
                Error::invalid(format!("reference length {len} is not covered by edges {edges:?}"))
            })?;
        members[j].push(i);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(j, idx)| {
            let report = (!idx.is_empty()).then(|| {
                let mut total = NgramStats::default();
                for &i in idx {
                    total += sentence_stats(&hyps[i], &refs[i]);
                }
                BleuReport::from_stats(&total, smoothing)
            });
            LengthBucket {
                lo: edges[j],
                hi: edges[j + 1],
                n: idx.len(),
                report,
            }
        })
        .collect())
}
