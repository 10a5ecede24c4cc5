use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Triplet;
use crate::error::{Error, Result};
use crate::model::SpeechFeatures;
use crate::rng::{derive_seed, derive_seed_idx, rng_from};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTaskConfig {
    /// Number of regular word types.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames rendered per token, drawn uniformly from this range.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of per-dimension frame noise.
    pub noise: f64,
    pub d_feat: usize,
    /// Seed of the word mapping and the acoustic prototypes.
    pub task_seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            vocab_size: 50,
            min_len: 5,
            max_len: 30,
            min_frames: 2,
            max_frames: 5,
            noise: 0.1,
            d_feat: 32,
            task_seed: 1,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("data.vocab_size", "must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("data.min_len", "need 1 ≤ min_len ≤ max_len"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config(
                "data.min_frames",
                "need 1 ≤ min_frames ≤ max_frames",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be finite and ≥ 0"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("data.d_feat", "must be positive"));
        }
        Ok(())
    }
}

pub fn token_name(i: usize) -> String {
    format!("w{i:02}")
}

/// The fixed parts of the task: a word bijection and one unit-norm acoustic
/// prototype per word.
#[derive(Clone, Debug)]
pub struct SynthTask {
    cfg: SynthTaskConfig,
    mapping: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
}

impl SynthTask {
    pub fn new(cfg: SynthTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mapping: Vec<usize> = (0..cfg.vocab_size).collect();
        mapping.shuffle(&mut rng_from(derive_seed(cfg.task_seed, "mapping")));
        let mut rng = rng_from(derive_seed(cfg.task_seed, "prototypes"));
        let prototypes = (0..cfg.vocab_size)
            .map(|_| loop {
                let v: Vec<f64> = (0..cfg.d_feat)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|a| a / norm).collect();
                }
            })
            .collect();
        Ok(SynthTask {
            cfg,
            mapping,
            prototypes,
        })
    }

    pub fn config(&self) -> &SynthTaskConfig {
        &self.cfg
    }

    pub fn prototype(&self, word: usize) -> &[f64] {
        &self.prototypes[word]
    }

    /// Word-level mapping, then each adjacent pair swapped (an odd final word stays).
    pub fn translate(&self, x: &[usize]) -> Vec<usize> {
        let mut y: Vec<usize> = x.iter().map(|&w| self.mapping[w]).collect();
        for pair in y.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        y
    }

    /// Frames for a word sequence: each word held for a random number of
    /// frames, each frame its prototype plus Gaussian noise. Values are rounded
    /// to 32-bit precision so feature files reproduce them exactly.
    pub fn render_speech(&self, x: &[usize], seed: u64) -> Result<SpeechFeatures> {
        if x.is_empty() {
            return Err(Error::invalid("cannot render an empty sequence"));
        }
        if let Some(&w) = x.iter().find(|&&w| w >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("word {w} outside the task vocabulary")));
        }
        let mut rng = rng_from(seed);
        let noise = Normal::new(0.0, self.cfg.noise).expect("validated noise");
        let d = self.cfg.d_feat;
        let mut data = Vec::new();
        let mut alignment = Vec::new();
        for (pos, &w) in x.iter().enumerate() {
            let k = rng.random_range(self.cfg.min_frames..=self.cfg.max_frames);
            for _ in 0..k {
                for &p in &self.prototypes[w] {
                    let v = if self.cfg.noise > 0.0 {
                        p + noise.sample(&mut rng)
                    } else {
                        p
                    };
                    data.push(v as f32 as f64);
                }
                alignment.push(pos);
            }
        }
        let mut s = SpeechFeatures::new(Tensor::matrix(alignment.len(), d, data)?)?;
        s.alignment = Some(alignment);
        Ok(s)
    }

    /// `n` examples; example `i` depends only on `(task, seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Triplet>> {
        if n == 0 {
            return Err(Error::invalid("corpus size must be at least 1"));
        }
        (0..n as u64)
            .map(|i| {
                let mut rng = rng_from(derive_seed_idx(seed, &[i, 0]));
                let len = rng.random_range(self.cfg.min_len..=self.cfg.max_len);
                let x: Vec<usize> = (0..len)
                    .map(|_| rng.random_range(0..self.cfg.vocab_size))
                    .collect();
                let y = self.translate(&x);
                let s = self.render_speech(&x, derive_seed_idx(seed, &[i, 1]))?;
                Ok(Triplet {
                    s,
                    x: x.into_iter().map(token_name).collect(),
                    y: y.into_iter().map(token_name).collect(),
                })
            })
            .collect()
    }
}

/// Convenience wrapper: build the task from `cfg` and draw `n` examples.
pub fn generate_synthetic_corpus(cfg: &SynthTaskConfig, n: usize, seed: u64) -> Result<Vec<Triplet>> {
    SynthTask::new(cfg.clone())?.sample(n, seed)
}
