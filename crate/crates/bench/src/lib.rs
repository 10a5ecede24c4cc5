//! Fixtures shared by the benchmarks: a small trained-shape model and a
//! slice of the default synthetic corpus.

use cress_core::data::{build_vocab, encode_corpus, generate_synthetic_corpus, SynthTaskConfig};
use cress_core::{Example, ModelConfig, TranslationModel};

pub struct Fixture {
    pub model: TranslationModel,
    pub examples: Vec<Example>,
}

/// Default-sized model (untrained) and `n` default synthetic examples.
pub fn fixture(n: usize) -> Fixture {
    let cfg = SynthTaskConfig::default();
    let corpus = generate_synthetic_corpus(&cfg, n, 7).expect("valid default task");
    let vocab = build_vocab(&corpus).expect("non-empty corpus");
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    Fixture {
        model: TranslationModel::init(model_cfg, 7).expect("valid default model"),
        examples: encode_corpus(&corpus, &vocab),
    }
}

/// Deterministic pseudo-random matrix entries in `[-1, 1)`.
pub fn filled(len: usize, salt: u64) -> Vec<f64> {
    let mut z = salt.wrapping_add(0x9E37_79B9_7F4A_7C15);
    (0..len)
        .map(|_| {
            z = z.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}
