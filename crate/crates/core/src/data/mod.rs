//! Corpora: the synthetic speech/translation task, manifest files, the joint
//! vocabulary and length-bucketed batching.

mod batch;
mod manifest;
mod synth;
mod vocab;

pub use batch::{make_batches, Batch};
pub use manifest::{
    load_manifest, read_features, write_corpus, write_features, write_manifest, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use synth::{generate_synthetic_corpus, SynthTask, SynthTaskConfig};
pub use vocab::{build_vocab, Vocabulary};

use crate::model::{ModelInput, Role, SpeechFeatures, TokenSeq};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// One training example in surface form: speech, transcription, translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub s: SpeechFeatures,
    pub x: Vec<String>,
    pub y: Vec<String>,
}

/// A triplet mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub s: SpeechFeatures,
    pub x: TokenSeq,
    pub y: TokenSeq,
}

impl Example {
    pub fn new(t: &Triplet, vocab: &Vocabulary) -> Self {
        Example {
            s: t.s.clone(),
            x: TokenSeq::new(vocab.encode(&t.x), Role::Transcription),
            y: TokenSeq::new(vocab.encode(&t.y), Role::Translation),
        }
    }

    pub fn speech(&self) -> ModelInput<'_> {
        ModelInput::Speech(&self.s)
    }
}

pub fn encode_corpus(corpus: &[Triplet], vocab: &Vocabulary) -> Vec<Example> {
    corpus.iter().map(|t| Example::new(t, vocab)).collect()
}
