use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the strided 1-D convolutions that shorten speech features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            layers: 2,
            kernel: 5,
            stride: 2,
            padding: 2,
        }
    }
}

impl ConvSpec {
    /// `floor((len + 2·padding − kernel) / stride) + 1`
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }

    /// Encoder length after all convolution layers.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        (0..self.layers).fold(frames, |l, _| self.out_len(l))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Size of the joint source/target vocabulary, specials included.
    pub vocab_size: usize,
    pub d_feat: usize,
    pub conv: ConvSpec,
    /// Share the embedding table with the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            vocab_size: 54,
            d_feat: 32,
            conv: ConvSpec::default(),
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// The Transformer-base translation model (6+6 layers, 512 wide, 8 heads).
    pub fn base(vocab_size: usize, d_feat: usize) -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            heads: 8,
            d_ffn: 2048,
            dropout: 0.1,
            vocab_size,
            d_feat,
            conv: ConvSpec::default(),
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.enc_layers", self.enc_layers),
            ("model.dec_layers", self.dec_layers),
            ("model.d_model", self.d_model),
            ("model.heads", self.heads),
            ("model.d_ffn", self.d_ffn),
            ("model.d_feat", self.d_feat),
            ("model.conv.kernel", self.conv.kernel),
            ("model.conv.stride", self.conv.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return Err(Error::config("model.vocab_size", "must exceed the special tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.conv.kernel > 2 * self.conv.padding + 1 {
            return Err(Error::config(
                "model.conv.kernel",
                "kernel wider than 2·padding + 1 would reject single-frame inputs",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let v = self.vocab_size;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let conv: usize = (0..self.conv.layers)
            .map(|i| {
                let c_in = if i == 0 { self.d_feat } else { d };
                self.conv.kernel * c_in * d + d
            })
            .sum();
        let enc = self.enc_layers * (2 * ln + attn + ffn) + ln;
        let dec = self.dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        let out = if self.tie_embeddings { 0 } else { d * v };
        v * d + conv + enc + dec + out
    }
}
