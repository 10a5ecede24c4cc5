//! The shared encoder-decoder translation model.
//!
//! One Transformer encoder and decoder serve both modalities. Text enters
//! through the (joint) embedding table, speech through a stack of strided
//! convolutions; after the front-end both follow the identical parameter path.
//! Layers are pre-norm and positions are sinusoidal.

mod checkpoint;
mod config;
mod forward;
mod incremental;

use rand_distr::{Distribution, Normal, Uniform};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ConvSpec, ModelConfig};
pub use forward::{scaled_dot_attention, DropoutStream, Graph};
pub use incremental::{DecoderCache, EncoderMemory};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{sinusoidal_positions, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;
const POSITION_TABLE: usize = 1024;

/// Continuous speech features, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFeatures {
    pub frames: Tensor,
    /// Index of the source token each frame renders (synthetic data only).
    pub alignment: Option<Vec<usize>>,
}

impl SpeechFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::shape("speech features must be a frames × dims matrix"));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("speech features contain non-finite values"));
        }
        Ok(SpeechFeatures {
            frames,
            alignment: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Source-language text; the encoder sees it followed by EOS.
    Transcription,
    /// Target-language text, without specials.
    Translation,
    /// Decoder context, starting with BOS.
    Prefix,
}

/// A sequence of token ids tagged with its role.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub role: Role,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, role: Role) -> Self {
        TokenSeq { ids, role }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Encoder input: the tokens followed by EOS.
    pub fn encoder_input(&self) -> Vec<usize> {
        let mut v = self.ids.clone();
        v.push(EOS);
        v
    }

    /// Teacher-forcing context `BOS y₁ … y_n`.
    pub fn decoder_prefix(&self) -> TokenSeq {
        let mut v = Vec::with_capacity(self.ids.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.ids);
        TokenSeq::new(v, Role::Prefix)
    }

    /// Next-token targets `y₁ … y_n EOS`.
    pub fn decoder_targets(&self) -> Vec<usize> {
        let mut v = self.ids.clone();
        v.push(EOS);
        v
    }
}

/// What the encoder reads.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Speech(&'a SpeechFeatures),
    /// Source ids including the trailing EOS.
    Text(&'a [usize]),
}

/// Per-position decoder outputs: last-layer representations and next-token
/// log-distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrace {
    /// `L × d_model`
    pub reps: Tensor,
    /// `L × V`
    pub log_probs: Tensor,
}

impl DecoderTrace {
    pub fn len(&self) -> usize {
        self.reps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIdx {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIdx {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIdx {
    pub self_ln: LnIdx,
    pub self_attn: AttnIdx,
    pub ffn_ln: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIdx {
    pub self_ln: LnIdx,
    pub self_attn: AttnIdx,
    pub cross_ln: LnIdx,
    pub cross_attn: AttnIdx,
    pub ffn_ln: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIndex {
    pub embed: usize,
    pub conv: Vec<(usize, usize)>,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_proj: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        );
        let b = self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros);
        (w, b)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        let gain = self.add(format!("{prefix}.gain"), vec![d], Init::Ones);
        let bias = self.add(format!("{prefix}.bias"), vec![d], Init::Zeros);
        LnIdx { gain, bias }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (q_w, q_b) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_w, k_b) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_w, v_b) = self.linear(&format!("{prefix}.v"), d, d);
        let (o_w, o_b) = self.linear(&format!("{prefix}.o"), d, d);
        AttnIdx {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.fc1"), d, f);
        let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.fc2"), f, d);
        FfnIdx {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }
}

/// Parameter names, shapes and initialisers in the fixed checkpoint order.
fn build_layout(cfg: &ModelConfig) -> (ParamIndex, LayoutBuilder) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embed = b.add(
        "embed".into(),
        vec![cfg.vocab_size, d],
        Init::Normal((d as f64).powf(-0.5)),
    );
    let conv = (0..cfg.conv.layers)
        .map(|i| {
            let c_in = if i == 0 { cfg.d_feat } else { d };
            b.linear(&format!("conv{i}"), cfg.conv.kernel * c_in, d)
        })
        .collect();
    let enc = (0..cfg.enc_layers)
        .map(|l| EncLayerIdx {
            self_ln: b.ln(&format!("enc{l}.self_ln"), d),
            self_attn: b.attn(&format!("enc{l}.self_attn"), d),
            ffn_ln: b.ln(&format!("enc{l}.ffn_ln"), d),
            ffn: b.ffn(&format!("enc{l}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let enc_ln = b.ln("enc.final_ln", d);
    let dec = (0..cfg.dec_layers)
        .map(|l| DecLayerIdx {
            self_ln: b.ln(&format!("dec{l}.self_ln"), d),
            self_attn: b.attn(&format!("dec{l}.self_attn"), d),
            cross_ln: b.ln(&format!("dec{l}.cross_ln"), d),
            cross_attn: b.attn(&format!("dec{l}.cross_attn"), d),
            ffn_ln: b.ln(&format!("dec{l}.ffn_ln"), d),
            ffn: b.ffn(&format!("dec{l}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let dec_ln = b.ln("dec.final_ln", d);
    let out_proj = (!cfg.tie_embeddings).then(|| {
        b.add(
            "out_proj.weight".into(),
            vec![d, cfg.vocab_size],
            Init::Xavier {
                fan_in: d,
                fan_out: cfg.vocab_size,
            },
        )
    });
    (
        ParamIndex {
            embed,
            conv,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_proj,
        },
        b,
    )
}

/// Parameters plus configuration. Immutable during evaluation; training
/// replaces parameter values between steps.
#[derive(Clone, Debug)]
pub struct TranslationModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) index: ParamIndex,
    positions: Tensor,
}

impl PartialEq for TranslationModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

impl TranslationModel {
    /// Deterministic initialisation: Xavier-uniform weights, N(0, d^-½)
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (index, layout) = build_layout(&config);
        let mut rng = rng_from(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match *init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                        (0..n).map(|_| u.sample(&mut rng)).collect()
                    }
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config, index, layout.names, params)
    }

    fn assemble(
        config: ModelConfig,
        index: ParamIndex,
        names: Vec<String>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let positions = sinusoidal_positions(POSITION_TABLE, config.d_model);
        Ok(TranslationModel {
            config,
            names,
            params,
            index,
            positions,
        })
    }

    /// Rebuild from named arrays; names and shapes must match the layout of `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (index, layout) = build_layout(&config);
        if named.len() != layout.names.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                layout.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named
            .into_iter()
            .zip(layout.names.iter().zip(&layout.shapes))
        {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` {:?} does not match expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Self::assemble(config, index, layout.names, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices of every encoder/decoder parameter shared by both modalities.
    pub fn shared_parameter_ids(&self) -> Vec<usize> {
        let conv: Vec<usize> = self.index.conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        (0..self.params.len())
            .filter(|i| *i != self.index.embed && !conv.contains(i) && Some(*i) != self.index.out_proj)
            .collect()
    }

    pub(crate) fn positions(&self, len: usize) -> Tensor {
        if len <= POSITION_TABLE {
            let d = self.config.d_model;
            Tensor::matrix(len, d, self.positions.data()[..len * d].to_vec())
                .expect("position slice")
        } else {
            sinusoidal_positions(len, self.config.d_model)
        }
    }

    pub(crate) fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        Ok(())
    }
}
