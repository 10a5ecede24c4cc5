//! Tape-recorded forward passes (training and teacher-forced scoring).

use std::cell::{Cell, RefCell};

use super::{AttnIdx, FfnIdx, LnIdx, ModelInput, SpeechFeatures, TranslationModel, LN_EPS};
use crate::autodiff::{Gradients, Tape, Var};
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::rng::derive_seed_idx;
use crate::tensor::Tensor;

/// A stream of dropout masks. Each call draws a fresh sub-seed from a counter,
/// so a forward pass is reproducible from `(rate, seed)` alone.
#[derive(Debug)]
pub struct DropoutStream {
    rate: f64,
    seed: u64,
    calls: Cell<u64>,
}

impl DropoutStream {
    pub fn new(rate: f64, seed: u64) -> Self {
        DropoutStream {
            rate,
            seed,
            calls: Cell::new(0),
        }
    }

    pub fn off() -> Self {
        Self::new(0.0, 0)
    }

    fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        if self.rate <= 0.0 {
            return x;
        }
        let n = self.calls.get();
        self.calls.set(n + 1);
        x.dropout(self.rate, derive_seed_idx(self.seed, &[n]))
    }
}

/// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`. `mask`
/// (row-major `|q|×|k|`, true = visible) restricts each query to its visible
/// keys; a query with no visible key is rejected.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&[bool]>,
) -> Result<Var<'t>> {
    let dk = q.with_value(|t| t.cols()) as f64;
    let scores = q.matmul_t(k)?.scale(1.0 / dk.sqrt());
    scores.masked_softmax(mask)?.matmul(v)
}

/// Lower-triangular visibility for decoder self-attention.
pub(crate) fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

/// Binds a model to a tape. Parameters become tape leaves lazily, once per
/// tape, so every use of a parameter (both modalities included) accumulates
/// into the same gradient.
pub struct Graph<'m, 't> {
    model: &'m TranslationModel,
    tape: &'t Tape,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'m, 't> Graph<'m, 't> {
    pub fn new(model: &'m TranslationModel, tape: &'t Tape) -> Self {
        Graph {
            model,
            tape,
            leaves: RefCell::new(vec![None; model.params.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn model(&self) -> &'m TranslationModel {
        self.model
    }

    pub(crate) fn p(&self, idx: usize) -> Var<'t> {
        if let Some(v) = self.leaves.borrow()[idx] {
            return v;
        }
        let v = self.tape.var(self.model.params[idx].clone());
        self.leaves.borrow_mut()[idx] = Some(v);
        v
    }

    /// Tape node id of every parameter registered so far.
    pub fn parameter_nodes(&self) -> Vec<Option<usize>> {
        self.leaves.borrow().iter().map(|v| v.map(|v| v.id())).collect()
    }

    /// Add `scale ×` each parameter gradient into `acc` (one buffer per parameter).
    pub fn accumulate_grads(&self, grads: &Gradients, scale: f64, acc: &mut [Vec<f64>]) {
        for (slot, leaf) in acc.iter_mut().zip(self.leaves.borrow().iter()) {
            if let Some(g) = leaf.and_then(|v| grads.raw(v)) {
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }

    fn linear(&self, x: Var<'t>, w: usize, b: usize) -> Result<Var<'t>> {
        x.matmul(self.p(w))?.add_row(self.p(b))
    }

    fn ln(&self, x: Var<'t>, idx: LnIdx) -> Result<Var<'t>> {
        x.layer_norm(self.p(idx.gain), self.p(idx.bias), LN_EPS)
    }

    fn attention(
        &self,
        x: Var<'t>,
        memory: Var<'t>,
        idx: &AttnIdx,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let heads = self.model.config.heads;
        let dh = self.model.config.head_dim();
        let q = self.linear(x, idx.q_w, idx.q_b)?;
        let k = self.linear(memory, idx.k_w, idx.k_b)?;
        let v = self.linear(memory, idx.v_w, idx.v_b)?;
        let outs = (0..heads)
            .map(|h| {
                scaled_dot_attention(
                    q.slice_cols(h * dh, dh)?,
                    k.slice_cols(h * dh, dh)?,
                    v.slice_cols(h * dh, dh)?,
                    mask,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let joined = if heads == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)?
        };
        self.linear(joined, idx.o_w, idx.o_b)
    }

    fn ffn(&self, x: Var<'t>, idx: &FfnIdx) -> Result<Var<'t>> {
        let h = self.linear(x, idx.fc1_w, idx.fc1_b)?.relu();
        self.linear(h, idx.fc2_w, idx.fc2_b)
    }

    fn add_positions(&self, x: Var<'t>) -> Result<Var<'t>> {
        let len = x.with_value(|t| t.rows());
        x.add(self.tape.constant(self.model.positions(len)))
    }

    fn embed_tokens(&self, ids: &[usize], drop: &DropoutStream) -> Result<Var<'t>> {
        self.model.check_tokens(ids)?;
        let scale = (self.model.config.d_model as f64).sqrt();
        let e = self.p(self.model.index.embed).gather_rows(ids)?.scale(scale);
        Ok(drop.apply(self.add_positions(e)?))
    }

    fn encoder_stack(&self, mut x: Var<'t>, drop: &DropoutStream) -> Result<Var<'t>> {
        for layer in &self.model.index.enc {
            let h = self.ln(x, layer.self_ln)?;
            let a = self.attention(h, h, &layer.self_attn, None)?;
            x = x.add(drop.apply(a))?;
            let h = self.ln(x, layer.ffn_ln)?;
            let f = self.ffn(h, &layer.ffn)?;
            x = x.add(drop.apply(f))?;
        }
        self.ln(x, self.model.index.enc_ln)
    }

    /// Encoder states for source text (ids including EOS), one per token.
    pub fn encode_text(&self, ids: &[usize], drop: &DropoutStream) -> Result<Var<'t>> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let x = self.embed_tokens(ids, drop)?;
        self.encoder_stack(x, drop)
    }

    /// Encoder states for speech: strided convolutions, then the shared encoder.
    pub fn encode_speech(&self, s: &SpeechFeatures, drop: &DropoutStream) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        if s.dim() != cfg.d_feat {
            return Err(Error::shape(format!(
                "speech features have {} dims, model expects {}",
                s.dim(),
                cfg.d_feat
            )));
        }
        let mut x = self.tape.constant(s.frames.clone());
        for &(w, b) in &self.model.index.conv {
            x = x.unfold(cfg.conv.kernel, cfg.conv.stride, cfg.conv.padding)?;
            x = self.linear(x, w, b)?.relu();
        }
        let x = drop.apply(self.add_positions(x)?);
        self.encoder_stack(x, drop)
    }

    pub fn encode(&self, input: ModelInput<'_>, drop: &DropoutStream) -> Result<Var<'t>> {
        match input {
            ModelInput::Speech(s) => self.encode_speech(s, drop),
            ModelInput::Text(ids) => self.encode_text(ids, drop),
        }
    }

    /// All decoder positions at once under a causal mask. Returns the
    /// last-layer representations (`L×d`) and next-token log-distributions (`L×V`).
    pub fn decode(
        &self,
        memory: Var<'t>,
        prefix: &[usize],
        drop: &DropoutStream,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::invalid("decoder prefix must start with BOS"));
        }
        let mask = causal_mask(prefix.len());
        let mut x = self.embed_tokens(prefix, drop)?;
        for layer in &self.model.index.dec {
            let h = self.ln(x, layer.self_ln)?;
            let a = self.attention(h, h, &layer.self_attn, Some(&mask))?;
            x = x.add(drop.apply(a))?;
            let h = self.ln(x, layer.cross_ln)?;
            let c = self.attention(h, memory, &layer.cross_attn, None)?;
            x = x.add(drop.apply(c))?;
            let h = self.ln(x, layer.ffn_ln)?;
            let f = self.ffn(h, &layer.ffn)?;
            x = x.add(drop.apply(f))?;
        }
        let reps = self.ln(x, self.model.index.dec_ln)?;
        let logits = match self.model.index.out_proj {
            Some(w) => reps.matmul(self.p(w))?,
            None => reps.matmul_t(self.p(self.model.index.embed))?,
        };
        Ok((reps, logits.log_softmax(1)?))
    }
}

impl TranslationModel {
    /// Encoder states for `input` (no dropout, nothing recorded for backward).
    pub fn encode(&self, input: ModelInput<'_>) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let g = Graph::new(self, &tape);
        Ok(g.encode(input, &DropoutStream::off())?.value())
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Tensor> {
        self.encode(ModelInput::Text(ids))
    }

    pub fn encode_speech(&self, s: &SpeechFeatures) -> Result<Tensor> {
        self.encode(ModelInput::Speech(s))
    }

    /// Parallel (teacher-forced) decoder pass over `prefix` given encoder states.
    pub fn decode_parallel(&self, memory: &Tensor, prefix: &[usize]) -> Result<super::DecoderTrace> {
        let tape = Tape::no_grad();
        let g = Graph::new(self, &tape);
        let mem = tape.constant(memory.clone());
        let (reps, lp) = g.decode(mem, prefix, &DropoutStream::off())?;
        Ok(super::DecoderTrace {
            reps: reps.value(),
            log_probs: lp.value(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TranslationModel {
        TranslationModel::init(
            ModelConfig {
                enc_layers: 2,
                dec_layers: 2,
                d_model: 16,
                heads: 4,
                d_ffn: 32,
                dropout: 0.0,
                vocab_size: 12,
                d_feat: 6,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn speech(frames: usize, seed: f64) -> SpeechFeatures {
        let data = (0..frames * 6).map(|i| ((i as f64) * 0.37 + seed).sin()).collect();
        SpeechFeatures::new(Tensor::matrix(frames, 6, data).unwrap()).unwrap()
    }

    #[test]
    fn text_encoding_shapes_and_determinism() {
        let m = tiny();
        let a = m.encode_text(&[4, 5, 6, 2]).unwrap();
        assert_eq!(a.shape(), &[4, 16]);
        assert_eq!(a, m.encode_text(&[4, 5, 6, 2]).unwrap());
        assert!(m.encode_text(&[]).is_err());
        // positions matter
        let b = m.encode_text(&[5, 4, 6, 2]).unwrap();
        assert_ne!(a.row(0), b.row(1));
    }

    #[test]
    fn speech_encoding_length_formula() {
        let m = tiny();
        for t in [1usize, 2, 4, 7, 100, 133] {
            let enc = m.encode_speech(&speech(t, 0.1)).unwrap();
            assert_eq!(enc.rows(), m.config().conv.subsampled_len(t), "T_s = {t}");
        }
        let s = speech(40, 0.3);
        assert_eq!(m.encode_speech(&s).unwrap(), m.encode_speech(&s).unwrap());
    }

    #[test]
    fn decode_is_causal_and_normalised() {
        let m = tiny();
        let mem = m.encode_text(&[4, 5, 6, 7, 2]).unwrap();
        let a = m.decode_parallel(&mem, &[BOS, 8, 9, 10, 11]).unwrap();
        let b = m.decode_parallel(&mem, &[BOS, 8, 9, 4, 4]).unwrap();
        assert_eq!(a.len(), 5);
        for i in 0..3 {
            assert_eq!(a.reps.row(i), b.reps.row(i));
            assert_eq!(a.log_probs.row(i), b.log_probs.row(i));
        }
        assert_ne!(a.reps.row(3), b.reps.row(3));
        for i in 0..5 {
            let s: f64 = a.log_probs.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        assert!(m.decode_parallel(&mem, &[BOS, 99]).is_err());
        assert!(m.decode_parallel(&mem, &[5, 6]).is_err());
    }

    #[test]
    fn modalities_share_encoder_parameters() {
        let m = tiny();
        let tape = Tape::new();
        let g = Graph::new(&m, &tape);
        let off = DropoutStream::off();
        let text = g.encode_text(&[4, 5, 2], &off).unwrap();
        let before = g.parameter_nodes();
        let sp = g.encode_speech(&speech(12, 0.2), &off).unwrap();
        let after = g.parameter_nodes();
        // every encoder parameter used by text keeps the same leaf for speech
        for id in m.shared_parameter_ids() {
            if let Some(node) = before[id] {
                assert_eq!(after[id], Some(node));
            }
        }
        let loss = text.sum().add(sp.sum()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut acc: Vec<Vec<f64>> = m.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        g.accumulate_grads(&grads, 1.0, &mut acc);
        let conv_w = m.index.conv[0].0;
        assert!(acc[conv_w].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let tape = Tape::new();
        let q = tape.var(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let k = tape.var(Tensor::from_rows(&[&[0.3, 0.1]]));
        let v = tape.var(Tensor::from_rows(&[&[7.0, -1.0, 2.0]]));
        let out = scaled_dot_attention(q, k, v, None).unwrap().value();
        assert_eq!(out.data(), &[7.0, -1.0, 2.0, 7.0, -1.0, 2.0]);
        let k2 = tape.var(Tensor::from_rows(&[&[0.3, 0.1], &[0.3, 0.1]]));
        let v2 = tape.var(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]]));
        let out = scaled_dot_attention(q, k2, v2, None).unwrap().value();
        for r in 0..2 {
            for (c, want) in [2.0, 3.0, 4.0].iter().enumerate() {
                assert!((out.get2(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_formula() {
        let tape = Tape::new();
        let qd = [[0.2, -0.4], [1.1, 0.3]];
        let kd = [[0.5, 0.5], [-0.7, 0.2], [0.0, 1.0]];
        let vd = [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]];
        let to_t = |rows: &[[f64; 2]]| {
            let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            Tensor::from_rows(&r)
        };
        let out = scaled_dot_attention(
            tape.var(to_t(&qd)),
            tape.var(to_t(&kd)),
            tape.var(to_t(&vd)),
            None,
        )
        .unwrap()
        .value();
        for (i, q) in qd.iter().enumerate() {
            let s: Vec<f64> = kd
                .iter()
                .map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| s[j].exp() / z * vd[j][c]).sum();
                assert!((out.get2(i, c) - want).abs() < 1e-12);
            }
        }
    }
}
