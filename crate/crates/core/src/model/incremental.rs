//! Step-by-step decoding without a tape. Keys and values of earlier positions
//! are cached per layer and head, so each step costs one position. The
//! arithmetic mirrors `forward.rs` operation for operation.

use super::{AttnIdx, FfnIdx, LnIdx, TranslationModel, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, Layout, Tensor};

/// Cross-attention keys/values for each decoder layer and head.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    /// `[layer][head]`, each `T × d_head` row-major
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention keys/values of the positions decoded so far.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let lb = if trans_b {
        Layout::transposed(k)
    } else {
        Layout::normal(n)
    };
    gemm_acc(m, k, n, a, Layout::normal(k), b, lb, &mut out, 0.0);
    out
}

fn split_heads(x: &[f64], rows: usize, d: usize, heads: usize) -> Vec<Vec<f64>> {
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            out
        })
        .collect()
}

impl TranslationModel {
    fn linear_rows(&self, x: &[f64], rows: usize, w: usize, b: usize) -> Vec<f64> {
        let wt = &self.params[w];
        let (k, n) = wt.dims2();
        let mut out = mm(rows, k, n, x, wt.data(), false);
        let bias = self.params[b].data();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[i % n];
        }
        out
    }

    fn ln_rows(&self, x: &[f64], idx: LnIdx) -> Vec<f64> {
        let g = self.params[idx.gain].data();
        let b = self.params[idx.bias].data();
        let cols = g.len();
        let (xhat, _) = tensor::layer_norm_rows(x, cols, LN_EPS);
        xhat.iter()
            .enumerate()
            .map(|(i, v)| v * g[i % cols] + b[i % cols])
            .collect()
    }

    fn ffn_row(&self, x: &[f64], idx: &FfnIdx) -> Vec<f64> {
        let h: Vec<f64> = self
            .linear_rows(x, 1, idx.fc1_w, idx.fc1_b)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        self.linear_rows(&h, 1, idx.fc2_w, idx.fc2_b)
    }

    /// One query row attending over per-head key/value blocks of `n` rows.
    fn attend_row(&self, q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], n: usize, o: &AttnIdx) -> Vec<f64> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut joined = Vec::with_capacity(heads * dh);
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut scores: Vec<f64> = mm(1, dh, n, qh, &keys[h], true)
                .into_iter()
                .map(|s| s * scale)
                .collect();
            tensor::masked_softmax_row(&mut scores, None);
            joined.extend(mm(1, n, dh, &scores, &values[h], false));
        }
        self.linear_rows(&joined, 1, o.o_w, o.o_b)
    }

    /// Precompute cross-attention keys and values from encoder states.
    pub fn encoder_memory(&self, enc: &Tensor) -> Result<EncoderMemory> {
        let (rows, d) = enc.dims2();
        if d != self.config.d_model {
            return Err(Error::shape(format!(
                "encoder states have width {d}, model expects {}",
                self.config.d_model
            )));
        }
        let heads = self.config.heads;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for layer in &self.index.dec {
            let a = &layer.cross_attn;
            let k = self.linear_rows(enc.data(), rows, a.k_w, a.k_b);
            let v = self.linear_rows(enc.data(), rows, a.v_w, a.v_b);
            keys.push(split_heads(&k, rows, d, heads));
            values.push(split_heads(&v, rows, d, heads));
        }
        Ok(EncoderMemory {
            keys,
            values,
            len: rows,
        })
    }

    pub fn new_decoder_cache(&self) -> DecoderCache {
        let layers = self.index.dec.len();
        let heads = self.config.heads;
        DecoderCache {
            keys: vec![vec![Vec::new(); heads]; layers],
            values: vec![vec![Vec::new(); heads]; layers],
            len: 0,
        }
    }

    /// Feed one token at the next position; returns the last-layer
    /// representation and the next-token log-distribution.
    pub fn decode_step(
        &self,
        memory: &EncoderMemory,
        cache: &mut DecoderCache,
        token: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tokens(&[token])?;
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let pos = cache.len;
        let scale = (d as f64).sqrt();
        let emb = self.params[self.index.embed].row(token);
        let pe = self.positions(pos + 1);
        let mut x: Vec<f64> = emb
            .iter()
            .zip(pe.row(pos))
            .map(|(e, p)| e * scale + p)
            .collect();

        for (l, layer) in self.index.dec.iter().enumerate() {
            let h = self.ln_rows(&x, layer.self_ln);
            let a = &layer.self_attn;
            let q = self.linear_rows(&h, 1, a.q_w, a.q_b);
            let k = self.linear_rows(&h, 1, a.k_w, a.k_b);
            let v = self.linear_rows(&h, 1, a.v_w, a.v_b);
            for hd in 0..self.config.heads {
                cache.keys[l][hd].extend_from_slice(&k[hd * dh..(hd + 1) * dh]);
                cache.values[l][hd].extend_from_slice(&v[hd * dh..(hd + 1) * dh]);
            }
            let att = self.attend_row(&q, &cache.keys[l], &cache.values[l], pos + 1, a);
            x.iter_mut().zip(&att).for_each(|(x, a)| *x += a);

            let h = self.ln_rows(&x, layer.cross_ln);
            let c = &layer.cross_attn;
            let q = self.linear_rows(&h, 1, c.q_w, c.q_b);
            let att = self.attend_row(&q, &memory.keys[l], &memory.values[l], memory.len, c);
            x.iter_mut().zip(&att).for_each(|(x, a)| *x += a);

            let h = self.ln_rows(&x, layer.ffn_ln);
            let f = self.ffn_row(&h, &layer.ffn);
            x.iter_mut().zip(&f).for_each(|(x, a)| *x += a);
        }
        cache.len += 1;
        let rep = self.ln_rows(&x, self.index.dec_ln);
        let v = self.config.vocab_size;
        let logits = match self.index.out_proj {
            Some(w) => mm(1, d, v, &rep, self.params[w].data(), false),
            None => mm(1, d, v, &rep, self.params[self.index.embed].data(), true),
        };
        let lp = tensor::log_softmax(&Tensor::matrix(1, v, logits)?, 1)?;
        Ok((rep, lp.into_data()))
    }
}
