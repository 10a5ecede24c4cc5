use rand::seq::SliceRandom;

use super::{Example, PAD};
use crate::error::{Error, Result};
use crate::model::{Role, SpeechFeatures, TokenSeq};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Examples are grouped by translation length in buckets this wide.
const BUCKET_WIDTH: usize = 5;

/// Padded examples. Token rows hold ids without BOS/EOS; masks are true on
/// real positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Position of each example in the source corpus.
    pub indices: Vec<usize>,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub src_width: usize,
    pub tgt: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    pub tgt_width: usize,
    /// `n × max_frames × d_feat`
    pub frames: Tensor,
    pub frame_mask: Vec<bool>,
    /// Non-pad decoder targets, EOS included.
    pub num_tokens: usize,
}

fn masked_row<T: Copy>(data: &[T], mask: &[bool], row: usize, width: usize) -> Vec<T> {
    (0..width)
        .filter(|&c| mask[row * width + c])
        .map(|c| data[row * width + c])
        .collect()
}

impl Batch {
    fn build(corpus: &[Example], indices: Vec<usize>) -> Self {
        let n = indices.len();
        let src_width = indices.iter().map(|&i| corpus[i].x.len()).max().unwrap_or(0);
        let tgt_width = indices.iter().map(|&i| corpus[i].y.len()).max().unwrap_or(0);
        let max_t = indices.iter().map(|&i| corpus[i].s.len()).max().unwrap_or(0);
        let d = corpus[indices[0]].s.dim();
        let mut src = vec![PAD; n * src_width];
        let mut src_mask = vec![false; n * src_width];
        let mut tgt = vec![PAD; n * tgt_width];
        let mut tgt_mask = vec![false; n * tgt_width];
        let mut frames = vec![0.0; n * max_t * d];
        let mut frame_mask = vec![false; n * max_t];
        let mut num_tokens = 0;
        for (r, &i) in indices.iter().enumerate() {
            let ex = &corpus[i];
            for (c, &t) in ex.x.ids.iter().enumerate() {
                src[r * src_width + c] = t;
                src_mask[r * src_width + c] = true;
            }
            for (c, &t) in ex.y.ids.iter().enumerate() {
                tgt[r * tgt_width + c] = t;
                tgt_mask[r * tgt_width + c] = true;
            }
            let f = ex.s.frames.data();
            frames[r * max_t * d..r * max_t * d + f.len()].copy_from_slice(f);
            frame_mask[r * max_t..r * max_t + ex.s.len()].fill(true);
            num_tokens += ex.y.len() + 1;
        }
        Batch {
            indices,
            src,
            src_mask,
            src_width,
            tgt,
            tgt_mask,
            tgt_width,
            frames: Tensor::new(vec![n, max_t, d], frames).expect("non-empty batch"),
            frame_mask,
            num_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn transcription(&self, row: usize) -> TokenSeq {
        TokenSeq::new(masked_row(&self.src, &self.src_mask, row, self.src_width), Role::Transcription)
    }

    pub fn translation(&self, row: usize) -> TokenSeq {
        TokenSeq::new(masked_row(&self.tgt, &self.tgt_mask, row, self.tgt_width), Role::Translation)
    }

    pub fn speech(&self, row: usize) -> SpeechFeatures {
        let (max_t, d) = (self.frames.shape()[1], self.frames.shape()[2]);
        let len = self.frame_mask[row * max_t..(row + 1) * max_t]
            .iter()
            .filter(|&&m| m)
            .count();
        let start = row * max_t * d;
        let data = self.frames.data()[start..start + len * d].to_vec();
        SpeechFeatures::new(Tensor::matrix(len, d, data).expect("unpadded frames"))
            .expect("finite frames")
    }
}

fn token_cost(ex: &Example) -> usize {
    ex.x.len().max(ex.y.len()) + 1
}

/// Length-bucketed batches. A batch of `n` examples costs `n × longest` in
/// both tokens (source or target, EOS included) and frames; each limit bounds
/// that padded size. Bucket contents and batch order are shuffled by `seed`.
pub fn make_batches(
    corpus: &[Example],
    max_tokens: usize,
    max_frames: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot batch an empty corpus"));
    }
    for (i, ex) in corpus.iter().enumerate() {
        if token_cost(ex) > max_tokens || ex.s.len() > max_frames {
            return Err(Error::invalid(format!(
                "example {i} ({} tokens, {} frames) exceeds the batch limits ({max_tokens} tokens, {max_frames} frames)",
                token_cost(ex),
                ex.s.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, "examples")));
    order.sort_by_key(|&i| corpus[i].y.len() / BUCKET_WIDTH);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut longest_tok, mut longest_frames) = (0, 0);
    let mut bucket = None;
    for i in order {
        let b = corpus[i].y.len() / BUCKET_WIDTH;
        let tok = longest_tok.max(token_cost(&corpus[i]));
        let fr = longest_frames.max(corpus[i].s.len());
        let n = current.len() + 1;
        let fits = bucket == Some(b)
            && n.saturating_mul(tok) <= max_tokens
            && n.saturating_mul(fr) <= max_frames;
        if !fits && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            longest_tok = 0;
            longest_frames = 0;
        }
        bucket = Some(b);
        longest_tok = longest_tok.max(token_cost(&corpus[i]));
        longest_frames = longest_frames.max(corpus[i].s.len());
        current.push(i);
    }
    groups.push(current);
    groups.shuffle(&mut rng_from(derive_seed(seed, "batches")));
    Ok(groups.into_iter().map(|g| Batch::build(corpus, g)).collect())
}
