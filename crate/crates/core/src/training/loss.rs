use super::sampling::{build_mixed_prefix, MixedPrefix, ScheduleState};
use super::TrainConfig;
use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{DropoutStream, Graph, ModelInput, SpeechFeatures, TranslationModel};
use crate::rng::{derive_seed, derive_seed_idx, rng_from};
use crate::tensor::{cosine_similarity, Tensor};

/// Batch-level loss terms, each normalized by the batch's target token count,
/// with the per-token gaps and weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub st: f64,
    pub mt: f64,
    pub reg: f64,
    /// Multiplier applied to `reg` in `total` (zero when regularization is off).
    pub reg_weight: f64,
    pub total: f64,
    /// Per-token weights (all ones unless adaptive weighting is active).
    pub weights: Vec<f64>,
    pub gaps: Vec<f64>,
    pub num_tokens: usize,
    /// Fraction of prefix positions that kept the gold word.
    pub gold_fraction: f64,
}

/// Loss terms plus the gradient of `total` for every parameter.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

/// `w = base + scale·G` for every gap, rejecting gaps outside `[0, 2]`.
pub fn token_weights(gaps: &[f64], base: f64, scale: f64) -> Result<Vec<f64>> {
    gaps.iter()
        .map(|&g| {
            if (0.0..=2.0).contains(&g) {
                Ok(base + scale * g)
            } else {
                Err(Error::invalid(format!("modality gap {g} outside [0, 2]")))
            }
        })
        .collect()
}

fn row_gaps(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    (0..a.rows())
        .map(|i| Ok(1.0 - cosine_similarity(a.row(i), b.row(i))?))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Objective {
    label_smoothing: f64,
    reg_weight: f64,
    /// `(base, scale)` when token weights are active.
    adaptive: Option<(f64, f64)>,
}

struct Terms {
    st: f64,
    mt: f64,
    reg: f64,
    gaps: Vec<f64>,
    weights: Vec<f64>,
}

struct Sources {
    speech: SpeechFeatures,
    src: Vec<usize>,
    gold: Vec<usize>,
    targets: Vec<usize>,
}

fn sources(batch: &Batch, row: usize) -> Sources {
    let y = batch.translation(row);
    Sources {
        speech: batch.speech(row),
        src: batch.transcription(row).encoder_input(),
        gold: y.decoder_prefix().ids,
        targets: y.decoder_targets(),
    }
}

/// Both branches on one tape. The dropout call order (speech encoder, text
/// encoder, speech decoder, text decoder) is fixed so equal seeds give equal
/// masks under every objective.
fn pair_graph<'t>(
    g: &Graph<'_, 't>,
    ex: &Sources,
    prefix_s: &[usize],
    prefix_x: &[usize],
    obj: Objective,
    drop: &DropoutStream,
) -> Result<(Var<'t>, Terms)> {
    let enc_s = g.encode(ModelInput::Speech(&ex.speech), drop)?;
    let enc_x = g.encode(ModelInput::Text(&ex.src), drop)?;
    let (rep_s, lp_s) = g.decode(enc_s, prefix_s, drop)?;
    let (rep_x, lp_x) = g.decode(enc_x, prefix_x, drop)?;
    let nll_s = lp_s.smoothed_nll(&ex.targets, obj.label_smoothing)?;
    let nll_x = lp_x.smoothed_nll(&ex.targets, obj.label_smoothing)?;
    let kl = lp_s.kl_bidirectional_rows(lp_x)?;
    let gaps = row_gaps(&rep_s.value(), &rep_x.value())?;

    let (st, mt, reg, weights) = match obj.adaptive {
        None => (nll_s.sum(), nll_x.sum(), kl.sum(), vec![1.0; gaps.len()]),
        Some((base, scale)) => {
            let w = token_weights(&gaps, base, scale)?;
            (
                nll_s.weighted_sum(&w)?,
                nll_x.weighted_sum(&w)?,
                kl.weighted_sum(&w)?,
                w,
            )
        }
    };
    let mut total = st.add(mt)?;
    if obj.reg_weight != 0.0 {
        total = total.add(reg.scale(obj.reg_weight))?;
    }
    let terms = Terms {
        st: st.item(),
        mt: mt.item(),
        reg: reg.item(),
        gaps,
        weights,
    };
    Ok((total, terms))
}

/// Teacher-forced distributions of both branches, without dropout and
/// without recording anything for differentiation.
fn first_pass(model: &TranslationModel, ex: &Sources) -> Result<(Tensor, Tensor)> {
    let tape = Tape::no_grad();
    let g = Graph::new(model, &tape);
    let off = DropoutStream::off();
    let enc_s = g.encode(ModelInput::Speech(&ex.speech), &off)?;
    let (_, lp_s) = g.decode(enc_s, &ex.gold, &off)?;
    let enc_x = g.encode(ModelInput::Text(&ex.src), &off)?;
    let (_, lp_x) = g.decode(enc_x, &ex.gold, &off)?;
    Ok((lp_s.value(), lp_x.value()))
}

fn mixed_prefixes(
    model: &TranslationModel,
    ex: &Sources,
    p_gold: f64,
    shared_noise: bool,
    seed: u64,
    row: usize,
) -> Result<(MixedPrefix, MixedPrefix)> {
    let (lp_s, lp_x) = first_pass(model, ex)?;
    let noise = derive_seed(seed, "gumbel");
    let mixing = derive_seed(seed, "mixing");
    let r = row as u64;
    let text_noise = if shared_noise { 0 } else { 1 };
    let st = build_mixed_prefix(
        &lp_s,
        &ex.gold,
        p_gold,
        &mut rng_from(derive_seed_idx(noise, &[r, 0])),
        &mut rng_from(derive_seed_idx(mixing, &[r, 0])),
    )?;
    let mt = build_mixed_prefix(
        &lp_x,
        &ex.gold,
        p_gold,
        &mut rng_from(derive_seed_idx(noise, &[r, text_noise])),
        &mut rng_from(derive_seed_idx(mixing, &[r, 1])),
    )?;
    Ok((st, mt))
}

fn batch_loss(
    model: &TranslationModel,
    batch: &Batch,
    obj: Objective,
    sampling: Option<(f64, bool)>,
    seed: u64,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let norm = 1.0 / batch.num_tokens as f64;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let (mut st, mut mt, mut reg) = (0.0, 0.0, 0.0);
    let (mut gaps, mut weights) = (Vec::new(), Vec::new());
    let (mut kept, mut positions) = (0usize, 0usize);
    let dropout_seed = derive_seed(seed, "dropout");
    for row in 0..batch.len() {
        let ex = sources(batch, row);
        let (prefix_s, prefix_x) = match sampling {
            Some((p_gold, shared)) => {
                let (a, b) = mixed_prefixes(model, &ex, p_gold, shared, seed, row)?;
                kept += a.records.iter().chain(&b.records).filter(|r| r.gold).count();
                positions += a.records.len() + b.records.len();
                (a.tokens, b.tokens)
            }
            None => {
                kept += 2 * (ex.gold.len() - 1);
                positions += 2 * (ex.gold.len() - 1);
                (ex.gold.clone(), ex.gold.clone())
            }
        };
        let tape = Tape::new();
        let g = Graph::new(model, &tape);
        let drop = DropoutStream::new(
            model.config().dropout,
            derive_seed_idx(dropout_seed, &[row as u64]),
        );
        let (total, terms) = pair_graph(&g, &ex, &prefix_s, &prefix_x, obj, &drop)?;
        let example_grads = tape.backward(total.scale(norm))?;
        g.accumulate_grads(&example_grads, 1.0, &mut grads);
        st += terms.st;
        mt += terms.mt;
        reg += terms.reg;
        gaps.extend(terms.gaps);
        weights.extend(terms.weights);
    }
    let (st, mt, reg) = (st * norm, mt * norm, reg * norm);
    Ok(LossOutput {
        loss: LossBreakdown {
            st,
            mt,
            reg,
            reg_weight: obj.reg_weight,
            total: st + mt + obj.reg_weight * reg,
            weights,
            gaps,
            num_tokens: batch.num_tokens,
            gold_fraction: if positions == 0 {
                1.0
            } else {
                kept as f64 / positions as f64
            },
        },
        grads,
    })
}

/// Teacher-forced speech and text cross-entropy, summed. `reg` reports the
/// KL between the branches but does not enter `total`.
pub fn mtl_loss(
    model: &TranslationModel,
    batch: &Batch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossOutput> {
    let obj = Objective {
        label_smoothing: cfg.label_smoothing,
        reg_weight: 0.0,
        adaptive: None,
    };
    batch_loss(model, batch, obj, None, seed)
}

/// The full objective: mixed prefixes (when sampling is on), KL
/// regularization weighted by `λ` (when on) and gap-based token weights (when
/// active for this epoch).
pub fn cress_loss(
    model: &TranslationModel,
    batch: &Batch,
    schedule: &ScheduleState,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossOutput> {
    let obj = Objective {
        label_smoothing: cfg.label_smoothing,
        reg_weight: cfg.reg_weight(),
        adaptive: cfg
            .adaptive_active(schedule.epoch)
            .then_some((cfg.weight_base, cfg.weight_scale)),
    };
    let sampling = cfg
        .sampling_on()
        .then_some((schedule.p_gold, cfg.shared_gumbel));
    batch_loss(model, batch, obj, sampling, seed)
}

/// Text-only cross-entropy, for pre-training the translation model.
pub fn mt_loss(
    model: &TranslationModel,
    batch: &Batch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossOutput> {
    let norm = 1.0 / batch.num_tokens as f64;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut mt = 0.0;
    let dropout_seed = derive_seed(seed, "dropout");
    for row in 0..batch.len() {
        let ex = sources(batch, row);
        let tape = Tape::new();
        let g = Graph::new(model, &tape);
        let drop = DropoutStream::new(
            model.config().dropout,
            derive_seed_idx(dropout_seed, &[row as u64]),
        );
        let enc = g.encode(ModelInput::Text(&ex.src), &drop)?;
        let (_, lp) = g.decode(enc, &ex.gold, &drop)?;
        let loss = lp.smoothed_nll(&ex.targets, cfg.label_smoothing)?.sum();
        mt += loss.item();
        let example_grads = tape.backward(loss.scale(norm))?;
        g.accumulate_grads(&example_grads, 1.0, &mut grads);
    }
    let mt = mt * norm;
    Ok(LossOutput {
        loss: LossBreakdown {
            st: 0.0,
            mt,
            reg: 0.0,
            reg_weight: 0.0,
            total: mt,
            weights: Vec::new(),
            gaps: Vec::new(),
            num_tokens: batch.num_tokens,
            gold_fraction: 1.0,
        },
        grads,
    })
}
