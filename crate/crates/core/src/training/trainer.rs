use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::loss::{cress_loss, mt_loss, mtl_loss, LossOutput};
use super::optim::{lr_schedule, OptimizerState};
use super::sampling::ScheduleState;
use super::{Mode, TrainConfig};
use crate::analysis::{corpus_bleu, Smoothing};
use crate::data::{make_batches, Example};
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelInput, TranslationModel};
use crate::rng::{derive_seed, derive_seed_idx};

/// Where a run writes its per-epoch checkpoints and metrics log.
#[derive(Clone, Debug, Default)]
pub struct TrainPaths {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// `"pretrain"` for text-only epochs, `"main"` otherwise.
    pub phase: &'static str,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub p_gold: f64,
    pub loss_st: f64,
    pub loss_mt: f64,
    pub loss_reg: f64,
    pub total: f64,
    /// Weight statistics are present only while adaptive weighting is active.
    pub mean_weight: Option<f64>,
    pub min_weight: Option<f64>,
    pub max_weight: Option<f64>,
    pub mean_gap: f64,
    pub gold_fraction: f64,
    pub dev_bleu: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean of the last `checkpoint_average_k` epoch checkpoints.
    pub model: TranslationModel,
    pub last: TranslationModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    /// Smallest and largest token weight seen while adaptive weighting was on.
    pub weight_range: Option<(f64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Elementwise mean of the parameters of `models` (identical configs required).
pub fn average_models(models: &[&TranslationModel]) -> Result<TranslationModel> {
    let first = *models
        .first()
        .ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    if let Some(m) = models.iter().find(|m| m.config() != first.config()) {
        return Err(Error::invalid(format!(
            "cannot average models with different configurations ({:?} vs {:?})",
            m.config(),
            first.config()
        )));
    }
    let mut out = first.clone();
    let k = models.len() as f64;
    for (i, p) in out.params_mut().iter_mut().enumerate() {
        let data = p.data_mut();
        for m in &models[1..] {
            for (a, b) in data.iter_mut().zip(m.params()[i].data()) {
                *a += b;
            }
        }
        data.iter_mut().for_each(|a| *a /= k);
    }
    Ok(out)
}

/// Average the last `k` of `paths` (in the given order).
pub fn average_checkpoints(paths: &[PathBuf], k: usize) -> Result<TranslationModel> {
    if paths.is_empty() || k == 0 {
        return Err(Error::invalid("need at least one checkpoint and k ≥ 1"));
    }
    let start = paths.len().saturating_sub(k);
    let models = paths[start..]
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    average_models(&models.iter().collect::<Vec<_>>())
}

/// Greedy speech-to-text BLEU on `dev`.
pub fn dev_bleu(model: &TranslationModel, dev: &[Example]) -> Result<f64> {
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for ex in dev {
        let h = greedy_decode(model, ModelInput::Speech(&ex.s), None)?;
        hyps.push(h.output().to_vec());
        refs.push(ex.y.ids.clone());
    }
    Ok(corpus_bleu(&hyps, &refs, Smoothing::Exp)?.bleu)
}

struct EpochAcc {
    tokens: f64,
    st: f64,
    mt: f64,
    reg: f64,
    total: f64,
    gap_sum: f64,
    gap_n: usize,
    w_sum: f64,
    w_min: f64,
    w_max: f64,
    gold: f64,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc {
            tokens: 0.0,
            st: 0.0,
            mt: 0.0,
            reg: 0.0,
            total: 0.0,
            gap_sum: 0.0,
            gap_n: 0,
            w_sum: 0.0,
            w_min: f64::INFINITY,
            w_max: f64::NEG_INFINITY,
            gold: 0.0,
        }
    }

    fn add(&mut self, out: &LossOutput) {
        let l = &out.loss;
        let n = l.num_tokens as f64;
        self.tokens += n;
        self.st += l.st * n;
        self.mt += l.mt * n;
        self.reg += l.reg * n;
        self.total += l.total * n;
        self.gold += l.gold_fraction * n;
        self.gap_sum += l.gaps.iter().sum::<f64>();
        self.gap_n += l.gaps.len();
        for &w in &l.weights {
            self.w_sum += w;
            self.w_min = self.w_min.min(w);
            self.w_max = self.w_max.max(w);
        }
    }
}

struct MetricsLog {
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(MetricsLog {
                file: None,
                path: PathBuf::new(),
            });
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            file: Some(BufWriter::new(file)),
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(m).expect("metrics serialise");
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Train `model` on `train` with early stopping on dev BLEU.
///
/// Each epoch shuffles length buckets, updates with Adam under the warmup
/// schedule, evaluates greedy dev BLEU and checkpoints. Training stops after
/// `patience` epochs without a new best dev BLEU (or at `max_epochs`); the
/// returned model averages the last `checkpoint_average_k` epochs.
pub fn train(
    mut model: TranslationModel,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    paths: Option<&TrainPaths>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("training and dev corpora must be non-empty"));
    }
    let ckpt_dir = paths.and_then(|p| p.checkpoint_dir.as_deref());
    if let Some(dir) = ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = MetricsLog::open(paths.and_then(|p| p.metrics.as_deref()))?;
    let mut opt = OptimizerState::new(&model);
    let mut metrics = Vec::new();
    let mut recent: VecDeque<TranslationModel> = VecDeque::new();
    let mut on_disk: VecDeque<PathBuf> = VecDeque::new();
    let mut weight_range: Option<(f64, f64)> = None;
    let (mut best_bleu, mut best_epoch, mut stale) = (f64::NEG_INFINITY, 0, 0);
    let batch_seed = derive_seed(cfg.seed, "batches");
    let step_seed = derive_seed(cfg.seed, "steps");

    let phases = (1..=cfg.pretrain_mt_epochs)
        .map(|e| ("pretrain", e))
        .chain((1..=cfg.max_epochs).map(|e| ("main", e)));
    for (phase, epoch) in phases {
        let pretrain = phase == "pretrain";
        let schedule = ScheduleState::at(epoch, cfg.mu);
        let batches = make_batches(
            train,
            cfg.max_tokens,
            cfg.max_frames,
            derive_seed_idx(batch_seed, &[pretrain as u64, epoch as u64]),
        )?;
        let mut acc = EpochAcc::new();
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let seed = derive_seed_idx(step_seed, &[opt.step]);
            let out = if pretrain {
                mt_loss(&model, batch, cfg, seed)?
            } else {
                match cfg.mode {
                    Mode::Mtl => mtl_loss(&model, batch, cfg, seed)?,
                    Mode::Cress => cress_loss(&model, batch, &schedule, cfg, seed)?,
                }
            };
            if !out.loss.total.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            lr = lr_schedule(opt.step + 1, cfg.warmup_steps, cfg.max_lr);
            opt.adam_step(model.params_mut(), &out.grads, lr)?;
            acc.add(&out);
        }

        let adaptive = !pretrain && cfg.adaptive_active(epoch);
        if adaptive && acc.w_sum > 0.0 {
            weight_range = Some(match weight_range {
                None => (acc.w_min, acc.w_max),
                Some((lo, hi)) => (lo.min(acc.w_min), hi.max(acc.w_max)),
            });
        }
        let bleu = dev_bleu(&model, dev)?;
        let m = EpochMetrics {
            phase,
            epoch,
            step: opt.step,
            p_gold: if !pretrain && cfg.sampling_on() {
                schedule.p_gold
            } else {
                1.0
            },
            loss_st: acc.st / acc.tokens,
            loss_mt: acc.mt / acc.tokens,
            loss_reg: acc.reg / acc.tokens,
            total: acc.total / acc.tokens,
            mean_weight: adaptive.then(|| acc.w_sum / acc.gap_n as f64),
            min_weight: adaptive.then_some(acc.w_min),
            max_weight: adaptive.then_some(acc.w_max),
            mean_gap: if acc.gap_n > 0 {
                acc.gap_sum / acc.gap_n as f64
            } else {
                0.0
            },
            gold_fraction: acc.gold / acc.tokens,
            dev_bleu: bleu,
            lr,
        };
        log.write(&m)?;
        metrics.push(m);
        if pretrain {
            continue;
        }

        if let Some(dir) = ckpt_dir {
            let path = dir.join(format!("epoch{epoch:03}.ckpt"));
            save_checkpoint(
                &path,
                &Checkpoint {
                    model: model.clone(),
                    optimizer: Some(opt.clone()),
                    epoch: Some(epoch),
                },
            )?;
            on_disk.push_back(path);
            if on_disk.len() > cfg.checkpoint_average_k {
                let old = on_disk.pop_front().unwrap();
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        recent.push_back(model.clone());
        if recent.len() > cfg.checkpoint_average_k {
            recent.pop_front();
        }

        if bleu > best_bleu {
            best_bleu = bleu;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let averaged = average_models(&recent.iter().collect::<Vec<_>>())?;
    let mut checkpoints: Vec<PathBuf> = on_disk.into_iter().collect();
    if let Some(dir) = ckpt_dir {
        let path = dir.join("averaged.ckpt");
        save_checkpoint(&path, &Checkpoint::model_only(averaged.clone()))?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model: averaged,
        last: model,
        metrics,
        best_epoch,
        best_dev_bleu: best_bleu,
        weight_range,
        checkpoints,
    })
}
