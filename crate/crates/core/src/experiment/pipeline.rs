use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::analysis::report::{
    line_plot_svg, write_curve, write_density, write_gap_records, write_length_buckets, write_rows,
    write_svg, Series,
};
use crate::analysis::{
    bleu_by_length, corpus_bleu, curve_trend, gap_curve, gap_records, kde, paired_bootstrap,
    CurvePoint, Density, GapRecord, LengthBucket, Smoothing, Strategy, KDE_GRID_POINTS, KDE_RANGE,
};
use crate::data::{
    build_vocab, encode_corpus, generate_synthetic_corpus, load_manifest, write_corpus, Example,
    Triplet, Vocabulary,
};
use crate::decoding::{beam_decode, greedy_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelInput, TranslationModel};
use crate::training::{train, Mode, TrainOutcome, TrainPaths};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AVERAGED_CHECKPOINT: &str = "averaged.ckpt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the resolved configuration into the output directory.
pub fn echo_config(cfg: &ExperimentConfig) -> Result<PathBuf> {
    create_dir(&cfg.paths.output_dir)?;
    let path = cfg.paths.output_dir.join(CONFIG_ECHO);
    write_text(&path, &cfg.to_toml())?;
    Ok(path)
}

/// Train, dev and test splits in surface form.
pub fn synthesize_splits(cfg: &ExperimentConfig) -> Result<[Vec<Triplet>; 3]> {
    let d = &cfg.data;
    Ok([
        generate_synthetic_corpus(d, d.train_size, cfg.data_seed("train"))?,
        generate_synthetic_corpus(d, d.dev_size, cfg.data_seed("dev"))?,
        generate_synthetic_corpus(d, d.test_size, cfg.data_seed("test"))?,
    ])
}

/// Manifests, feature files and the vocabulary under the corpus directory.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let splits = synthesize_splits(cfg)?;
    let dir = &cfg.paths.corpus_dir;
    create_dir(dir)?;
    let mut written = Vec::new();
    for (name, corpus) in SPLITS.iter().zip(&splits) {
        written.push(write_corpus(dir, name, corpus)?);
    }
    build_vocab(&splits[0])?.save(&dir.join(VOCAB_FILE))?;
    echo_config(cfg)?;
    Ok(written)
}

/// Encoded splits plus the vocabulary they were encoded with.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    /// Encode in-memory splits with a vocabulary built from the training split.
    pub fn from_splits(splits: &[Vec<Triplet>; 3]) -> Result<Self> {
        let vocab = build_vocab(&splits[0])?;
        Ok(Corpus {
            train: encode_corpus(&splits[0], &vocab),
            dev: encode_corpus(&splits[1], &vocab),
            test: encode_corpus(&splits[2], &vocab),
            vocab,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[Example]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn manifest_path(cfg: &ExperimentConfig, split: &str) -> PathBuf {
    cfg.paths.corpus_dir.join(format!("{split}.tsv"))
}

pub fn load_examples(manifest: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    Ok(encode_corpus(&load_manifest(manifest)?, vocab))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let vocab = Vocabulary::load(&cfg.paths.corpus_dir.join(VOCAB_FILE))?;
    Ok(Corpus {
        train: load_examples(&manifest_path(cfg, "train"), &vocab)?,
        dev: load_examples(&manifest_path(cfg, "dev"), &vocab)?,
        test: load_examples(&manifest_path(cfg, "test"), &vocab)?,
        vocab,
    })
}

/// Model geometry with the vocabulary size and feature width taken from the corpus.
pub fn model_config_for(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<crate::model::ModelConfig> {
    let d_feat = corpus
        .train
        .first()
        .map(|ex| ex.s.dim())
        .ok_or_else(|| Error::invalid("training split is empty"))?;
    let mut m = cfg.model.clone();
    m.vocab_size = corpus.vocab.len();
    m.d_feat = d_feat;
    m.validate()?;
    Ok(m)
}

/// Initialize from the run seed and train on the corpus.
pub fn train_model(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    paths: Option<&TrainPaths>,
) -> Result<TrainOutcome> {
    let model = TranslationModel::init(model_config_for(cfg, corpus)?, cfg.init_seed())?;
    train(model, &corpus.train, &corpus.dev, &cfg.train, paths)
}

/// `train` command: checkpoints, vocabulary copy, metrics log and config echo.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let corpus = load_corpus(cfg)?;
    let mut effective = cfg.clone();
    effective.model = model_config_for(cfg, &corpus)?;
    echo_config(&effective)?;
    create_dir(&cfg.paths.checkpoint_dir)?;
    corpus.vocab.save(&cfg.paths.checkpoint_dir.join(VOCAB_FILE))?;
    let paths = TrainPaths {
        checkpoint_dir: Some(cfg.paths.checkpoint_dir.clone()),
        metrics: Some(cfg.paths.output_dir.join(METRICS_FILE)),
    };
    train_model(&effective, &corpus, Some(&paths))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Speech,
    Text,
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Source::Speech),
            "text" => Ok(Source::Text),
            other => Err(Error::invalid(format!("unknown source `{other}` (speech or text)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    Greedy,
    Beam,
}

impl std::str::FromStr for Search {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Search::Greedy),
            "beam" => Ok(Search::Beam),
            other => Err(Error::invalid(format!("unknown search `{other}` (greedy or beam)"))),
        }
    }
}

/// Output token ids (no BOS/EOS) for every example.
pub fn translate(
    model: &TranslationModel,
    examples: &[Example],
    source: Source,
    search: Search,
    beam: &BeamConfig,
) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .map(|ex| {
            let src = ex.x.encoder_input();
            let input = match source {
                Source::Speech => ModelInput::Speech(&ex.s),
                Source::Text => ModelInput::Text(&src),
            };
            let hyp = match search {
                Search::Greedy => greedy_decode(model, input, beam.max_len)?,
                Search::Beam => beam_decode(model, input, beam)?.hyps.swap_remove(0),
            };
            Ok(hyp.output().to_vec())
        })
        .collect()
}

/// One space-separated hypothesis per line.
pub fn write_hypotheses(path: &Path, vocab: &Vocabulary, hyps: &[Vec<usize>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for h in hyps {
        writeln!(w, "{}", vocab.decode(h).join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            l.map(|l| l.split_whitespace().map(str::to_string).collect())
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}

/// Reference translations of a manifest, tokenized.
pub fn read_references(manifest: &Path) -> Result<Vec<Vec<String>>> {
    Ok(load_manifest(manifest)?.into_iter().map(|t| t.y).collect())
}

/// A model checkpoint and the vocabulary stored next to it.
pub fn load_model(checkpoint: &Path) -> Result<(TranslationModel, Vocabulary)> {
    let model = load_checkpoint(checkpoint)?.model;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::invalid(format!(
            "{} has {} entries but the checkpoint expects {}",
            dir.join(VOCAB_FILE).display(),
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, vocab))
}

pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join(AVERAGED_CHECKPOINT)
}

/// `translate` command; returns the hypothesis file.
pub fn run_translate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest: &Path,
    source: Source,
    search: Search,
    output: &Path,
) -> Result<PathBuf> {
    let (model, vocab) = load_model(checkpoint)?;
    let examples = load_examples(manifest, &vocab)?;
    let hyps = translate(&model, &examples, source, search, &cfg.beam)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_hypotheses(output, &vocab, &hyps)?;
    Ok(output.to_path_buf())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub baseline_bleu: Option<f64>,
    /// Fraction of resamples on which the baseline scores at least as high.
    pub p_value: Option<f64>,
    pub resamples: usize,
}

/// `[0, 10, 20, …]` up to the first edge above the longest reference.
pub fn length_edges<T>(refs: &[Vec<T>]) -> Vec<usize> {
    let longest = refs.iter().map(Vec::len).max().unwrap_or(0);
    (0..=longest / 10 + 1).map(|i| i * 10).collect()
}

pub fn evaluate<T: std::hash::Hash + Eq>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    baseline: Option<&[Vec<T>]>,
    resamples: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<LengthBucket>)> {
    let report = corpus_bleu(hyps, refs, Smoothing::Exp)?;
    let (baseline_bleu, p_value) = match baseline {
        None => (None, None),
        Some(b) => (
            Some(corpus_bleu(b, refs, Smoothing::Exp)?.bleu),
            Some(paired_bootstrap(hyps, b, refs, resamples, seed)?),
        ),
    };
    let buckets = bleu_by_length(hyps, refs, &length_edges(refs), Smoothing::Exp)?;
    Ok((
        EvalReport {
            sentences: hyps.len(),
            bleu: report.bleu,
            precisions: report.precisions.to_vec(),
            brevity_penalty: report.brevity_penalty,
            hyp_len: report.hyp_len,
            ref_len: report.ref_len,
            baseline_bleu,
            p_value,
            resamples: if baseline.is_some() { resamples } else { 0 },
        },
        buckets,
    ))
}

/// `evaluate` command: writes `eval.json` and `bleu_by_length.csv`.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    hyps: &Path,
    manifest: &Path,
    baseline: Option<&Path>,
    resamples: usize,
) -> Result<EvalReport> {
    let h = read_hypotheses(hyps)?;
    let refs = read_references(manifest)?;
    let b = baseline.map(read_hypotheses).transpose()?;
    let (report, buckets) = evaluate(&h, &refs, b.as_deref(), resamples, cfg.bootstrap_seed())?;
    let dir = &cfg.paths.output_dir;
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_text(&dir.join("eval.json"), &(json + "\n"))?;
    write_length_buckets(&dir.join("bleu_by_length.csv"), &buckets)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapSummary {
    pub examples: usize,
    /// Trends are measured over steps `1..=max_step`.
    pub max_step: usize,
    pub mean_teacher_forced_gap: f64,
    /// Spearman correlation of step and mean gap, per strategy.
    pub trend: BTreeMap<String, f64>,
    /// Last step within the window that both greedy and beam reach.
    pub final_common_step: Option<usize>,
    pub greedy_at_final: Option<f64>,
    pub beam_at_final: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GapAnalysis {
    pub records: Vec<GapRecord>,
    pub curves: Vec<(Strategy, Vec<CurvePoint>)>,
    /// Pooled teacher-forced gaps and their density.
    pub samples: Vec<f64>,
    pub density: Density,
    pub summary: GapSummary,
}

impl GapAnalysis {
    pub fn curve(&self, s: Strategy) -> &[CurvePoint] {
        self.curves
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, c)| c.as_slice())
            .unwrap_or(&[])
    }
}

fn at_step(curve: &[CurvePoint], step: usize) -> Option<f64> {
    curve.iter().find(|p| p.step == step).map(|p| p.mean_gap)
}

pub fn gap_analysis(
    model: &TranslationModel,
    examples: &[Example],
    beam: &BeamConfig,
    max_step: usize,
) -> Result<GapAnalysis> {
    let mut records = Vec::new();
    let mut curves = Vec::new();
    let mut trend = BTreeMap::new();
    for s in Strategy::ALL {
        let r = gap_records(model, examples, s, beam, usize::MAX)?;
        let c = gap_curve(&r);
        let rho = if c.iter().filter(|p| p.step <= max_step).count() >= 2 {
            curve_trend(&c, max_step)?
        } else {
            f64::NAN
        };
        trend.insert(s.as_str().to_string(), rho);
        records.extend(r);
        curves.push((s, c));
    }
    let samples: Vec<f64> = records
        .iter()
        .filter(|r| r.strategy == Strategy::TeacherForcing)
        .map(|r| r.gap)
        .collect();
    let density = kde(&samples, KDE_GRID_POINTS, KDE_RANGE, None)?;
    let mut analysis = GapAnalysis {
        records,
        curves,
        density,
        summary: GapSummary {
            examples: examples.len(),
            max_step,
            mean_teacher_forced_gap: samples.iter().sum::<f64>() / samples.len() as f64,
            trend,
            final_common_step: None,
            greedy_at_final: None,
            beam_at_final: None,
        },
        samples,
    };
    let (greedy, beam_c) = (analysis.curve(Strategy::Greedy), analysis.curve(Strategy::Beam));
    let last = |c: &[CurvePoint]| c.iter().map(|p| p.step).filter(|&s| s <= max_step).max();
    if let (Some(a), Some(b)) = (last(greedy), last(beam_c)) {
        let step = a.min(b);
        let (g, bm) = (at_step(greedy, step), at_step(beam_c, step));
        analysis.summary.final_common_step = Some(step);
        analysis.summary.greedy_at_final = g;
        analysis.summary.beam_at_final = bm;
    }
    Ok(analysis)
}

/// Records, curves, density, plots and a JSON summary.
pub fn write_gap_analysis(dir: &Path, a: &GapAnalysis) -> Result<()> {
    create_dir(dir)?;
    write_gap_records(&dir.join("gap_records.csv"), &a.records)?;
    for (s, c) in &a.curves {
        write_curve(&dir.join(format!("gap_curve_{s}.csv")), c)?;
    }
    write_density(&dir.join("gap_kde.csv"), &a.density)?;
    let series: Vec<Series> = a
        .curves
        .iter()
        .map(|(s, c)| Series {
            label: s.to_string(),
            points: c
                .iter()
                .filter(|p| p.step <= a.summary.max_step)
                .map(|p| (p.step as f64, p.mean_gap))
                .collect(),
        })
        .collect();
    write_svg(
        &dir.join("gap_curves.svg"),
        &line_plot_svg("Modality gap by decoding step", "decoding step", "mean gap", &series),
    )?;
    let kde_series = [Series {
        label: "teacher forcing".into(),
        points: a.density.grid.iter().copied().zip(a.density.density.iter().copied()).collect(),
    }];
    write_svg(
        &dir.join("gap_kde.svg"),
        &line_plot_svg("Modality gap distribution", "gap", "density", &kde_series),
    )?;
    let json = serde_json::to_string_pretty(&a.summary).expect("summary serialises");
    write_text(&dir.join("gap_summary.json"), &(json + "\n"))
}

/// `gap-analyze` command.
pub fn run_gap_analyze(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest: &Path,
    max_step: usize,
) -> Result<GapSummary> {
    let (model, vocab) = load_model(checkpoint)?;
    let examples = load_examples(manifest, &vocab)?;
    let a = gap_analysis(&model, &examples, &cfg.beam, max_step)?;
    write_gap_analysis(&cfg.paths.output_dir, &a)?;
    Ok(a.summary)
}

/// The eight on/off combinations, all-off first and all-on last.
pub const ABLATION_GRID: [AblationFlags; 8] = {
    let mut grid = [AblationFlags {
        scheduled_sampling: false,
        regularization: false,
        adaptive: false,
    }; 8];
    let mut i = 0;
    while i < 8 {
        grid[i] = AblationFlags {
            scheduled_sampling: i & 1 != 0,
            regularization: i & 2 != 0,
            adaptive: i & 4 != 0,
        };
        i += 1;
    }
    grid
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationFlags {
    pub scheduled_sampling: bool,
    pub regularization: bool,
    pub adaptive: bool,
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let f = |on: bool| if on { '1' } else { '0' };
        format!(
            "ss{}_reg{}_ada{}",
            f(self.scheduled_sampling),
            f(self.regularization),
            f(self.adaptive)
        )
    }

    /// `cfg` switched to the full objective with these components.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.train.mode = Mode::Cress;
        c.train.scheduled_sampling = self.scheduled_sampling;
        c.train.regularization = self.regularization;
        c.train.adaptive = self.adaptive;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub scheduled_sampling: bool,
    pub regularization: bool,
    pub adaptive: bool,
    pub epochs: usize,
    pub best_epoch: usize,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub mean_teacher_forced_gap: f64,
}

/// Mean teacher-forced gap over every position of every example.
pub fn mean_teacher_forced_gap(model: &TranslationModel, examples: &[Example]) -> Result<f64> {
    let r = gap_records(model, examples, Strategy::TeacherForcing, &BeamConfig::default(), usize::MAX)?;
    Ok(r.iter().map(|g| g.gap).sum::<f64>() / r.len() as f64)
}

/// Train one grid cell and score its averaged model.
pub fn ablation_cell(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    flags: AblationFlags,
    paths: Option<&TrainPaths>,
) -> Result<(AblationRow, TrainOutcome)> {
    let cell = flags.apply(cfg);
    let out = train_model(&cell, corpus, paths)?;
    let hyps = translate(&out.model, &corpus.test, Source::Speech, Search::Beam, &cfg.beam)?;
    let refs: Vec<Vec<usize>> = corpus.test.iter().map(|e| e.y.ids.clone()).collect();
    let row = AblationRow {
        scheduled_sampling: flags.scheduled_sampling,
        regularization: flags.regularization,
        adaptive: flags.adaptive,
        epochs: out.metrics.iter().filter(|m| m.phase == "main").count(),
        best_epoch: out.best_epoch,
        dev_bleu: crate::training::dev_bleu(&out.model, &corpus.dev)?,
        test_bleu: corpus_bleu(&hyps, &refs, Smoothing::Exp)?.bleu,
        mean_teacher_forced_gap: mean_teacher_forced_gap(&out.model, &corpus.test)?,
    };
    Ok((row, out))
}

/// `ablate` command: one row per grid cell in `ablation.csv`, with each
/// cell's metrics log under `ablation/<label>/`.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(cfg)?;
    echo_config(cfg)?;
    let mut rows = Vec::new();
    for flags in ABLATION_GRID {
        let dir = cfg.paths.output_dir.join("ablation").join(flags.label());
        create_dir(&dir)?;
        let paths = TrainPaths {
            checkpoint_dir: None,
            metrics: Some(dir.join(METRICS_FILE)),
        };
        rows.push(ablation_cell(cfg, &corpus, flags, Some(&paths))?.0);
    }
    write_rows(&cfg.paths.output_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_complete_and_ordered() {
        let labels: std::collections::BTreeSet<String> = ABLATION_GRID.iter().map(|f| f.label()).collect();
        assert_eq!(labels.len(), 8);
        assert_eq!(ABLATION_GRID[0].label(), "ss0_reg0_ada0");
        assert_eq!(ABLATION_GRID[7].label(), "ss1_reg1_ada1");
    }

    #[test]
    fn edges_cover_longest_reference() {
        let refs = vec![vec![0; 5], vec![0; 30]];
        assert_eq!(length_edges(&refs), vec![0, 10, 20, 30, 40]);
    }

    #[test]
    fn hypotheses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["a", "b"].map(String::from)).unwrap();
        let p = dir.path().join("h.txt");
        write_hypotheses(&p, &vocab, &[vec![4, 5], vec![], vec![5]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a b\n\nb\n");
        assert_eq!(
            read_hypotheses(&p).unwrap(),
            vec![vec!["a".to_string(), "b".into()], vec![], vec!["b".into()]]
        );
    }
}
