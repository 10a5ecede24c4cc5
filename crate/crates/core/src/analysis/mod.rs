//! Evaluation and diagnostics: corpus BLEU with paired bootstrap, BLEU by
//! length, modality-gap records, curves and densities, and their CSV/SVG
//! renderings.

mod bleu;
mod gap;
mod kde;
pub mod report;

pub use bleu::{
    bleu_by_length, corpus_bleu, paired_bootstrap, sentence_stats, BleuReport, LengthBucket,
    NgramStats, Smoothing, MAX_ORDER,
};
pub use gap::{
    curve_trend, example_gaps, gap_curve, gap_records, modality_gap, spearman, CurvePoint,
    GapRecord, Strategy,
};
pub use kde::{kde, silverman_bandwidth, Density, KDE_GRID_POINTS, KDE_RANGE};

use crate::data::Example;
use crate::decoding::BeamConfig;
use crate::error::Result;
use crate::model::TranslationModel;

/// Pooled teacher-forced gaps over every position of every example, and
/// their density on the standard grid.
pub fn gap_distribution(model: &TranslationModel, corpus: &[Example]) -> Result<(Vec<f64>, Density)> {
    let records = gap_records(
        model,
        corpus,
        Strategy::TeacherForcing,
        &BeamConfig::default(),
        usize::MAX,
    )?;
    let samples: Vec<f64> = records.iter().map(|r| r.gap).collect();
    let density = kde(&samples, KDE_GRID_POINTS, KDE_RANGE, None)?;
    Ok((samples, density))
}
