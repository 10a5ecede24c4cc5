use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::decoding::{beam_decode, greedy_decode, teacher_forced_trace, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{ModelInput, TranslationModel};
use crate::tensor::cosine_similarity;

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn modality_gap(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TeacherForcing,
    Greedy,
    Beam,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::TeacherForcing, Strategy::Greedy, Strategy::Beam];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TeacherForcing => "teacher_forcing",
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown decoding strategy `{s}`")))
    }
}

/// Gap between the speech and text branches at one decoding step (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapRecord {
    pub example: usize,
    pub step: usize,
    pub strategy: Strategy,
    pub gap: f64,
}

fn paired<'a>(
    example: usize,
    strategy: Strategy,
    a: impl Iterator<Item = &'a [f64]>,
    b: impl Iterator<Item = &'a [f64]>,
    max_step: usize,
) -> Result<Vec<GapRecord>> {
    a.zip(b)
        .take(max_step)
        .enumerate()
        .map(|(i, (ra, rb))| {
            Ok(GapRecord {
                example,
                step: i + 1,
                strategy,
                gap: modality_gap(ra, rb)?,
            })
        })
        .collect()
}

/// Per-step gaps for one example. Teacher forcing feeds both branches the
/// gold prefix; greedy and beam let each branch decode on its own and compare
/// steps up to the shorter output (beam compares the unweighted mean of the
/// live candidates).
pub fn example_gaps(
    model: &TranslationModel,
    ex: &Example,
    example: usize,
    strategy: Strategy,
    beam: &BeamConfig,
    max_step: usize,
) -> Result<Vec<GapRecord>> {
    let src = ex.x.encoder_input();
    let speech = ModelInput::Speech(&ex.s);
    let text = ModelInput::Text(&src);
    match strategy {
        Strategy::TeacherForcing => {
            let ts = teacher_forced_trace(model, speech, &ex.y)?;
            let tx = teacher_forced_trace(model, text, &ex.y)?;
            let rows = |t: &crate::model::DecoderTrace| {
                (0..t.len()).map(|i| t.reps.row(i).to_vec()).collect::<Vec<_>>()
            };
            let (a, b) = (rows(&ts), rows(&tx));
            paired(example, strategy, a.iter().map(Vec::as_slice), b.iter().map(Vec::as_slice), max_step)
        }
        Strategy::Greedy => {
            let hs = greedy_decode(model, speech, None)?;
            let hx = greedy_decode(model, text, None)?;
            paired(
                example,
                strategy,
                hs.reps.iter().map(Vec::as_slice),
                hx.reps.iter().map(Vec::as_slice),
                max_step,
            )
        }
        Strategy::Beam => {
            let bs = beam_decode(model, speech, beam)?;
            let bx = beam_decode(model, text, beam)?;
            paired(
                example,
                strategy,
                bs.step_mean_reps.iter().map(Vec::as_slice),
                bx.step_mean_reps.iter().map(Vec::as_slice),
                max_step,
            )
        }
    }
}

pub fn gap_records(
    model: &TranslationModel,
    corpus: &[Example],
    strategy: Strategy,
    beam: &BeamConfig,
    max_step: usize,
) -> Result<Vec<GapRecord>> {
    let mut out = Vec::new();
    for (i, ex) in corpus.iter().enumerate() {
        out.extend(example_gaps(model, ex, i, strategy, beam, max_step)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_gap: f64,
    /// Number of examples reaching this step.
    pub n: usize,
}

/// Mean gap per step over the examples that reach it.
pub fn gap_curve(records: &[GapRecord]) -> Vec<CurvePoint> {
    let max = records.iter().map(|r| r.step).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); max];
    for r in records {
        sums[r.step - 1].0 += r.gap;
        sums[r.step - 1].1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(i, (s, n))| CurvePoint {
            step: i + 1,
            mean_gap: s / n as f64,
            n,
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of at least 2 points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman correlation between step and mean gap over steps `1..=max_step`.
pub fn curve_trend(curve: &[CurvePoint], max_step: usize) -> Result<f64> {
    let pts: Vec<&CurvePoint> = curve.iter().filter(|p| p.step <= max_step).collect();
    let steps: Vec<f64> = pts.iter().map(|p| p.step as f64).collect();
    let gaps: Vec<f64> = pts.iter().map(|p| p.mean_gap).collect();
    spearman(&steps, &gaps)
}
