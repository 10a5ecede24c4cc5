use serde::Serialize;

use crate::error::{Error, Result};

pub const KDE_GRID_POINTS: usize = 256;
pub const KDE_RANGE: (f64, f64) = (0.0, 2.0);

/// Silverman's rule of thumb `0.9·min(σ, IQR/1.34)·n^(−1/5)`, falling back to
/// whichever spread is non-zero and finally to a small constant for
/// degenerate samples.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return 1e-3,
    };
    0.9 * spread * n.powf(-0.2)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Density {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl Density {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }
}

/// Gaussian kernel density on `points` evenly spaced values over `[lo, hi]`.
pub fn kde(samples: &[f64], points: usize, range: (f64, f64), bandwidth: Option<f64>) -> Result<Density> {
    if samples.is_empty() {
        return Err(Error::invalid("density estimate needs at least one sample"));
    }
    if points < 2 || !(range.0 < range.1) {
        return Err(Error::invalid("density grid needs ≥ 2 points over a non-empty range"));
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let step = (range.1 - range.0) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| range.0 + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&g| {
            norm * samples
                .iter()
                .map(|&s| (-0.5 * ((g - s) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(Density {
        grid,
        density,
        bandwidth: h,
    })
}
