//! Gaussian KDE over recorded perturbation strengths, and the modal summary
//! used to compare models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::population_std;

pub const DEFAULT_GRID_POINTS: usize = 512;
/// Grid spans `[0, max(samples) * GRID_HEADROOM]`.
pub const GRID_HEADROOM: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDistribution {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub phi_mo: f64,
    pub mode: f64,
    pub censored_count: usize,
}

/// Location and height of a distribution's peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalSummary {
    pub phi_mo: f64,
    pub mode: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionShift {
    /// `a.phi_mo - b.phi_mo`; positive when `b` peaks further left.
    pub delta_phi_mo: f64,
    /// `b.mode / a.mode`; above 1 when `b` peaks higher.
    pub mode_ratio: f64,
    /// `b` peaks both further left and higher than `a`.
    pub left_shifted: bool,
}

impl ReliabilityDistribution {
    pub fn modal(&self) -> ModalSummary {
        ModalSummary {
            phi_mo: self.phi_mo,
            mode: self.mode,
        }
    }

    /// Grid and density as a two-column CSV with header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi,density\n");
        for (x, y) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }

    pub fn trapezoid_integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

/// Scott's rule: `sigma * m^(-1/5)` with the population standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    population_std(samples) * (samples.len() as f64).powf(-0.2)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Unnormalized Gaussian KDE at `x`. Summation runs in sample order.
fn kde_at(x: f64, samples: &[f64], h: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut acc = 0.0;
    for s in samples {
        let z = (x - s) / h;
        acc += (-0.5 * z * z).exp();
    }
    acc * norm
}

pub fn estimate_distribution(samples: &[f64], grid_points: usize) -> Result<ReliabilityDistribution> {
    if grid_points < 2 {
        return Err(Error::Invalid("grid_points must be >= 2".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite sample".into()));
    }
    let mut distinct = samples.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 distinct samples, got {} ({} total)",
            distinct.len(),
            samples.len()
        )));
    }
    let max = distinct[distinct.len() - 1];
    let span = max * GRID_HEADROOM;
    if span <= 0.0 {
        return Err(Error::Invalid("samples must include a positive value".into()));
    }
    let h = scott_bandwidth(samples);
    let step = span / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| i as f64 * step).collect();
    let raw: Vec<f64> = grid.par_iter().map(|&x| kde_at(x, samples, h)).collect();
    let area = trapezoid(&grid, &raw);
    let density: Vec<f64> = raw.iter().map(|v| v / area).collect();

    let best = first_argmax(&density);
    let mode = density[best];
    Ok(ReliabilityDistribution {
        samples: samples.to_vec(),
        bandwidth: h,
        phi_mo: grid[best],
        mode,
        grid,
        density,
        censored_count: 0,
    })
}

/// Index of the maximum; the smallest index wins ties.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn compare_modal(a: &ModalSummary, b: &ModalSummary) -> DistributionShift {
    DistributionShift {
        delta_phi_mo: a.phi_mo - b.phi_mo,
        mode_ratio: b.mode / a.mode,
        left_shifted: b.phi_mo < a.phi_mo && b.mode > a.mode,
    }
}

pub fn compare_distributions(a: &ReliabilityDistribution, b: &ReliabilityDistribution) -> DistributionShift {
    compare_modal(&a.modal(), &b.modal())
}
