//! Label-conditioned robust trend of difficulty on age, and the frozen
//! trend-affinity weights derived from its residuals.
//!
//! The line `g ~ alpha_y + beta_y * z` is fitted per label by Huber IRLS.
//! Residuals are then scaled by their raw median absolute deviation `delta_y`:
//! samples within the band keep weight 1, samples outside get
//! `delta_y / |r|`. The weights are computed once and never updated.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::difficulty::DifficultyRecord;
use crate::error::{Error, Result};
use crate::stats::median;

/// Normal-consistency factor turning a MAD into a standard deviation.
pub const MAD_TO_SD: f64 = 1.4826;
/// Huber transition in units of the robust residual scale.
pub const HUBER_K: f64 = 1.345;
pub const MAX_IRLS_ITERATIONS: usize = 100;
pub const IRLS_TOLERANCE: f64 = 1e-8;
/// Floor applied to scales that collapse to zero.
pub const SCALE_FLOOR: f64 = 1e-9;
pub const MIN_FIT_RECORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; the last iterate is returned.
    pub converged: bool,
}

/// Weighted least-squares line; `None` when the weighted design is singular.
pub fn weighted_line(z: &[f64], g: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let z0 = z.first().copied().unwrap_or(0.0);
    let mz = w.iter().zip(z).map(|(w, z)| w * (z - z0)).sum::<f64>() / sw;
    let mg = w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..z.len() {
        let dz = z[i] - z0 - mz;
        sxx += w[i] * dz * dz;
        sxy += w[i] * dz * (g[i] - mg);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let beta = sxy / sxx;
    Some((mg - beta * (mz + z0), beta))
}

/// Huber IRLS weights `min(1, c / |r|)` with `c = 1.345 * 1.4826 * MAD(r)`.
pub fn huber_weights(residuals: &[f64]) -> Vec<f64> {
    let scale = (MAD_TO_SD * mad_scale(residuals).delta).max(SCALE_FLOOR);
    let c = HUBER_K * scale;
    residuals
        .iter()
        .map(|r| if r.abs() <= c { 1.0 } else { c / r.abs() })
        .collect()
}

/// Robust line fit of `g` on `z` by iteratively reweighted least squares on
/// the Huber loss, re-estimating the residual scale every iteration.
pub fn huber_fit(z: &[f64], g: &[f64]) -> Result<LineFit> {
    if z.len() != g.len() {
        return Err(Error::ShapeMismatch {
            expected: z.len(),
            got: g.len(),
        });
    }
    if z.len() < MIN_FIT_RECORDS {
        return Err(Error::TooFewRecords {
            needed: MIN_FIT_RECORDS,
            got: z.len(),
        });
    }
    // Canonical order makes the floating-point sums independent of input order.
    let mut pairs: Vec<(f64, f64)> = z.iter().copied().zip(g.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (z, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();

    let ones = vec![1.0; z.len()];
    let (mut alpha, mut beta) = weighted_line(&z, &g, &ones).ok_or(Error::DegenerateDesign)?;
    for it in 1..=MAX_IRLS_ITERATIONS {
        let r: Vec<f64> = z.iter().zip(&g).map(|(z, g)| g - alpha - beta * z).collect();
        let w = huber_weights(&r);
        let (a, b) = weighted_line(&z, &g, &w).ok_or(Error::DegenerateDesign)?;
        let change = (a - alpha).abs().max((b - beta).abs());
        alpha = a;
        beta = b;
        if change < IRLS_TOLERANCE {
            return Ok(LineFit {
                alpha,
                beta,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(LineFit {
        alpha,
        beta,
        iterations: MAX_IRLS_ITERATIONS,
        converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadScale {
    pub delta: f64,
    /// Set when the raw MAD fell below the floor and was replaced by it.
    pub floored: bool,
}

/// Raw median absolute deviation about the median, floored at 1e-9.
pub fn mad_scale(residuals: &[f64]) -> MadScale {
    if residuals.is_empty() {
        return MadScale {
            delta: SCALE_FLOOR,
            floored: true,
        };
    }
    let m = median(residuals);
    let dev: Vec<f64> = residuals.iter().map(|r| (r - m).abs()).collect();
    let mad = median(&dev);
    if mad < SCALE_FLOOR {
        MadScale {
            delta: SCALE_FLOOR,
            floored: true,
        }
    } else {
        MadScale {
            delta: mad,
            floored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFit {
    pub label: Label,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub delta_floored: bool,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
}

/// Per-label trend parameters, indexed by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub labels: [LabelFit; 2],
}

impl TrendFit {
    pub fn predict(&self, z: f64, y: Label) -> f64 {
        let l = &self.labels[usize::from(y)];
        l.alpha + l.beta * z
    }
}

/// `r_i = g_i - (alpha_y + beta_y z_i)` using the fit of each record's label.
pub fn residuals(records: &[DifficultyRecord], fit: &TrendFit) -> Vec<f64> {
    records.iter().map(|r| r.g - fit.predict(r.z, r.y)).collect()
}

pub fn affinity_weight(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Frozen per-sample trend affinity, aligned with the records it was built
/// from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityWeights {
    pub ids: Vec<u64>,
    pub weights: Vec<f64>,
    pub frozen: bool,
}

impl AffinityWeights {
    /// All-ones weights, equivalent to disabling trend affinity.
    pub fn uniform(ids: Vec<u64>) -> Self {
        let weights = vec![1.0; ids.len()];
        Self {
            ids,
            weights,
            frozen: true,
        }
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|k| self.weights[k])
    }

    /// Counts over `n_bins` equal-width bins on `(0, 1]`.
    pub fn histogram(&self, n_bins: usize) -> Vec<usize> {
        let mut h = vec![0; n_bins];
        for &w in &self.weights {
            let b = ((w * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
            h[b] += 1;
        }
        h
    }
}

/// Builds frozen weights from residuals and per-label scales.
pub fn affinity_weights(records: &[DifficultyRecord], residuals: &[f64], delta: [f64; 2]) -> AffinityWeights {
    AffinityWeights {
        ids: records.iter().map(|r| r.sample_id).collect(),
        weights: records
            .iter()
            .zip(residuals)
            .map(|(rec, &r)| affinity_weight(r, delta[usize::from(rec.y)]))
            .collect(),
        frozen: true,
    }
}

/// Full post-warm-up pipeline: per-label Huber fits, residuals, MAD scales
/// and affinity weights.
pub fn fit_trends(records: &[DifficultyRecord]) -> Result<(TrendFit, AffinityWeights)> {
    let mut partial = Vec::with_capacity(2);
    for label in [0u8, 1] {
        let (z, g): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.y == label)
            .map(|r| (r.z, r.g))
            .unzip();
        if z.is_empty() {
            return Err(Error::EmptyLabelSubset(label));
        }
        partial.push((label, z.len(), huber_fit(&z, &g)?));
    }
    let provisional = |label: usize| {
        let (label, n, f) = partial[label];
        LabelFit {
            label,
            alpha: f.alpha,
            beta: f.beta,
            delta: SCALE_FLOOR,
            delta_floored: true,
            converged: f.converged,
            iterations: f.iterations,
            n,
        }
    };
    let mut fit = TrendFit {
        labels: [provisional(0), provisional(1)],
    };
    let res = residuals(records, &fit);
    for label in [0u8, 1] {
        let r: Vec<f64> = records
            .iter()
            .zip(&res)
            .filter(|(rec, _)| rec.y == label)
            .map(|(_, &r)| r)
            .collect();
        let scale = mad_scale(&r);
        let lf = &mut fit.labels[usize::from(label)];
        lf.delta = scale.delta;
        lf.delta_floored = scale.floored;
    }
    let weights = affinity_weights(records, &res, [fit.labels[0].delta, fit.labels[1].delta]);
    Ok((fit, weights))
}
