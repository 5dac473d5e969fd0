//! Coverage-modulated slope penalty on the batch age-difficulty trend.
//!
//! Within a mini-batch and for each label `y`, the weighted least-squares
//! slope of `g = |p - y|` on normalized age is
//!
//! ```text
//! beta_y = sum w (z - mu_z)(g - mu_g) / sum w (z - mu_z)^2
//! ```
//!
//! with weighted means `mu_z`, `mu_g`. The objective adds
//! `lambda * sum_y C_y * beta_y^2` to the batch BCE, where `C_y` is the
//! population variance of the label's ages divided by 0.25.
//!
//! Ages, weights and coverage are constants under differentiation; only `g`
//! depends on the model. Because `sum w (z - mu_z) = 0`,
//! `d beta_y / d g_k = w_k (z_k - mu_z) / D_y`, which gives a closed-form
//! gradient with respect to each logit.

use serde::{Deserialize, Serialize};

use crate::data::{Label, Sample};
use crate::difficulty::sample_difficulty;
use crate::error::{Error, Result};
use crate::model::{bce_loss, clamp_prob, Classifier};
use crate::stats::sigmoid;

/// Maximum population variance of values confined to `[0, 1]`.
pub const MAX_AGE_VARIANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub denom_epsilon: f64,
    pub use_affinity: bool,
    pub use_coverage: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 1.2,
            denom_epsilon: 1e-8,
            use_affinity: true,
            use_coverage: true,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if !(self.denom_epsilon > 0.0) {
            return Err(Error::InvalidConfig("denom_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub beta: f64,
    pub mu_z: f64,
    pub mu_g: f64,
    pub denom: f64,
    /// Set when `denom <= eps`; `beta` is then reported as 0.
    pub degenerate: bool,
}

/// Weighted slope of `g` on `z` for one label subset.
pub fn wols_slope(z: &[f64], g: &[f64], w: &[f64], eps: f64) -> Result<SlopeEstimate> {
    if z.len() < 2 {
        return Err(Error::EmptySubset(z.len()));
    }
    if g.len() != z.len() || w.len() != z.len() {
        return Err(Error::ShapeMismatch {
            expected: z.len(),
            got: g.len().min(w.len()),
        });
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::InvalidConfig("weights must have a positive sum".into()));
    }
    let mu_z = w.iter().zip(z).map(|(w, z)| w * z).sum::<f64>() / sw;
    let mu_g = w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>() / sw;
    let mut num = 0.0;
    let mut denom = 0.0;
    for i in 0..z.len() {
        let dz = z[i] - mu_z;
        num += w[i] * dz * (g[i] - mu_g);
        denom += w[i] * dz * dz;
    }
    let degenerate = denom <= eps;
    Ok(SlopeEstimate {
        beta: if degenerate { 0.0 } else { num / denom },
        mu_z,
        mu_g,
        denom,
        degenerate,
    })
}

/// Age Coverage Score: population variance of `z` over 0.25, clipped to
/// `[0, 1]`.
pub fn coverage_score(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    // Shifting by the first value keeps constant input at exactly zero.
    let n = z.len() as f64;
    let d: Vec<f64> = z.iter().map(|v| v - z[0]).collect();
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (var / MAX_AGE_VARIANCE).clamp(0.0, 1.0)
}

pub fn slope_penalty(beta: f64) -> f64 {
    beta * beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: Label,
    pub n: usize,
    pub mu_z: f64,
    pub mu_g: f64,
    pub denom: f64,
    pub beta: f64,
    pub coverage: f64,
    /// False when the label contributes nothing (fewer than 2 samples or a
    /// degenerate denominator).
    pub active: bool,
}

/// Per-label slope statistics for one batch, indexed by label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSlopeStats {
    pub labels: [LabelStats; 2],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub slope: [f64; 2],
    pub coverage: [f64; 2],
    pub penalty: f64,
    pub total: f64,
}

/// Batch arrays the penalty consumes. `w` holds the frozen affinity weights
/// of the batch samples; it is ignored when affinity is disabled.
#[derive(Debug, Clone, Copy)]
pub struct BatchArrays<'a> {
    pub z: &'a [f64],
    pub y: &'a [Label],
    pub w: &'a [f64],
}

fn effective_weight(arrays: &BatchArrays<'_>, i: usize, cfg: &PenaltyConfig) -> f64 {
    if cfg.use_affinity {
        arrays.w[i]
    } else {
        1.0
    }
}

/// Slope statistics given predicted probabilities `p`.
pub fn batch_slope_stats(arrays: &BatchArrays<'_>, p: &[f64], cfg: &PenaltyConfig) -> BatchSlopeStats {
    let stats = |label: Label| {
        let idx: Vec<usize> = (0..arrays.y.len()).filter(|&i| arrays.y[i] == label).collect();
        let z: Vec<f64> = idx.iter().map(|&i| arrays.z[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| sample_difficulty(p[i], label)).collect();
        let w: Vec<f64> = idx.iter().map(|&i| effective_weight(arrays, i, cfg)).collect();
        let coverage = if cfg.use_coverage { coverage_score(&z) } else { 1.0 };
        match wols_slope(&z, &g, &w, cfg.denom_epsilon) {
            Ok(est) => LabelStats {
                label,
                n: idx.len(),
                mu_z: est.mu_z,
                mu_g: est.mu_g,
                denom: est.denom,
                beta: est.beta,
                coverage,
                active: !est.degenerate,
            },
            Err(_) => LabelStats {
                label,
                n: idx.len(),
                mu_z: 0.0,
                mu_g: 0.0,
                denom: 0.0,
                beta: 0.0,
                coverage,
                active: false,
            },
        }
    };
    BatchSlopeStats {
        labels: [stats(0), stats(1)],
    }
}

/// BCE plus the coverage-weighted slope penalty, from probabilities.
pub fn loss_from_probs(arrays: &BatchArrays<'_>, p: &[f64], cfg: &PenaltyConfig) -> LossBreakdown {
    let n = p.len() as f64;
    let bce = p.iter().zip(arrays.y).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / n;
    let mut out = LossBreakdown {
        bce,
        total: bce,
        ..Default::default()
    };
    if cfg.lambda == 0.0 {
        return out;
    }
    let stats = batch_slope_stats(arrays, p, cfg);
    let mut penalty = 0.0;
    for s in &stats.labels {
        let k = usize::from(s.label);
        out.coverage[k] = s.coverage;
        if s.active {
            out.slope[k] = slope_penalty(s.beta);
            penalty += s.coverage * out.slope[k];
        }
    }
    out.penalty = cfg.lambda * penalty;
    out.total = bce + out.penalty;
    out
}

/// Gradient of `lambda * sum_y C_y beta_y^2` with respect to each logit.
pub fn penalty_grad_from_probs(arrays: &BatchArrays<'_>, p: &[f64], cfg: &PenaltyConfig) -> Vec<f64> {
    let mut grad = vec![0.0; p.len()];
    if cfg.lambda == 0.0 {
        return grad;
    }
    let stats = batch_slope_stats(arrays, p, cfg);
    for s in stats.labels.iter().filter(|s| s.active) {
        let scale = 2.0 * cfg.lambda * s.coverage * s.beta / s.denom;
        // dg/dp is +1 for y = 0 and -1 for y = 1.
        let sign = if s.label == 0 { 1.0 } else { -1.0 };
        for i in (0..p.len()).filter(|&i| arrays.y[i] == s.label) {
            let w = effective_weight(arrays, i, cfg);
            grad[i] = scale * w * (arrays.z[i] - s.mu_z) * sign * p[i] * (1.0 - p[i]);
        }
    }
    grad
}

pub fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| clamp_prob(sigmoid(l))).collect()
}

/// A mini-batch of samples with their frozen affinity weights.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
    pub weights: Vec<f64>,
}

impl Batch<'_> {
    fn columns(&self) -> (Vec<f64>, Vec<Label>) {
        (
            self.samples.iter().map(|s| s.z).collect(),
            self.samples.iter().map(|s| s.y).collect(),
        )
    }

    fn probs(&self, model: &Classifier) -> Result<Vec<f64>> {
        self.samples.iter().map(|s| model.forward(&s.features)).collect()
    }
}

/// Total objective for `model` on `batch`.
pub fn total_loss(batch: &Batch<'_>, model: &Classifier, cfg: &PenaltyConfig) -> Result<LossBreakdown> {
    let (z, y) = batch.columns();
    let p = batch.probs(model)?;
    let arrays = BatchArrays {
        z: &z,
        y: &y,
        w: &batch.weights,
    };
    Ok(loss_from_probs(&arrays, &p, cfg))
}

/// Penalty gradient with respect to the logit of each batch sample.
pub fn penalty_grad_logits(batch: &Batch<'_>, model: &Classifier, cfg: &PenaltyConfig) -> Result<Vec<f64>> {
    let (z, y) = batch.columns();
    let p = batch.probs(model)?;
    let arrays = BatchArrays {
        z: &z,
        y: &y,
        w: &batch.weights,
    };
    Ok(penalty_grad_from_probs(&arrays, &p, cfg))
}
