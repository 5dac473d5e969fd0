//! Differentiable binary classifiers with hand-written backprop, plus Adam.

use std::borrow::Cow;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::stats::sigmoid;

/// Probabilities are kept in `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Classifier parameters stored flat so the optimizer can treat them as one
/// vector.
///
/// Layout: linear is `[w (d), b]`; the MLP is
/// `[W1 (h x d, row-major), b1 (h), w2 (h), b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub params: Vec<f64>,
    /// Fixed per-feature standardization applied before the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<InputScaler>,
}

/// `x -> (x - mean) / scale`, frozen at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    /// Column means and population standard deviations of `rows`; columns
    /// with (near) zero spread get scale 1.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            n += 1;
            for j in 0..dim {
                let d = row[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
        if n == 0 {
            return Err(Error::EmptySubset(0));
        }
        let scale = m2
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn param_count(arch: Architecture, d: usize) -> usize {
    match arch {
        Architecture::Linear => d + 1,
        Architecture::Mlp { hidden } => hidden * d + 2 * hidden + 1,
    }
}

impl Classifier {
    pub fn zeros(architecture: Architecture, input_dim: usize) -> Self {
        Self {
            architecture,
            input_dim,
            params: vec![0.0; param_count(architecture, input_dim)],
            scaler: None,
        }
    }

    pub fn with_scaler(mut self, scaler: InputScaler) -> Result<Self> {
        if scaler.mean.len() != self.input_dim || scaler.scale.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim,
                got: scaler.mean.len(),
            });
        }
        self.scaler = Some(scaler);
        Ok(self)
    }

    /// Seeded initialization. Linear heads start at small Gaussian noise;
    /// MLP hidden weights use a Xavier-style scale.
    pub fn init(architecture: Architecture, input_dim: usize, seed: u64) -> Self {
        let mut model = Self::zeros(architecture, input_dim);
        let mut rng = rng_stream(seed, "init");
        match architecture {
            Architecture::Linear => {
                let n = Normal::new(0.0, 0.01).unwrap();
                for w in &mut model.params[..input_dim] {
                    *w = n.sample(&mut rng);
                }
            }
            Architecture::Mlp { hidden } => {
                let n1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).unwrap();
                for w in &mut model.params[..hidden * input_dim] {
                    *w = n1.sample(&mut rng);
                }
                let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
                let off = hidden * input_dim + hidden;
                for w in &mut model.params[off..off + hidden] {
                    *w = n2.sample(&mut rng);
                }
            }
        }
        model
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn prepared<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        match &self.scaler {
            Some(s) => Cow::Owned(s.apply(x)),
            None => Cow::Borrowed(x),
        }
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let x = &*self.prepared(x);
        let d = self.input_dim;
        Ok(match self.architecture {
            Architecture::Linear => dot(&self.params[..d], x) + self.params[d],
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                (0..hidden)
                    .map(|j| w2[j] * (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .sum::<f64>()
                    + b2[0]
            }
        })
    }

    /// Clamped predicted probability.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(clamp_prob(sigmoid(self.logit(x)?)))
    }

    /// Adds `upstream * d(logit)/d(params)` into `grad`.
    pub fn accumulate_logit_grad(&self, x: &[f64], upstream: f64, grad: &mut [f64]) -> Result<()> {
        self.check(x)?;
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let x = &*self.prepared(x);
        let d = self.input_dim;
        match self.architecture {
            Architecture::Linear => {
                for (g, xi) in grad[..d].iter_mut().zip(x) {
                    *g += upstream * xi;
                }
                grad[d] += upstream;
            }
            Architecture::Mlp { hidden } => {
                let w1 = &self.params[..hidden * d];
                let b1 = &self.params[hidden * d..hidden * d + hidden];
                let w2_off = hidden * d + hidden;
                let w2 = &self.params[w2_off..w2_off + hidden];
                for j in 0..hidden {
                    let a = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh();
                    grad[w2_off + j] += upstream * a;
                    let back = upstream * w2[j] * (1.0 - a * a);
                    for (g, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += back * xi;
                    }
                    grad[hidden * d + j] += back;
                }
                grad[w2_off + hidden] += upstream;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Classifier = serde_json::from_str(text)?;
        let expected = param_count(model.architecture, model.input_dim);
        if let Some(s) = &model.scaler {
            if s.mean.len() != model.input_dim || s.scale.len() != model.input_dim {
                return Err(Error::ShapeMismatch {
                    expected: model.input_dim,
                    got: s.mean.len(),
                });
            }
        }
        if model.params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: model.params.len(),
            });
        }
        Ok(model)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Binary cross-entropy of a single prediction.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn mean_bce(ps: &[f64], ys: &[u8]) -> f64 {
    ps.iter().zip(ys).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / ps.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != params.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                got: len,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
