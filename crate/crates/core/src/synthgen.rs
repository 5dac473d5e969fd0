//! Synthetic age-confounded population and exponential age-shift splits.
//!
//! Age drives both the label (prevalence rises with age through a logistic
//! link) and the features (a morphology direction scaled by age), so a model
//! can lower its training loss by reading age off the inputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_ages, Dataset, Sample, SplitBundle};
use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::stats::{quantile, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_pool: usize,
    pub feature_dim: usize,
    /// Logistic slope of prevalence in normalized age.
    pub prevalence_slope: f64,
    /// Normalized age at which prevalence is 0.5.
    pub prevalence_midpoint: f64,
    /// Class-mean separation along the disease direction.
    pub disease_signal: f64,
    /// How strongly normalized age leaks into the morphology direction.
    pub age_morphology_strength: f64,
    pub noise_sd: f64,
    pub age_min_years: f64,
    pub age_max_years: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_pool: 20_000,
            feature_dim: 16,
            prevalence_slope: 5.0,
            prevalence_midpoint: 0.5,
            disease_signal: 2.0,
            age_morphology_strength: 6.0,
            noise_sd: 1.0,
            age_min_years: 20.0,
            age_max_years: 90.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_pool < 100 {
            return bad("n_pool must be at least 100");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if !(self.noise_sd > 0.0) {
            return bad("noise_sd must be positive");
        }
        if !(self.age_max_years > self.age_min_years) || self.age_min_years < 0.0 {
            return bad("age range must satisfy 0 <= age_min_years < age_max_years");
        }
        let finite = [
            self.prevalence_slope,
            self.prevalence_midpoint,
            self.disease_signal,
            self.age_morphology_strength,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("generator coefficients must be finite");
        }
        Ok(())
    }

    /// Closed-form prevalence at normalized age `z`.
    pub fn prevalence_at(&self, z: f64) -> f64 {
        sigmoid(self.prevalence_slope * (z - self.prevalence_midpoint))
    }
}

/// Index of the disease direction in feature space.
pub const DISEASE_AXIS: usize = 0;
/// Index of the age-morphology direction in feature space.
pub const AGE_AXIS: usize = 1;

/// Draws a normalized population reproducible from `(cfg, seed)`.
pub fn generate_population(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut age_rng = rng_stream(seed, "population/age");
    let mut label_rng = rng_stream(seed, "population/label");
    let mut noise_rng = rng_stream(seed, "population/noise");
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let ages: Vec<f64> = (0..cfg.n_pool)
        .map(|_| age_rng.random_range(cfg.age_min_years..cfg.age_max_years))
        .collect();
    let raw = ages
        .iter()
        .enumerate()
        .map(|(i, &age)| Sample {
            id: i as u64,
            features: vec![0.0; cfg.feature_dim],
            age_years: age,
            z: 0.0,
            y: 0,
        })
        .collect();
    let mut pool = normalize_ages(&Dataset::new(raw, cfg.feature_dim)?)?;
    for s in &mut pool.samples {
        let u: f64 = label_rng.random();
        s.y = u8::from(u < cfg.prevalence_at(s.z));
        for f in s.features.iter_mut() {
            *f = noise.sample(&mut noise_rng);
        }
        s.features[DISEASE_AXIS] += f64::from(s.y) * cfg.disease_signal;
        s.features[AGE_AXIS] += cfg.age_morphology_strength * s.z;
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub gamma: f64,
    /// Training pivot in normalized age.
    pub b_tr: f64,
    /// Testing pivot in normalized age.
    pub b_te: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub val_fraction: f64,
}

impl ShiftConfig {
    /// Pivots at the 25th and 75th percentiles of the pool's normalized ages.
    pub fn from_pool(pool: &Dataset, gamma: f64, n_train: usize, n_test: usize) -> Self {
        let mut z = pool.zs();
        z.sort_by(f64::total_cmp);
        Self {
            gamma,
            b_tr: quantile(&z, 0.25),
            b_te: quantile(&z, 0.75),
            n_train,
            n_test,
            val_fraction: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".into()));
        }
        if !(0.0 <= self.b_tr && self.b_tr <= self.b_te && self.b_te <= 1.0) {
            return Err(Error::InvalidConfig("pivots must satisfy 0 <= b_tr <= b_te <= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Unnormalized log training weight; favors young samples as gamma grows.
    pub fn train_log_weight(&self, z: f64) -> f64 {
        -self.gamma * (z - self.b_tr)
    }

    /// Unnormalized log testing weight; favors old samples as gamma grows.
    pub fn test_log_weight(&self, z: f64) -> f64 {
        self.gamma * (z - self.b_te)
    }
}

/// Weighted sampling without replacement by exponential keys: each candidate
/// gets key `ln(u) / w` and the `k` largest keys win. Returned in candidate
/// order.
fn weighted_draw<R: Rng>(
    candidates: &[usize],
    log_weight: impl Fn(usize) -> f64,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            // 1 - u lies in (0, 1], keeping ln finite.
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() * (-log_weight(i)).exp(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Carves disjoint shifted train / test draws from a normalized pool and
/// reserves a validation holdout from the training draw.
pub fn shift_split(pool: &Dataset, shift: &ShiftConfig, seed: u64) -> Result<SplitBundle> {
    shift.validate()?;
    let requested = shift.n_train + shift.n_test;
    if requested > pool.len() {
        return Err(Error::InsufficientPool {
            requested,
            available: pool.len(),
        });
    }
    let mut rng = rng_stream(seed, "shift");
    let all: Vec<usize> = (0..pool.len()).collect();
    let train_idx = weighted_draw(
        &all,
        |i| shift.train_log_weight(pool.samples[i].z),
        shift.n_train,
        &mut rng,
    );
    let mut taken = vec![false; pool.len()];
    for &i in &train_idx {
        taken[i] = true;
    }
    let rest: Vec<usize> = all.into_iter().filter(|&i| !taken[i]).collect();
    let test_idx = weighted_draw(
        &rest,
        |i| shift.test_log_weight(pool.samples[i].z),
        shift.n_test,
        &mut rng,
    );
    let (train, validation) =
        holdout_validation(&pool.subset(&train_idx), shift.val_fraction, seed)?;
    Ok(SplitBundle {
        train,
        validation,
        test: pool.subset(&test_idx),
        gamma: shift.gamma,
        seed,
    })
}

/// Uniform random holdout: returns `(remaining, validation)` with
/// `|validation| = round(fraction * |train|)`, both in input order.
pub fn holdout_validation(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig("holdout fraction must lie in (0, 1)".into()));
    }
    let n = train.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_stream(seed, "holdout"));
    let mut val_idx = order[..n_val].to_vec();
    let mut keep_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    keep_idx.sort_unstable();
    Ok((train.subset(&keep_idx), train.subset(&val_idx)))
}
