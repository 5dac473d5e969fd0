//! Warm-up, affinity freeze and penalized training; ERM and age-resampled
//! baselines; the seed x shift x method experiment matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitBundle};
use crate::difficulty::{collect_difficulties, trend_report, TrendReport, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::{adam_step, AdamState, Architecture, Classifier, InputScaler};
use crate::penalty::{loss_from_probs, penalty_grad_from_probs, BatchArrays, LossBreakdown, PenaltyConfig};
use crate::rng::rng_stream;
use crate::stats::{mean, standard_error};
use crate::synthgen::{shift_split, ShiftConfig};
use crate::trendfit::{fit_trends, AffinityWeights, TrendFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Erm,
    Resampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub method: Method,
    pub penalty: PenaltyConfig,
    pub seed: u64,
    pub age_bin_years: u32,
    pub architecture: Architecture,
    /// Standardize inputs with training-set feature statistics.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 1,
            batch_size: 64,
            lr: 0.001,
            method: Method::Ours,
            penalty: PenaltyConfig::default(),
            seed: 0,
            age_bin_years: 10,
            architecture: Architecture::Linear,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig("warmup_epochs must be below epochs".into()));
        }
        if self.batch_size < 4 {
            return Err(Error::InvalidConfig("batch_size must be at least 4".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.age_bin_years == 0 {
            return Err(Error::InvalidConfig("age_bin_years must be positive".into()));
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return Err(Error::InvalidConfig("mlp needs at least one hidden unit".into()));
        }
        self.penalty.validate()
    }
}

/// A named method configuration: the three methods plus the two ablations
/// of the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    Erm,
    Resampled,
    OursNoAffinity,
    OursNoCoverage,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ours,
        Variant::Erm,
        Variant::Resampled,
        Variant::OursNoAffinity,
        Variant::OursNoCoverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Erm => "erm",
            Variant::Resampled => "resampled",
            Variant::OursNoAffinity => "ours_no_affinity",
            Variant::OursNoCoverage => "ours_no_coverage",
        }
    }

    /// Applies this variant to a base configuration.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Ours => cfg.method = Method::Ours,
            Variant::Erm => cfg.method = Method::Erm,
            Variant::Resampled => cfg.method = Method::Resampled,
            Variant::OursNoAffinity => {
                cfg.method = Method::Ours;
                cfg.penalty.use_affinity = false;
            }
            Variant::OursNoCoverage => {
                cfg.method = Method::Ours;
                cfg.penalty.use_coverage = false;
            }
        }
        cfg
    }

    /// Name of the configuration a TrainConfig represents.
    pub fn label_of(cfg: &TrainConfig) -> String {
        match cfg.method {
            Method::Erm => "erm".into(),
            Method::Resampled => "resampled".into(),
            Method::Ours => match (cfg.penalty.use_affinity, cfg.penalty.use_coverage) {
                (true, true) => "ours".into(),
                (false, true) => "ours_no_affinity".into(),
                (true, false) => "ours_no_coverage".into(),
                (false, false) => "ours_no_affinity_no_coverage".into(),
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// One row of the per-epoch training log; values are batch averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub penalized: bool,
    pub bce: f64,
    pub slope_y0: f64,
    pub slope_y1: f64,
    pub coverage_y0: f64,
    pub coverage_y1: f64,
    pub penalty: f64,
    pub total: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,penalized,bce,slope_y0,slope_y1,coverage_y0,coverage_y1,penalty,total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            u8::from(r.penalized),
            r.bce,
            r.slope_y0,
            r.slope_y1,
            r.coverage_y0,
            r.coverage_y1,
            r.penalty,
            r.total
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: TrainConfig,
    pub model: Classifier,
    pub trend_fit: Option<TrendFit>,
    pub warmup_trend: Option<TrendReport>,
    /// Affinity weights over ten equal bins on (0, 1].
    pub weight_histogram: Vec<usize>,
    pub log: Vec<LogRow>,
    /// Number of batches on which the penalty path was evaluated.
    pub penalty_evaluations: u64,
    /// Fingerprints of the affinity weights when frozen and as used in the
    /// final epoch.
    pub affinity_fingerprint_frozen: Option<u64>,
    pub affinity_fingerprint_final: Option<u64>,
    pub elapsed_seconds: f64,
    #[serde(skip)]
    pub affinity: Option<AffinityWeights>,
}

impl RunArtifact {
    /// Copy with wall-clock timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunArtifact {
        RunArtifact {
            elapsed_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a saved run; the checkpoint shape is re-validated.
    pub fn from_json(text: &str) -> Result<Self> {
        let run: RunArtifact = serde_json::from_str(text)?;
        Classifier::from_json(&run.model.to_json()?)?;
        Ok(run)
    }
}

pub fn fingerprint(weights: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in weights {
        for b in w.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn shuffled_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Age-stratified batches: every batch spreads its slots as evenly as
/// possible over the non-empty age bins (bins of `age_bin_years` years) and
/// draws uniformly with replacement within each bin. An epoch has as many
/// batches as plain shuffling would.
pub fn resampled_batches<R: Rng>(
    train: &Dataset,
    batch_size: usize,
    age_bin_years: u32,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.samples.iter().enumerate() {
        let key = (s.age_years / f64::from(age_bin_years)).floor() as i64;
        bins.entry(key).or_default().push(i);
    }
    let bins: Vec<Vec<usize>> = bins.into_values().collect();
    if bins.len() < 2 {
        return Err(Error::NoAgeSpread);
    }
    let k = bins.len();
    let n_batches = train.len().div_ceil(batch_size);
    let base = batch_size / k;
    let extra = batch_size % k;
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for (j, members) in bins.iter().enumerate() {
            // Rotate which bins receive the remainder slots.
            let take = base + usize::from((j + k - (b * extra) % k) % k < extra);
            for _ in 0..take {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// Trains one model on `split.train`.
///
/// The first `warmup_epochs` minimize plain BCE. Immediately afterwards the
/// difficulty of every training sample is measured with the frozen snapshot,
/// per-label Huber trends are fitted and the affinity weights are frozen.
/// Remaining epochs minimize the penalized objective for `Method::Ours` and
/// BCE otherwise. Adam state carries over from warm-up.
pub fn train(split: &SplitBundle, cfg: &TrainConfig) -> Result<RunArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model = Classifier::init(cfg.architecture, train.feature_dim, cfg.seed);
    if cfg.standardize {
        let scaler = InputScaler::fit(
            train.samples.iter().map(|s| s.features.as_slice()),
            train.feature_dim,
        )?;
        model = model.with_scaler(scaler)?;
    }
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    let mut shuffle_rng = rng_stream(cfg.seed, "shuffle");
    let mut resample_rng = rng_stream(cfg.seed, "resample");

    let z = train.zs();
    let y = train.labels();
    let ones = vec![1.0; train.len()];
    let mut affinity: Option<AffinityWeights> = None;
    let mut trend_fit = None;
    let mut warmup_trend = None;
    let mut penalty_evaluations = 0u64;
    let mut fingerprint_frozen = None;
    let mut fingerprint_final = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut grad = vec![0.0; model.n_params()];
    for epoch in 0..cfg.epochs {
        if epoch == cfg.warmup_epochs {
            let records = collect_difficulties(&model, train)?;
            warmup_trend = trend_report(&records, DEFAULT_BINS).ok();
            match fit_trends(&records) {
                Ok((fit, weights)) => {
                    fingerprint_frozen = Some(fingerprint(&weights.weights));
                    trend_fit = Some(fit);
                    affinity = Some(weights);
                }
                Err(e) if cfg.method == Method::Ours => return Err(e),
                Err(_) => {}
            }
        }
        let penalized = cfg.method == Method::Ours && epoch >= cfg.warmup_epochs && cfg.penalty.lambda > 0.0;
        let weights: &[f64] = match (&affinity, penalized) {
            (Some(a), true) => &a.weights,
            _ => &ones,
        };
        if penalized && epoch + 1 == cfg.epochs {
            fingerprint_final = affinity.as_ref().map(|a| fingerprint(&a.weights));
        }
        let batches = match cfg.method {
            Method::Resampled => resampled_batches(train, cfg.batch_size, cfg.age_bin_years, &mut resample_rng)?,
            _ => shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng),
        };

        let mut acc = LossBreakdown::default();
        let mut logits = Vec::with_capacity(cfg.batch_size);
        for batch in &batches {
            logits.clear();
            for &i in batch {
                logits.push(model.logit(&train.samples[i].features)?);
            }
            let p = crate::penalty::probs_from_logits(&logits);
            let bz: Vec<f64> = batch.iter().map(|&i| z[i]).collect();
            let by: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
            let arrays = BatchArrays { z: &bz, y: &by, w: &bw };
            let n = batch.len() as f64;
            let mut upstream: Vec<f64> = p.iter().zip(&by).map(|(p, &y)| (p - f64::from(y)) / n).collect();
            let loss = if penalized {
                penalty_evaluations += 1;
                let pg = penalty_grad_from_probs(&arrays, &p, &cfg.penalty);
                for (u, g) in upstream.iter_mut().zip(&pg) {
                    *u += g;
                }
                loss_from_probs(&arrays, &p, &cfg.penalty)
            } else {
                let bce = crate::model::mean_bce(&p, &by);
                LossBreakdown {
                    bce,
                    total: bce,
                    ..Default::default()
                }
            };
            acc.bce += loss.bce;
            acc.slope[0] += loss.slope[0];
            acc.slope[1] += loss.slope[1];
            acc.coverage[0] += loss.coverage[0];
            acc.coverage[1] += loss.coverage[1];
            acc.penalty += loss.penalty;
            acc.total += loss.total;

            grad.iter_mut().for_each(|g| *g = 0.0);
            for (&i, &u) in batch.iter().zip(&upstream) {
                model.accumulate_logit_grad(&train.samples[i].features, u, &mut grad)?;
            }
            adam_step(&mut model.params, &grad, &mut adam)?;
        }
        let nb = batches.len() as f64;
        log.push(LogRow {
            epoch: epoch + 1,
            penalized,
            bce: acc.bce / nb,
            slope_y0: acc.slope[0] / nb,
            slope_y1: acc.slope[1] / nb,
            coverage_y0: acc.coverage[0] / nb,
            coverage_y1: acc.coverage[1] / nb,
            penalty: acc.penalty / nb,
            total: acc.total / nb,
        });
    }

    Ok(RunArtifact {
        config: cfg.clone(),
        model,
        trend_fit,
        warmup_trend,
        weight_histogram: affinity.as_ref().map(|a| a.histogram(10)).unwrap_or_default(),
        log,
        penalty_evaluations,
        affinity_fingerprint_frozen: fingerprint_frozen,
        affinity_fingerprint_final: fingerprint_final,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        affinity,
    })
}

/// Evaluates a trained run: threshold on validation, metrics on test.
pub fn evaluate(run: &RunArtifact, split: &SplitBundle) -> Result<EvalReport> {
    evaluate_model(
        &run.model,
        &split.validation,
        &split.test,
        &Variant::label_of(&run.config),
        split.gamma,
        run.config.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub base: TrainConfig,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub variant: Variant,
    pub gamma: f64,
    pub seed: u64,
    pub outcome: std::result::Result<(RunArtifact, EvalReport), String>,
}

impl CellResult {
    pub fn report(&self) -> Option<&EvalReport> {
        self.outcome.as_ref().ok().map(|(_, r)| r)
    }
}

pub fn run_cell(split: &SplitBundle, variant: Variant, seed: u64, base: &TrainConfig) -> Result<(RunArtifact, EvalReport)> {
    let mut cfg = variant.configure(base);
    cfg.seed = seed;
    let run = train(split, &cfg)?;
    let mut report = evaluate(&run, split)?;
    report.method = variant.name().to_string();
    Ok((run, report))
}

/// Sets `delta_auc` on every successful report relative to the ERM report
/// with the same gamma and seed, when one exists.
pub fn attach_delta_auc(reports: &mut [&mut EvalReport]) {
    let erm: Vec<(f64, u64, f64)> = reports
        .iter()
        .filter(|r| r.method == Variant::Erm.name())
        .map(|r| (r.gamma, r.seed, r.auc))
        .collect();
    for r in reports.iter_mut() {
        r.delta_auc = erm
            .iter()
            .find(|(g, s, _)| *g == r.gamma && *s == r.seed)
            .map(|(_, _, auc)| 100.0 * (r.auc - auc));
    }
}

pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder.build().map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Runs every (gamma, seed, variant) cell on splits carved from `pool`.
/// Cells run in parallel; a failing cell is recorded and does not stop the
/// others. Results come back in (gamma, variant, seed) order.
pub fn run_matrix(pool: &Dataset, cfg: &MatrixConfig) -> Result<Vec<CellResult>> {
    let splits = cfg
        .gammas
        .iter()
        .map(|&gamma| {
            let shift = ShiftConfig::from_pool(pool, gamma, cfg.n_train, cfg.n_test);
            shift_split(pool, &shift, cfg.split_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    run_cells(&splits, cfg)
}

pub fn run_cells(splits: &[SplitBundle], cfg: &MatrixConfig) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    for (k, _) in splits.iter().enumerate() {
        for &variant in &cfg.variants {
            for &seed in &cfg.seeds {
                cells.push((k, variant, seed));
            }
        }
    }
    let workers = build_pool(cfg.workers)?;
    let mut results: Vec<CellResult> = workers.install(|| {
        cells
            .par_iter()
            .map(|&(k, variant, seed)| CellResult {
                variant,
                gamma: splits[k].gamma,
                seed,
                outcome: run_cell(&splits[k], variant, seed, &cfg.base).map_err(|e| e.to_string()),
            })
            .collect()
    });
    let mut reports: Vec<&mut EvalReport> = results
        .iter_mut()
        .filter_map(|c| c.outcome.as_mut().ok().map(|(_, r)| r))
        .collect();
    attach_delta_auc(&mut reports);
    Ok(results)
}

/// Mean and standard error across seeds for one (method, gamma) cell group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub gamma: f64,
    pub n: usize,
    pub auc_mean: f64,
    pub auc_se: f64,
    /// Mean |s+| across seeds.
    pub s_plus: f64,
    /// Mean |s-| across seeds.
    pub s_minus: f64,
    pub dsep10_mean: f64,
    pub dsep10_se: f64,
    pub delta_auc_mean: Option<f64>,
}

/// Groups reports by (method, gamma) in first-seen order. `dSep10` is
/// computed per seed and then averaged.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, f64), Vec<&EvalReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|((m, g), _)| *m == r.method && *g == r.gamma) {
            Some((_, v)) => v.push(r),
            None => groups.push(((r.method.clone(), r.gamma), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((method, gamma), rs)| {
            let col = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let auc = col(&|r| r.auc);
            let dsep = col(&|r| r.delta_sep10);
            let deltas: Vec<f64> = rs.iter().filter_map(|r| r.delta_auc).collect();
            AggregateRow {
                method,
                gamma,
                n: rs.len(),
                auc_mean: mean(&auc),
                auc_se: standard_error(&auc),
                s_plus: mean(&col(&|r| r.s_plus.abs())),
                s_minus: mean(&col(&|r| r.s_minus.abs())),
                dsep10_mean: mean(&dsep),
                dsep10_se: standard_error(&dsep),
                delta_auc_mean: (deltas.len() == rs.len()).then(|| mean(&deltas)),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,gamma,auc_mean,auc_se,s_plus,s_minus,dsep10_mean,dsep10_se\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.gamma, r.auc_mean, r.auc_se, r.s_plus, r.s_minus, r.dsep10_mean, r.dsep10_se
        );
    }
    out
}
