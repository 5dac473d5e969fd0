//! Manifest-driven pipelines: data generation, the method x shift x seed
//! matrix with resumable on-disk results, and plot-data export.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! data/population.csv, data/population.json
//! data/gamma_<g>/{train,validation,test}.csv, data/gamma_<g>/split.json
//! results/<method>/<g>/<seed>/{run.json, log.csv, eval.json}
//! summary.csv, cells.csv
//! plots/{fig1_trend,fig2_densities,fig3_tradeoff}.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitBundle};
use crate::difficulty::{collect_difficulties, trend_report, TrendReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::Architecture;
use crate::synthgen::{generate_population, shift_split, GeneratorConfig, ShiftConfig};
use crate::trainer::{
    aggregate, attach_delta_auc, build_pool, log_csv, run_cell, train, RunArtifact, TrainConfig, Variant,
};

pub const SCHEMA_VERSION: u32 = 1;

const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub pool_seed: u64,
    /// Seed of the shift sampling; splits are fixed per gamma and shared by
    /// all training seeds.
    pub split_seed: u64,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainConfig,
    /// Worker threads for the matrix; 0 means available parallelism.
    pub workers: usize,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("experiment"),
            generator: GeneratorConfig::default(),
            pool_seed: 0,
            split_seed: 0,
            gammas: vec![0.0, 4.0, 8.0],
            seeds: (0..5).collect(),
            variants: vec![Variant::Ours, Variant::Erm, Variant::Resampled],
            n_train: 4000,
            n_test: 2000,
            train: TrainConfig::default(),
            workers: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Parse(format!("bad value {raw:?} for key {key}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean {raw:?} for key {key}"))),
    }
}

pub fn parse_architecture(raw: &str) -> Result<Architecture> {
    if raw == "linear" {
        return Ok(Architecture::Linear);
    }
    if let Some(h) = raw.strip_prefix("mlp:") {
        let hidden: usize = parse_value("architecture", h)?;
        if hidden == 0 {
            return Err(Error::InvalidConfig("mlp needs at least one hidden unit".into()));
        }
        return Ok(Architecture::Mlp { hidden });
    }
    Err(Error::Parse(format!("unknown architecture {raw:?} (linear | mlp:<hidden>)")))
}

fn architecture_text(a: Architecture) -> String {
    match a {
        Architecture::Linear => "linear".into(),
        Architecture::Mlp { hidden } => format!("mlp:{hidden}"),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Manifest {
    /// Parses the flat `key = value` format. Blank lines and `#` comments
    /// are ignored; `schema_version` is mandatory, every other key falls
    /// back to its default. Unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            let g = &mut m.generator;
            let t = &mut m.train;
            match key {
                "schema_version" => m.schema_version = parse_value(key, v)?,
                "output_dir" => m.output_dir = PathBuf::from(v),
                "pool_seed" => m.pool_seed = parse_value(key, v)?,
                "split_seed" => m.split_seed = parse_value(key, v)?,
                "n_pool" => g.n_pool = parse_value(key, v)?,
                "feature_dim" => g.feature_dim = parse_value(key, v)?,
                "prevalence_slope" => g.prevalence_slope = parse_value(key, v)?,
                "prevalence_midpoint" => g.prevalence_midpoint = parse_value(key, v)?,
                "disease_signal" => g.disease_signal = parse_value(key, v)?,
                "age_morphology_strength" => g.age_morphology_strength = parse_value(key, v)?,
                "noise_sd" => g.noise_sd = parse_value(key, v)?,
                "age_min_years" => g.age_min_years = parse_value(key, v)?,
                "age_max_years" => g.age_max_years = parse_value(key, v)?,
                "gammas" => m.gammas = parse_list(key, v)?,
                "seeds" => m.seeds = parse_list(key, v)?,
                "methods" => m.variants = parse_list(key, v)?,
                "n_train" => m.n_train = parse_value(key, v)?,
                "n_test" => m.n_test = parse_value(key, v)?,
                "epochs" => t.epochs = parse_value(key, v)?,
                "warmup_epochs" => t.warmup_epochs = parse_value(key, v)?,
                "batch_size" => t.batch_size = parse_value(key, v)?,
                "lr" => t.lr = parse_value(key, v)?,
                "lambda" => t.penalty.lambda = parse_value(key, v)?,
                "denom_epsilon" => t.penalty.denom_epsilon = parse_value(key, v)?,
                "use_affinity" => t.penalty.use_affinity = parse_bool(key, v)?,
                "use_coverage" => t.penalty.use_coverage = parse_bool(key, v)?,
                "age_bin_years" => t.age_bin_years = parse_value(key, v)?,
                "architecture" => t.architecture = parse_architecture(v)?,
                "standardize" => t.standardize = parse_bool(key, v)?,
                "workers" => m.workers = parse_value(key, v)?,
                _ => return Err(Error::Parse(format!("line {}: unknown key {key}", lineno + 1))),
            }
        }
        if !seen.contains("schema_version") {
            return Err(Error::InvalidConfig("manifest lacks schema_version".into()));
        }
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest file. A relative `output_dir` is resolved against
    /// the manifest's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        if m.output_dir.is_relative() {
            if let Some(parent) = path.parent() {
                m.output_dir = parent.join(&m.output_dir);
            }
        }
        Ok(m)
    }

    /// Canonical text form; parsing it yields the same manifest.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("schema_version", self.schema_version.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("pool_seed", self.pool_seed.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("n_pool", g.n_pool.to_string());
        kv("feature_dim", g.feature_dim.to_string());
        kv("prevalence_slope", g.prevalence_slope.to_string());
        kv("prevalence_midpoint", g.prevalence_midpoint.to_string());
        kv("disease_signal", g.disease_signal.to_string());
        kv("age_morphology_strength", g.age_morphology_strength.to_string());
        kv("noise_sd", g.noise_sd.to_string());
        kv("age_min_years", g.age_min_years.to_string());
        kv("age_max_years", g.age_max_years.to_string());
        kv("gammas", join(&self.gammas));
        kv("seeds", join(&self.seeds));
        kv("methods", join(&self.variants));
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lambda", t.penalty.lambda.to_string());
        kv("denom_epsilon", t.penalty.denom_epsilon.to_string());
        kv("use_affinity", t.penalty.use_affinity.to_string());
        kv("use_coverage", t.penalty.use_coverage.to_string());
        kv("age_bin_years", t.age_bin_years.to_string());
        kv("architecture", architecture_text(t.architecture));
        kv("standardize", t.standardize.to_string());
        kv("workers", self.workers.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.generator.validate()?;
        self.train.validate()?;
        if self.gammas.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::InvalidConfig("gammas, seeds and methods must be non-empty".into()));
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidConfig("gammas must be finite and non-negative".into()));
        }
        if self.n_train + self.n_test > self.generator.n_pool {
            return Err(Error::InvalidConfig(format!(
                "n_train + n_test = {} exceeds n_pool = {}",
                self.n_train + self.n_test,
                self.generator.n_pool
            )));
        }
        if self.n_train < 20 || self.n_test < 2 {
            return Err(Error::InvalidConfig("n_train must be at least 20 and n_test at least 2".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn split_dir(&self, gamma: f64) -> PathBuf {
        self.data_dir().join(format!("gamma_{gamma}"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }

    pub fn cell_dir(&self, method: &str, gamma: f64, seed: u64) -> PathBuf {
        cell_dir(&self.results_dir(), method, gamma, seed)
    }
}

pub fn cell_dir(results: &Path, method: &str, gamma: f64, seed: u64) -> PathBuf {
    results.join(method).join(gamma.to_string()).join(seed.to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        debug!("created {}", dir.display());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationMeta {
    pub generator: GeneratorConfig,
    pub pool_seed: u64,
    pub n: usize,
    pub age_min: f64,
    pub age_max: f64,
    pub prevalence: f64,
}

/// Sidecar of one split bundle; carries the pool anchors so the CSVs can be
/// read back with their normalization intact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub shift: ShiftConfig,
    pub split_seed: u64,
    pub age_min: f64,
    pub age_max: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub train_prevalence: f64,
    pub test_prevalence: f64,
}

/// Builds the pool and every split in memory, without touching disk.
pub fn build_splits(m: &Manifest) -> Result<(Dataset, Vec<(ShiftConfig, SplitBundle)>)> {
    let pool = generate_population(&m.generator, m.pool_seed)?;
    let splits = m
        .gammas
        .iter()
        .map(|&gamma| {
            let shift = ShiftConfig::from_pool(&pool, gamma, m.n_train, m.n_test);
            let split = shift_split(&pool, &shift, m.split_seed)?;
            Ok((shift, split))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pool, splits))
}

pub fn write_split(dir: &Path, shift: &ShiftConfig, split: &SplitBundle) -> Result<()> {
    ensure_dir(dir)?;
    for (name, ds) in SPLITS.iter().zip([&split.train, &split.validation, &split.test]) {
        ds.write_csv(&dir.join(format!("{name}.csv")))?;
    }
    let meta = SplitMeta {
        shift: shift.clone(),
        split_seed: split.seed,
        age_min: split.train.age_min,
        age_max: split.train.age_max,
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        n_test: split.test.len(),
        train_prevalence: split.train.prevalence(),
        test_prevalence: split.test.prevalence(),
    };
    write_text(&dir.join("split.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))
}

pub fn read_split(dir: &Path) -> Result<SplitBundle> {
    let meta_path = dir.join("split.json");
    if !meta_path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "no split data at {}; run `generate` first",
            dir.display()
        )));
    }
    let meta: SplitMeta = serde_json::from_str(&read_text(&meta_path)?)?;
    let read = |name: &str| Dataset::read_csv(&dir.join(format!("{name}.csv")), meta.age_min, meta.age_max);
    Ok(SplitBundle {
        train: read("train")?,
        validation: read("validation")?,
        test: read("test")?,
        gamma: meta.shift.gamma,
        seed: meta.split_seed,
    })
}

/// Writes the population and one split bundle per gamma. Returns the split
/// directories in manifest order.
pub fn cmd_generate(m: &Manifest) -> Result<Vec<PathBuf>> {
    m.validate()?;
    if !m.output_dir.is_dir() {
        info!("creating output directory {}", m.output_dir.display());
    }
    let data = m.data_dir();
    ensure_dir(&data)?;
    let (pool, splits) = build_splits(m)?;
    pool.write_csv(&data.join("population.csv"))?;
    let meta = PopulationMeta {
        generator: m.generator.clone(),
        pool_seed: m.pool_seed,
        n: pool.len(),
        age_min: pool.age_min,
        age_max: pool.age_max,
        prevalence: pool.prevalence(),
    };
    write_text(&data.join("population.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    write_text(&m.output_dir.join("manifest.txt"), &m.to_text())?;
    let mut dirs = Vec::new();
    for (shift, split) in &splits {
        let dir = m.split_dir(shift.gamma);
        write_split(&dir, shift, split)?;
        info!(
            "gamma {}: train {} / validation {} / test {}",
            shift.gamma,
            split.train.len(),
            split.validation.len(),
            split.test.len()
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Uses the split on disk when present, otherwise rebuilds it from the
/// manifest.
pub fn load_or_build_split(m: &Manifest, gamma: f64) -> Result<SplitBundle> {
    let dir = m.split_dir(gamma);
    if dir.join("split.json").is_file() {
        return read_split(&dir);
    }
    let pool = generate_population(&m.generator, m.pool_seed)?;
    let shift = ShiftConfig::from_pool(&pool, gamma, m.n_train, m.n_test);
    shift_split(&pool, &shift, m.split_seed)
}

/// Persists one finished cell.
pub fn write_cell(dir: &Path, run: &RunArtifact, report: &EvalReport) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("run.json"), &(run.to_json()? + "\n"))?;
    write_text(&dir.join("log.csv"), &log_csv(&run.log))?;
    // eval.json last: its presence marks the cell complete.
    write_text(&dir.join("eval.json"), &(report.to_json()? + "\n"))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_json(&read_text(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Completed,
    /// An `eval.json` already existed and was reused.
    Resumed,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub variant: Variant,
    pub gamma: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub cells: Vec<CellOutcome>,
    pub summary_path: PathBuf,
}

impl RunSummary {
    pub fn n_failed(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.status, CellStatus::Failed(_)))
            .count()
    }

    pub fn n_resumed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Resumed).count()
    }
}

/// Runs every (gamma, method, seed) cell whose `eval.json` is missing, then
/// writes `summary.csv` (per method and gamma) and `cells.csv` (per cell).
pub fn cmd_run(m: &Manifest) -> Result<RunSummary> {
    m.validate()?;
    let splits = m
        .gammas
        .iter()
        .map(|&g| read_split(&m.split_dir(g)))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (k, &gamma) in m.gammas.iter().enumerate() {
        for &variant in &m.variants {
            for &seed in &m.seeds {
                cells.push((k, gamma, variant, seed));
            }
        }
    }
    let workers = build_pool(m.workers)?;
    let mut outcomes: Vec<CellOutcome> = workers.install(|| {
        cells
            .par_iter()
            .map(|&(k, gamma, variant, seed)| {
                let dir = m.cell_dir(variant.name(), gamma, seed);
                let eval_path = dir.join("eval.json");
                let previous = if eval_path.is_file() {
                    read_report(&eval_path)
                        .inspect_err(|e| warn!("recomputing {}: {e}", eval_path.display()))
                        .ok()
                } else {
                    None
                };
                let result = match previous {
                    Some(r) => Ok((CellStatus::Resumed, r)),
                    None => run_cell(&splits[k], variant, seed, &m.train)
                        .and_then(|(run, report)| write_cell(&dir, &run, &report).map(|()| report))
                        .map(|r| (CellStatus::Completed, r)),
                };
                match result {
                    Ok((status, report)) => CellOutcome {
                        variant,
                        gamma,
                        seed,
                        status,
                        report: Some(report),
                    },
                    Err(e) => {
                        warn!("cell {variant}/{gamma}/{seed} failed: {e}");
                        CellOutcome {
                            variant,
                            gamma,
                            seed,
                            status: CellStatus::Failed(e.to_string()),
                            report: None,
                        }
                    }
                }
            })
            .collect()
    });

    let mut reports: Vec<&mut EvalReport> = outcomes.iter_mut().filter_map(|c| c.report.as_mut()).collect();
    attach_delta_auc(&mut reports);
    for c in &outcomes {
        if let Some(r) = &c.report {
            let path = m.cell_dir(c.variant.name(), c.gamma, c.seed).join("eval.json");
            write_text(&path, &(r.to_json()? + "\n"))?;
        }
    }

    ensure_dir(&m.output_dir)?;
    let summary_path = m.output_dir.join("summary.csv");
    write_text(&summary_path, &summary_csv(m, &outcomes)?)?;
    write_text(&m.output_dir.join("cells.csv"), &cells_csv(&outcomes)?)?;
    let summary = RunSummary {
        cells: outcomes,
        summary_path,
    };
    info!(
        "{} cells: {} resumed, {} failed",
        summary.cells.len(),
        summary.n_resumed(),
        summary.n_failed()
    );
    Ok(summary)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn summary_csv(m: &Manifest, outcomes: &[CellOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "gamma",
        "status",
        "n_ok",
        "n_failed",
        "auc_mean",
        "auc_se",
        "s_plus",
        "s_minus",
        "dsep10_mean",
        "dsep10_se",
        "delta_auc_mean",
    ])?;
    for &variant in &m.variants {
        for &gamma in &m.gammas {
            let group: Vec<&CellOutcome> = outcomes
                .iter()
                .filter(|c| c.variant == variant && c.gamma == gamma)
                .collect();
            let ok: Vec<&EvalReport> = group.iter().filter_map(|c| c.report.as_ref()).collect();
            let n_failed = group.len() - ok.len();
            let status = match (ok.len(), n_failed) {
                (_, 0) => "ok",
                (0, _) => "failed",
                _ => "partial",
            };
            let row = aggregate(ok.iter().copied()).into_iter().next();
            let f = |get: fn(&crate::trainer::AggregateRow) -> f64| opt(row.as_ref().map(get));
            w.write_record([
                variant.name().to_string(),
                gamma.to_string(),
                status.to_string(),
                ok.len().to_string(),
                n_failed.to_string(),
                f(|r| r.auc_mean),
                f(|r| r.auc_se),
                f(|r| r.s_plus),
                f(|r| r.s_minus),
                f(|r| r.dsep10_mean),
                f(|r| r.dsep10_se),
                opt(row.as_ref().and_then(|r| r.delta_auc_mean)),
            ])?;
        }
    }
    finish(w)
}

fn cells_csv(outcomes: &[CellOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "gamma", "seed", "status", "auc", "delta_sep10", "delta_auc", "error"])?;
    for c in outcomes {
        let (status, error) = match &c.status {
            CellStatus::Completed | CellStatus::Resumed => ("ok", String::new()),
            CellStatus::Failed(e) => ("failed", e.clone()),
        };
        let r = c.report.as_ref();
        w.write_record([
            c.variant.name().to_string(),
            c.gamma.to_string(),
            c.seed.to_string(),
            status.to_string(),
            opt(r.map(|r| r.auc)),
            opt(r.map(|r| r.delta_sep10)),
            opt(r.and_then(|r| r.delta_auc)),
            error,
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Overrides applied to a manifest's training config for a single cell.
#[derive(Debug, Clone, Default)]
pub struct CellRequest {
    pub gamma: f64,
    pub seed: u64,
    pub variant: Option<Variant>,
    pub lambda: Option<f64>,
    pub no_affinity: bool,
    pub no_coverage: bool,
}

/// Trains and evaluates one cell, writing it to `out` (default: the cell's
/// directory in the results tree).
pub fn cmd_train(m: &Manifest, req: &CellRequest, out: Option<&Path>) -> Result<(RunArtifact, EvalReport, PathBuf)> {
    let mut cfg = req.variant.unwrap_or(Variant::Ours).configure(&m.train);
    cfg.seed = req.seed;
    if let Some(l) = req.lambda {
        cfg.penalty.lambda = l;
    }
    if req.no_affinity {
        cfg.penalty.use_affinity = false;
    }
    if req.no_coverage {
        cfg.penalty.use_coverage = false;
    }
    cfg.validate()?;
    let split = load_or_build_split(m, req.gamma)?;
    let run = train(&split, &cfg)?;
    let report = crate::trainer::evaluate(&run, &split)?;
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => m.cell_dir(&report.method, req.gamma, req.seed),
    };
    write_cell(&dir, &run, &report)?;
    Ok((run, report, dir))
}

/// Re-evaluates a saved run on a split directory.
pub fn cmd_evaluate(run_path: &Path, split_dir: &Path) -> Result<EvalReport> {
    let run = RunArtifact::from_json(&read_text(run_path)?)?;
    let split = read_split(split_dir)?;
    evaluate_model(
        &run.model,
        &split.validation,
        &split.test,
        &Variant::label_of(&run.config),
        split.gamma,
        run.config.seed,
    )
}

/// Binned difficulty trend of a saved model on the split's training set.
pub fn cmd_trend(run_path: &Path, split_dir: &Path, n_bins: usize) -> Result<TrendReport> {
    let run = RunArtifact::from_json(&read_text(run_path)?)?;
    let split = read_split(split_dir)?;
    trend_report(&collect_difficulties(&run.model, &split.train)?, n_bins)
}

/// Completed cells found under a results tree, sorted by method, gamma and
/// seed.
pub fn scan_results(results: &Path) -> Result<Vec<(PathBuf, EvalReport)>> {
    let mut found = Vec::new();
    if !results.is_dir() {
        return Ok(found);
    }
    let subdirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for method in subdirs(results)? {
        for gamma in subdirs(&method)? {
            for seed in subdirs(&gamma)? {
                let path = seed.join("eval.json");
                if path.is_file() {
                    found.push((seed, read_report(&path)?));
                }
            }
        }
    }
    found.sort_by(|a, b| {
        a.1.method
            .cmp(&b.1.method)
            .then(a.1.gamma.total_cmp(&b.1.gamma))
            .then(a.1.seed.cmp(&b.1.seed))
    });
    Ok(found)
}

pub const DENSITY_BINS: usize = 10;

/// Age histogram of one dataset on equal z bins: `(density, prevalence)`
/// per bin, densities summing to one. Empty bins have no prevalence.
pub fn age_density(ds: &Dataset, n_bins: usize) -> Vec<(f64, Option<f64>)> {
    let mut count = vec![0usize; n_bins];
    let mut pos = vec![0usize; n_bins];
    for s in &ds.samples {
        let b = ((s.z * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        pos[b] += usize::from(s.y);
    }
    let n = ds.len().max(1) as f64;
    count
        .iter()
        .zip(&pos)
        .map(|(&c, &p)| (c as f64 / n, (c > 0).then(|| p as f64 / c as f64)))
        .collect()
}

/// Writes the three figure CSVs under `<output_dir>/plots`. Figure 2 needs
/// the data directory and is skipped without it; figure 1 uses the warm-up
/// trend of the first `ours` run (any run if there is none).
pub fn cmd_plotdata(output_dir: &Path) -> Result<Vec<PathBuf>> {
    let results = output_dir.join("results");
    let found = scan_results(&results)?;
    if found.is_empty() {
        return Err(Error::MissingResults(results));
    }
    let plots = output_dir.join("plots");
    ensure_dir(&plots)?;
    let mut written = Vec::new();

    let fig1_source = found
        .iter()
        .find(|(_, r)| r.method == Variant::Ours.name())
        .or_else(|| found.first());
    if let Some((dir, _)) = fig1_source {
        let run = RunArtifact::from_json(&read_text(&dir.join("run.json"))?)?;
        if let Some(trend) = &run.warmup_trend {
            let path = plots.join("fig1_trend.csv");
            write_text(&path, &trend.to_csv_string())?;
            written.push(path);
        }
    }

    let data = output_dir.join("data");
    let mut split_dirs: Vec<(f64, PathBuf)> = Vec::new();
    if data.is_dir() {
        for entry in fs::read_dir(&data).map_err(|e| Error::io(&data, e))? {
            let p = entry.map_err(|e| Error::io(&data, e))?.path();
            if p.join("split.json").is_file() {
                let meta: SplitMeta = serde_json::from_str(&read_text(&p.join("split.json"))?)?;
                split_dirs.push((meta.shift.gamma, p));
            }
        }
    }
    split_dirs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if split_dirs.is_empty() {
        warn!("no split data under {}; skipping fig2", data.display());
    } else {
        let mut out = String::from("gamma,split,bin,center,density,prevalence\n");
        for (gamma, dir) in &split_dirs {
            let split = read_split(dir)?;
            for (name, ds) in SPLITS.iter().zip([&split.train, &split.validation, &split.test]) {
                for (b, (density, prev)) in age_density(ds, DENSITY_BINS).into_iter().enumerate() {
                    let center = (b as f64 + 0.5) / DENSITY_BINS as f64;
                    let _ = writeln!(out, "{gamma},{name},{b},{center},{density},{}", opt(prev));
                }
            }
        }
        let path = plots.join("fig2_densities.csv");
        write_text(&path, &out)?;
        written.push(path);
    }

    let mut out = String::from("method,gamma,auc,auc_se,dsep10,dsep10_se\n");
    for row in aggregate(found.iter().map(|(_, r)| r)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.method, row.gamma, row.auc_mean, row.auc_se, row.dsep10_mean, row.dsep10_se
        );
    }
    let path = plots.join("fig3_tradeoff.csv");
    write_text(&path, &out)?;
    written.push(path);
    Ok(written)
}
