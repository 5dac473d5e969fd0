//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use agedecor::data::{Label, Sample};
use agedecor::eval::{auc, delta_sep10, fit_logistic_1d, youden_threshold, EvalReport, ScoredSet};
use agedecor::experiment::{cmd_generate, cmd_run, Manifest};
use agedecor::model::{Architecture, Classifier};
use agedecor::penalty::{coverage_score, penalty_grad_logits, total_loss, wols_slope, Batch, PenaltyConfig};
use agedecor::rng::rng_stream;
use agedecor::stats::{mean, sigmoid, standard_error};
use agedecor::trainer::{RunArtifact, Variant};
use agedecor::trendfit::{affinity_weight, huber_fit};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let (_, a) = delta_sep10(1.35e-2, 1.89e-2);
    let (_, b) = delta_sep10(0.56e-2, 0.89e-2);
    outcome(
        (a - 17.59).abs() < 0.01 && (b - 7.52).abs() < 0.02,
        format!("dSep10 = {a:.4}% (want 17.59 +- 0.01), {b:.4}% (want 7.52 +- 0.02)"),
    )
}

fn sample(id: u64, features: Vec<f64>, z: f64, y: Label) -> Sample {
    Sample {
        id,
        features,
        age_years: 20.0 + 70.0 * z,
        z,
        y,
    }
}

fn criterion_2() -> Outcome {
    // One-hot features on a bias-free linear head make each weight the
    // logit of exactly one sample.
    let n = 64;
    let cfg = PenaltyConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut rng = rng_stream(trial, "acceptance-grad");
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let mut f = vec![0.0; n];
                f[i] = 1.0;
                sample(i as u64, f, rng.random(), u8::from(i % 2 == 0) ^ u8::from(rng.random::<f64>() < 0.3))
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..=1.0)).collect();
        let mut model = Classifier::zeros(Architecture::Linear, n);
        for w in &mut model.params[..n] {
            *w = rng.random_range(-2.0..2.0);
        }
        let batch = Batch {
            samples: samples.iter().collect(),
            weights,
        };
        let penalty = penalty_grad_logits(&batch, &model, &cfg).unwrap();
        let h = 1e-6;
        for k in 0..n {
            let p = sigmoid(model.params[k]);
            let analytic = (p - f64::from(samples[k].y)) / n as f64 + penalty[k];
            let mut hi = model.clone();
            hi.params[k] += h;
            let mut lo = model.clone();
            lo.params[k] -= h;
            let fd = (total_loss(&batch, &hi, &cfg).unwrap().total - total_loss(&batch, &lo, &cfg).unwrap().total)
                / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.3e} over 20 batches of 64 (want < 1e-5)"))
}

fn normal_equation_slope(z: &[f64], g: &[f64], w: &[f64]) -> f64 {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..z.len() {
        s0 += w[i];
        s1 += w[i] * z[i];
        s2 += w[i] * z[i] * z[i];
        t0 += w[i] * g[i];
        t1 += w[i] * z[i] * g[i];
    }
    (s0 * t1 - s1 * t0) / (s0 * s2 - s1 * s1)
}

fn criterion_3() -> Outcome {
    let mut rng = rng_stream(3, "acceptance-wols");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(8..80);
        let z: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..=1.0)).collect();
        let est = wols_slope(&z, &g, &w, 1e-8).unwrap();
        worst = worst.max((est.beta - normal_equation_slope(&z, &g, &w)).abs());
    }
    outcome(worst < 1e-10, format!("max |diff| {worst:.3e} over 100 batches (want < 1e-10)"))
}

fn ols_slope(z: &[f64], g: &[f64]) -> f64 {
    normal_equation_slope(z, g, &vec![1.0; z.len()])
}

fn criterion_4() -> Outcome {
    let branches = affinity_weight(0.1, 0.2) == 1.0
        && affinity_weight(-0.2, 0.2) == 1.0
        && affinity_weight(0.8, 0.2) == 0.25
        && affinity_weight(-0.5, 0.2) == 0.2 / 0.5;

    let z: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let g: Vec<f64> = z.iter().map(|z| 0.3 - 0.7 * z).collect();
    let fit = huber_fit(&z, &g).unwrap();
    let noiseless = (fit.alpha - 0.3).abs().max((fit.beta + 0.7).abs());

    let mut wins = 0;
    for trial in 0..10 {
        let mut rng = rng_stream(trial, "acceptance-huber");
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut g: Vec<f64> = z.iter().map(|z| 0.2 + 0.5 * z + 0.02 * (rng.random::<f64>() - 0.5)).collect();
        for i in 0..n / 20 {
            // Extreme outliers at high z pull least squares upwards.
            let k = (0..n).filter(|&k| z[k] > 0.7).nth(i).unwrap();
            g[k] += 10.0;
        }
        let huber = huber_fit(&z, &g).unwrap().beta;
        if (huber - 0.5).abs() < (ols_slope(&z, &g) - 0.5).abs() {
            wins += 1;
        }
    }
    outcome(
        branches && noiseless < 1e-9 && wins >= 9,
        format!("branches exact: {branches}; noiseless error {noiseless:.2e}; Huber beats OLS in {wins}/10"),
    )
}

fn criterion_5() -> Outcome {
    let exact = coverage_score(&[0.37; 12]) == 0.0
        && coverage_score(&[0.0, 0.0, 1.0, 1.0]) == 1.0
        && coverage_score(&[0.0, 0.5, 1.0]) == 2.0 / 3.0;

    let samples: Vec<Sample> = (0..16)
        .map(|i| sample(i, vec![i as f64 / 16.0, 1.0], 0.4, (i % 2) as Label))
        .collect();
    let mut model = Classifier::zeros(Architecture::Linear, 2);
    model.params = vec![1.5, -0.3, 0.2];
    let batch = Batch {
        samples: samples.iter().collect(),
        weights: vec![1.0; 16],
    };
    let loss = total_loss(&batch, &model, &PenaltyConfig::default()).unwrap();
    let gated = loss.total.to_bits() == loss.bce.to_bits() && loss.penalty == 0.0;
    outcome(
        exact && gated,
        format!("coverage values exact: {exact}; total == BCE under zero coverage: {gated}"),
    )
}

fn read_run(dir: &Path, method: &str, gamma: f64, seed: u64) -> RunArtifact {
    let path = agedecor::experiment::cell_dir(&dir.join("results"), method, gamma, seed).join("run.json");
    RunArtifact::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn criterion_6(dir: &Path, m: &Manifest) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for &seed in &m.seeds {
        let run = read_run(dir, Variant::Ours.name(), 0.0, seed);
        let trend = run.warmup_trend.expect("warm-up trend recorded");
        let (r0, r1) = (trend.labels[0].r, trend.labels[1].r);
        if r0.abs() >= 0.8 && r1.abs() >= 0.8 && r0.signum() != r1.signum() {
            ok += 1;
        }
        parts.push(format!("({r0:+.2},{r1:+.2})"));
    }
    outcome(
        ok >= 4,
        format!("{ok}/5 seeds with |r| >= 0.8 and opposite signs; r(y=0,y=1) = {}", parts.join(" ")),
    )
}

struct Cells<'a> {
    reports: Vec<&'a EvalReport>,
}

impl Cells<'_> {
    fn select(&self, method: Variant, gamma: Option<f64>) -> Vec<&EvalReport> {
        self.reports
            .iter()
            .copied()
            .filter(|r| r.method == method.name() && gamma.is_none_or(|g| r.gamma == g))
            .collect()
    }

    fn mean_of(&self, method: Variant, gamma: f64, f: fn(&EvalReport) -> f64) -> f64 {
        mean(&self.select(method, Some(gamma)).iter().map(|r| f(r)).collect::<Vec<_>>())
    }

    /// dSep10 averaged over gammas per seed, then mean and SE across seeds.
    fn gamma_averaged(&self, method: Variant, seeds: &[u64]) -> (f64, f64) {
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = self
                    .select(method, None)
                    .iter()
                    .filter(|r| r.seed == s)
                    .map(|r| r.delta_sep10)
                    .collect();
                mean(&v)
            })
            .collect();
        (mean(&per_seed), standard_error(&per_seed))
    }
}

fn criterion_7(cells: &Cells, m: &Manifest) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for &g in &m.gammas {
        let erm = cells.mean_of(Variant::Erm, g, |r| r.delta_sep10);
        let ours = cells.mean_of(Variant::Ours, g, |r| r.delta_sep10);
        let reduction = 1.0 - ours / erm;
        let dauc = 100.0 * (cells.mean_of(Variant::Ours, g, |r| r.auc) - cells.mean_of(Variant::Erm, g, |r| r.auc));
        pass &= reduction >= 0.25 && dauc.abs() <= 1.5;
        parts.push(format!(
            "g={g}: dSep10 erm {erm:.2} ours {ours:.2} (-{:.0}%), dAUC {dauc:+.2}pt",
            100.0 * reduction
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8(cells: &Cells) -> Outcome {
    let change = |v| cells.mean_of(v, 8.0, |r| r.delta_sep10) - cells.mean_of(v, 0.0, |r| r.delta_sep10);
    let ours = change(Variant::Ours);
    let resampled = change(Variant::Resampled);
    outcome(
        ours < resampled,
        format!("dSep10 change g=0 -> g=8: ours {ours:+.2}, resampled {resampled:+.2} (want ours < resampled)"),
    )
}

fn criterion_9(cells: &Cells, m: &Manifest) -> Outcome {
    let full = cells.gamma_averaged(Variant::Ours, &m.seeds);
    let no_aff = cells.gamma_averaged(Variant::OursNoAffinity, &m.seeds);
    let no_cov = cells.gamma_averaged(Variant::OursNoCoverage, &m.seeds);
    let le = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 + a.1.max(b.1);
    let first = le(full, no_aff);
    let second = le(no_aff, no_cov);
    outcome(
        first && second,
        format!(
            "full {:.2}+-{:.2}, w/o affinity {:.2}+-{:.2}, w/o coverage {:.2}+-{:.2}; full<=w/o-aff: {first}, w/o-aff<=w/o-cov: {second}",
            full.0, full.1, no_aff.0, no_aff.1, no_cov.0, no_cov.1
        ),
    )
}

fn auc_pairs(s: &[f64], y: &[Label]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn youden_sweep(s: &[f64], y: &[Label]) -> f64 {
    let n_pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let n_neg = y.len() as f64 - n_pos;
    let mut cands = s.to_vec();
    cands.sort_by(f64::total_cmp);
    let mids: Vec<f64> = cands.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    cands.extend(mids);
    cands
        .iter()
        .map(|&t| {
            let tp = s.iter().zip(y).filter(|(&v, &l)| l == 1 && v >= t).count() as f64;
            let fp = s.iter().zip(y).filter(|(&v, &l)| l == 0 && v >= t).count() as f64;
            tp / n_pos - fp / n_neg
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f decreasing with a sign change on [lo, hi].
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Maximum likelihood by nested bisection on the score equations in
/// standardized coordinates: the intercept solves sum(d - p) = 0 for a given
/// slope, and the profile score sum((d - p) t) is decreasing in the slope.
fn logistic_by_bisection(x: &[f64], d: &[bool]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let t: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
    let y: Vec<f64> = d.iter().map(|&b| f64::from(u8::from(b))).collect();
    let intercept = |s: f64| {
        bisect(-60.0, 60.0, |a| {
            t.iter().zip(&y).map(|(t, y)| y - sigmoid(a + s * t)).sum::<f64>()
        })
    };
    let slope = bisect(-30.0, 30.0, |s| {
        let a = intercept(s);
        t.iter().zip(&y).map(|(t, y)| (y - sigmoid(a + s * t)) * t).sum::<f64>()
    });
    let a = intercept(slope);
    (a - slope * m / sd, slope / sd)
}

fn criterion_10() -> Outcome {
    let mut rng = rng_stream(10, "acceptance-eval");
    let mut auc_exact = 0;
    for _ in 0..50 {
        let n = rng.random_range(4..40);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 7.0).collect();
        let mut y: Vec<Label> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        y[0] = 0;
        y[1] = 1;
        if auc(&s, &y).unwrap() == auc_pairs(&s, &y) {
            auc_exact += 1;
        }
    }

    let mut youden_ok = 0;
    for _ in 0..50 {
        let n = rng.random_range(5..60);
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut y: Vec<Label> = s.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        y[0] = 0;
        y[1] = 1;
        let set = ScoredSet {
            scores: s.clone(),
            labels: y.clone(),
            ages_years: vec![50.0; n],
            z: vec![0.5; n],
        };
        if (youden_threshold(&set).unwrap().youden_j - youden_sweep(&s, &y)).abs() < 1e-12 {
            youden_ok += 1;
        }
    }

    let mut compared = 0;
    let mut worst = 0.0f64;
    while compared < 20 {
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(20.0..90.0)).collect();
        let d: Vec<bool> = x
            .iter()
            .map(|&age| rng.random::<f64>() < sigmoid(-2.0 + 0.04 * age))
            .collect();
        let fit = fit_logistic_1d(&x, &d);
        if fit.quasi_separation {
            continue;
        }
        let (_, slope) = logistic_by_bisection(&x, &d);
        worst = worst.max((fit.slope - slope).abs());
        compared += 1;
    }
    outcome(
        auc_exact == 50 && youden_ok == 50 && worst < 1e-6,
        format!("AUC exact {auc_exact}/50; Youden {youden_ok}/50; logistic slope max diff {worst:.2e} on 20 fits"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} [{}] {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    record(1, "metric formula fidelity", &mut criterion_1);
    record(2, "penalty gradient vs finite differences", &mut criterion_2);
    record(3, "WOLS vs normal equations", &mut criterion_3);
    record(4, "Huber fit and affinity contract", &mut criterion_4);
    record(5, "coverage score and gating", &mut criterion_5);

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let manifest = |dir: &Path| Manifest {
        output_dir: dir.to_path_buf(),
        variants: Variant::ALL.to_vec(),
        ..Manifest::default()
    };
    let m = manifest(first.path());
    let started = Instant::now();
    cmd_generate(&m).unwrap();
    let run = cmd_run(&m).unwrap();
    let matrix_secs = started.elapsed().as_secs_f64();
    println!(
        "matrix: {} cells ({} failed) in {matrix_secs:.1}s",
        run.cells.len(),
        run.n_failed()
    );
    let cells = Cells {
        reports: run.cells.iter().filter_map(|c| c.report.as_ref()).collect(),
    };

    record(6, "warm-up trend emergence", &mut || criterion_6(first.path(), &m));
    record(7, "end-to-end mitigation", &mut || criterion_7(&cells, &m));
    record(8, "shift robustness vs resampled", &mut || criterion_8(&cells));
    record(9, "ablation ordering", &mut || criterion_9(&cells, &m));
    record(10, "evaluation oracles", &mut criterion_10);
    record(11, "manifest determinism", &mut || {
        let m2 = manifest(second.path());
        cmd_generate(&m2).unwrap();
        cmd_run(&m2).unwrap();
        let a = std::fs::read(first.path().join("summary.csv")).unwrap();
        let b = std::fs::read(second.path().join("summary.csv")).unwrap();
        outcome(a == b, format!("summary.csv byte-identical across two executions: {}", a == b))
    });

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
