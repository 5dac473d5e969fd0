//! Operating point and age-separation metrics.
//!
//! The operating threshold maximizes Youden's J on validation. On test, the
//! thresholded decision is regressed on age (in years) with a univariate
//! logistic model, separately for positives (`s+`, the TPR trend) and
//! negatives (`s-`, the FPR trend). `Sep = (|s+| + |s-|) / 2` and
//! `dSep10 = exp(10 * Sep) - 1` is the relative change per decade of age.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::stats::sigmoid;

/// Scores with the labels and ages they were produced for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub ages_years: Vec<f64>,
    pub z: Vec<f64>,
}

impl ScoredSet {
    pub fn from_model(model: &Classifier, data: &Dataset) -> Result<Self> {
        let scores = data
            .samples
            .iter()
            .map(|s| model.forward(&s.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores,
            labels: data.labels(),
            ages_years: data.samples.iter().map(|s| s.age_years).collect(),
            z: data.zs(),
        })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// Rank-based (Mann-Whitney) AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares the average rank.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub youden_j: f64,
    /// Set when no threshold achieves positive J.
    pub degenerate: bool,
}

/// Threshold maximizing `TPR - FPR` for decisions `score >= threshold`.
///
/// Candidates are every distinct score and every midpoint between
/// consecutive distinct scores; ties go to the smaller threshold, so a clean
/// gap resolves to its midpoint.
pub fn youden_threshold(validation: &ScoredSet) -> Result<OperatingPoint> {
    let (n_pos, n_neg) = validation.counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut pos: Vec<f64> = Vec::with_capacity(n_pos);
    let mut neg: Vec<f64> = Vec::with_capacity(n_neg);
    for (&s, &y) in validation.scores.iter().zip(&validation.labels) {
        if y == 1 {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut distinct = validation.scores.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let rate_at_or_above = |sorted: &[f64], t: f64| {
        (sorted.len() - sorted.partition_point(|&s| s < t)) as f64 / sorted.len() as f64
    };
    let mut best = OperatingPoint {
        threshold: distinct[0],
        youden_j: f64::NEG_INFINITY,
        degenerate: false,
    };
    let mut consider = |t: f64| {
        let j = rate_at_or_above(&pos, t) - rate_at_or_above(&neg, t);
        if j > best.youden_j {
            best.threshold = t;
            best.youden_j = j;
        }
    };
    for (k, &s) in distinct.iter().enumerate() {
        if k > 0 {
            consider(0.5 * (distinct[k - 1] + s));
        }
        consider(s);
    }
    best.degenerate = best.youden_j <= 0.0;
    Ok(best)
}

pub const MAX_LOGISTIC_ITERATIONS: usize = 100;
pub const LOGISTIC_GRAD_TOLERANCE: f64 = 1e-10;
/// Magnitude reported for a slope whose maximum-likelihood estimate diverges.
pub const SEPARATION_CLAMP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Decisions were constant or perfectly separated by age; `slope` is
    /// then 0 (constant) or clamped to +-0.5.
    pub quasi_separation: bool,
}

/// Univariate logistic regression `P(d = 1 | x) = sigmoid(a + s x)` by
/// Newton-Raphson. The mean-gradient norm must fall below 1e-10.
pub fn fit_logistic_1d(x: &[f64], d: &[bool]) -> LogisticFit {
    let n = x.len();
    let ones = d.iter().filter(|&&v| v).count();
    if n == 0 || ones == 0 || ones == n {
        return LogisticFit {
            intercept: 0.0,
            slope: 0.0,
            iterations: 0,
            converged: false,
            quasi_separation: true,
        };
    }
    let max_of = |want: bool| {
        x.iter()
            .zip(d)
            .filter(|(_, &v)| v == want)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let min_of = |want: bool| {
        x.iter()
            .zip(d)
            .filter(|(_, &v)| v == want)
            .map(|(&x, _)| x)
            .fold(f64::INFINITY, f64::min)
    };
    let clamped = |slope: f64| LogisticFit {
        intercept: 0.0,
        slope,
        iterations: 0,
        converged: false,
        quasi_separation: true,
    };
    if max_of(false) <= min_of(true) {
        return clamped(SEPARATION_CLAMP);
    }
    if max_of(true) <= min_of(false) {
        return clamped(-SEPARATION_CLAMP);
    }

    let mean_x = x.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = x.iter().map(|v| v - mean_x).collect();
    let rate = ones as f64 / n as f64;
    let mut a = (rate / (1.0 - rate)).ln();
    let mut s = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..=MAX_LOGISTIC_ITERATIONS {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let p = sigmoid(a + s * xc[i]);
            let r = f64::from(u8::from(d[i])) - p;
            let w = p * (1.0 - p);
            g0 += r;
            g1 += r * xc[i];
            h00 += w;
            h01 += w * xc[i];
            h11 += w * xc[i] * xc[i];
        }
        let nf = n as f64;
        if (g0 * g0 + g1 * g1).sqrt() / nf < LOGISTIC_GRAD_TOLERANCE {
            converged = true;
            iterations = it;
            break;
        }
        if it == MAX_LOGISTIC_ITERATIONS {
            iterations = it;
            break;
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > 0.0) {
            iterations = it;
            break;
        }
        a += (h11 * g0 - h01 * g1) / det;
        s += (h00 * g1 - h01 * g0) / det;
    }
    if !s.is_finite() || s.abs() > SEPARATION_CLAMP {
        return clamped(if s < 0.0 { -SEPARATION_CLAMP } else { SEPARATION_CLAMP });
    }
    LogisticFit {
        intercept: a - s * mean_x,
        slope: s,
        iterations,
        converged,
        quasi_separation: false,
    }
}

/// Per-year age slopes of the thresholded decision on positives (`s+`) and
/// negatives (`s-`).
pub fn separation_coeffs(test: &ScoredSet, threshold: f64) -> (LogisticFit, LogisticFit) {
    let fit_for = |label: Label| {
        let (ages, decisions): (Vec<f64>, Vec<bool>) = test
            .labels
            .iter()
            .zip(&test.scores)
            .zip(&test.ages_years)
            .filter(|((&y, _), _)| y == label)
            .map(|((_, &p), &age)| (age, p >= threshold))
            .unzip();
        fit_logistic_1d(&ages, &decisions)
    };
    (fit_for(1), fit_for(0))
}

/// `(Sep, dSep10)` with `dSep10` in percent.
pub fn delta_sep10(s_plus: f64, s_minus: f64) -> (f64, f64) {
    let sep = 0.5 * (s_plus.abs() + s_minus.abs());
    (sep, 100.0 * (10.0 * sep).exp_m1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub gamma: f64,
    pub seed: u64,
    pub auc: f64,
    pub threshold: f64,
    pub youden_j: f64,
    pub threshold_degenerate: bool,
    pub s_plus: f64,
    pub s_minus: f64,
    pub s_plus_quasi_separation: bool,
    pub s_minus_quasi_separation: bool,
    pub sep: f64,
    /// Percent.
    pub delta_sep10: f64,
    /// AUC difference to the ERM run with the same gamma and seed, in
    /// percentage points.
    pub delta_auc: Option<f64>,
    pub n_test: usize,
    pub test_prevalence: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Threshold from validation, metrics from test. A test set whose scores are
/// all tied yields AUC 0.5.
pub fn evaluate_model(
    model: &Classifier,
    validation: &Dataset,
    test: &Dataset,
    method: &str,
    gamma: f64,
    seed: u64,
) -> Result<EvalReport> {
    let val = ScoredSet::from_model(model, validation)?;
    let tst = ScoredSet::from_model(model, test)?;
    let op = youden_threshold(&val)?;
    let auc = auc(&tst.scores, &tst.labels)?;
    let (plus, minus) = separation_coeffs(&tst, op.threshold);
    let (sep, dsep) = delta_sep10(plus.slope, minus.slope);
    Ok(EvalReport {
        method: method.to_string(),
        gamma,
        seed,
        auc,
        threshold: op.threshold,
        youden_j: op.youden_j,
        threshold_degenerate: op.degenerate,
        s_plus: plus.slope,
        s_minus: minus.slope,
        s_plus_quasi_separation: plus.quasi_separation,
        s_minus_quasi_separation: minus.quasi_separation,
        sep,
        delta_sep10: dsep,
        delta_auc: None,
        n_test: test.len(),
        test_prevalence: test.prevalence(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use rand::Rng;

    /// O(n^2) pair-counting AUC.
    fn auc_pairs(scores: &[f64], labels: &[Label]) -> f64 {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        hits += 1.0;
                    } else if scores[i] == scores[j] {
                        hits += 0.5;
                    }
                }
            }
        }
        hits / pairs
    }

    fn scored(scores: Vec<f64>, labels: Vec<Label>) -> ScoredSet {
        let n = scores.len();
        ScoredSet {
            scores,
            labels,
            ages_years: vec![50.0; n],
            z: vec![0.5; n],
        }
    }

    #[test]
    fn auc_separated_and_single_class() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_chance_level() {
        let mut rng = rng_stream(1, "auc-chance");
        let s: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        let y: Vec<Label> = (0..5000).map(|_| u8::from(rng.random::<bool>())).collect();
        assert!((auc(&s, &y).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = rng_stream(2, "auc-pairs");
        for _ in 0..50 {
            let n = rng.random_range(4..40);
            // Coarse grid forces ties.
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
            let mut y: Vec<Label> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
            y[0] = 0;
            y[1] = 1;
            assert_eq!(auc(&s, &y).unwrap(), auc_pairs(&s, &y));
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let mut rng = rng_stream(3, "auc-mono");
        let s: Vec<f64> = (0..300).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<Label> = s.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        let base = auc(&s, &y).unwrap();
        let logit: Vec<f64> = s.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let affine: Vec<f64> = s.iter().map(|p| 3.0 * p - 7.0).collect();
        assert_eq!(auc(&logit, &y).unwrap(), base);
        assert_eq!(auc(&affine, &y).unwrap(), base);
    }

    #[test]
    fn youden_gap_midpoint() {
        let set = scored(vec![0.1, 0.3, 0.4, 0.6, 0.7, 0.95], vec![0, 0, 0, 1, 1, 1]);
        let op = youden_threshold(&set).unwrap();
        assert_eq!(op.threshold, 0.5);
        assert_eq!(op.youden_j, 1.0);
        assert!(!op.degenerate);
    }

    #[test]
    fn youden_constant_scores() {
        let set = scored(vec![0.4; 6], vec![0, 1, 0, 1, 0, 1]);
        let op = youden_threshold(&set).unwrap();
        assert_eq!(op.threshold, 0.4);
        assert_eq!(op.youden_j, 0.0);
        assert!(op.degenerate);
        assert!(youden_threshold(&scored(vec![0.1, 0.2], vec![0, 0])).is_err());
    }

    /// Exhaustive sweep over a fine grid plus every observed score.
    fn youden_sweep(set: &ScoredSet) -> f64 {
        let mut candidates: Vec<f64> = (0..=2000).map(|k| k as f64 / 2000.0).collect();
        candidates.extend(&set.scores);
        let (n_pos, n_neg) = set.counts();
        candidates
            .into_iter()
            .map(|t| {
                let tp = set.scores.iter().zip(&set.labels).filter(|(&s, &y)| y == 1 && s >= t).count();
                let fp = set.scores.iter().zip(&set.labels).filter(|(&s, &y)| y == 0 && s >= t).count();
                tp as f64 / n_pos as f64 - fp as f64 / n_neg as f64
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn youden_matches_exhaustive_sweep() {
        let mut rng = rng_stream(4, "youden");
        for _ in 0..50 {
            let n = rng.random_range(5..60);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut y: Vec<Label> = s.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
            y[0] = 0;
            y[1] = 1;
            let set = scored(s, y);
            let op = youden_threshold(&set).unwrap();
            assert!((op.youden_j - youden_sweep(&set)).abs() < 1e-12);
        }
    }

    /// Independent optimizer: coarse grid search followed by gradient
    /// ascent with backtracking on the mean log-likelihood, run in
    /// standardized age coordinates and mapped back.
    fn logistic_by_gradient_ascent(x: &[f64], d: &[bool]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        let t: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
        let ll = |a: f64, s: f64| {
            t.iter()
                .zip(d)
                .map(|(&t, &d)| {
                    let p = sigmoid(a + s * t).clamp(1e-300, 1.0 - 1e-16);
                    if d {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum::<f64>()
                / n
        };
        let mut best = (0.0, 0.0, f64::NEG_INFINITY);
        for ia in -40..=40 {
            for is in -40..=40 {
                let (a, s) = (ia as f64 * 0.1, is as f64 * 0.1);
                let v = ll(a, s);
                if v > best.2 {
                    best = (a, s, v);
                }
            }
        }
        let (mut a, mut s) = (best.0, best.1);
        let mut step = 1.0;
        for _ in 0..100_000 {
            let (mut ga, mut gs) = (0.0, 0.0);
            for (&ti, &di) in t.iter().zip(d) {
                let r = f64::from(u8::from(di)) - sigmoid(a + s * ti);
                ga += r;
                gs += r * ti;
            }
            ga /= n;
            gs /= n;
            if (ga * ga + gs * gs).sqrt() < 1e-13 {
                break;
            }
            let cur = ll(a, s);
            loop {
                let (na, ns) = (a + step * ga, s + step * gs);
                if ll(na, ns) >= cur {
                    a = na;
                    s = ns;
                    step *= 1.2;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    break;
                }
            }
        }
        (a - s * m / sd, s / sd)
    }

    #[test]
    fn irls_matches_independent_optimizer() {
        let mut rng = rng_stream(5, "irls");
        for _ in 0..20 {
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(20.0..90.0)).collect();
            let d: Vec<bool> = x
                .iter()
                .map(|&age| rng.random::<f64>() < sigmoid(-2.0 + 0.04 * age))
                .collect();
            let fit = fit_logistic_1d(&x, &d);
            if fit.quasi_separation {
                continue;
            }
            let (a, s) = logistic_by_gradient_ascent(&x, &d);
            assert!((fit.slope - s).abs() < 1e-6, "{} vs {s}", fit.slope);
            assert!((fit.intercept - a).abs() < 1e-5, "{} vs {a}", fit.intercept);
        }
    }

    #[test]
    fn recovers_generative_slope() {
        let mut rng = rng_stream(6, "recover");
        let x: Vec<f64> = (0..10_000).map(|_| rng.random_range(20.0..90.0)).collect();
        let d: Vec<bool> = x
            .iter()
            .map(|&age| rng.random::<f64>() < sigmoid(-2.0 + 0.03 * age))
            .collect();
        let fit = fit_logistic_1d(&x, &d);
        assert!(fit.converged);
        assert!((fit.slope - 0.03).abs() < 0.003, "{}", fit.slope);
        // Decade identity.
        let decade = (10.0 * fit.slope).exp() - 1.0;
        assert!((decade - (0.3f64.exp() - 1.0)).abs() < 0.04);
    }

    #[test]
    fn null_slope_within_three_standard_errors() {
        let mut rng = rng_stream(7, "null");
        let x: Vec<f64> = (0..5000).map(|_| rng.random_range(20.0..90.0)).collect();
        let d: Vec<bool> = x.iter().map(|_| rng.random::<f64>() < 0.4).collect();
        let fit = fit_logistic_1d(&x, &d);
        let mean_x = x.iter().sum::<f64>() / x.len() as f64;
        let sxx: f64 = x.iter().map(|v| (v - mean_x).powi(2)).sum();
        let se = 1.0 / (0.24 * sxx).sqrt();
        assert!(fit.slope.abs() < 3.0 * se);
    }

    #[test]
    fn separation_is_flagged_and_clamped() {
        let x = [20.0, 30.0, 40.0, 50.0, 60.0];
        let f = fit_logistic_1d(&x, &[false, false, true, true, true]);
        assert!(f.quasi_separation);
        assert_eq!(f.slope, SEPARATION_CLAMP);
        let f = fit_logistic_1d(&x, &[true, true, false, false, false]);
        assert_eq!(f.slope, -SEPARATION_CLAMP);
        let f = fit_logistic_1d(&x, &[true; 5]);
        assert!(f.quasi_separation);
        assert_eq!(f.slope, 0.0);
    }

    #[test]
    fn age_units_rescale_slope() {
        let mut rng = rng_stream(8, "units");
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(20.0..90.0)).collect();
        let d: Vec<bool> = x
            .iter()
            .map(|&age| rng.random::<f64>() < sigmoid(-1.0 + 0.02 * age))
            .collect();
        let k = 12.0;
        let xk: Vec<f64> = x.iter().map(|v| v * k).collect();
        let s = fit_logistic_1d(&x, &d).slope;
        let sk = fit_logistic_1d(&xk, &d).slope;
        assert!((sk * k - s).abs() < 1e-9 * s.abs().max(1.0));
    }

    #[test]
    fn delta_sep10_reported_values() {
        assert_eq!(delta_sep10(0.0, 0.0), (0.0, 0.0));
        let (sep, d) = delta_sep10(1.35e-2, -1.89e-2);
        assert!((sep - 1.62e-2).abs() < 1e-15);
        assert!((d - 17.59).abs() < 0.01, "{d}");
        let (_, d) = delta_sep10(0.56e-2, 0.89e-2);
        assert!((d - 7.52).abs() < 0.02 && (d - 7.51).abs() < 0.02, "{d}");
    }

    #[test]
    fn delta_sep10_is_monotone() {
        let mut prev = -1.0;
        for k in 0..100 {
            let (_, d) = delta_sep10(k as f64 * 1e-3, 0.01);
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport {
            method: "ours".into(),
            gamma: 4.0,
            seed: 2,
            auc: 0.8765432101234567,
            threshold: 0.4321,
            youden_j: 0.5,
            threshold_degenerate: false,
            s_plus: 0.0123,
            s_minus: -0.0045,
            s_plus_quasi_separation: false,
            s_minus_quasi_separation: true,
            sep: 0.0084,
            delta_sep10: 8.76,
            delta_auc: Some(-0.15),
            n_test: 2000,
            test_prevalence: 0.61,
        };
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
