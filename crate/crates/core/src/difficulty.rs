//! Per-sample difficulty `g = |p - y|` and binned age-difficulty trends.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::stats::{mean, pearson_checked, sample_sd};

pub fn sample_difficulty(p: f64, y: Label) -> f64 {
    (p - f64::from(y)).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub sample_id: u64,
    pub g: f64,
    pub z: f64,
    pub y: Label,
}

/// Evaluation pass over `dataset` with a fixed parameter snapshot.
pub fn collect_difficulties(model: &Classifier, dataset: &Dataset) -> Result<Vec<DifficultyRecord>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(DifficultyRecord {
                sample_id: s.id,
                g: sample_difficulty(model.forward(&s.features)?, s.y),
                z: s.z,
                y: s.y,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendBin {
    pub bin: usize,
    pub center: f64,
    pub mean_g: f64,
    pub sem: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrend {
    pub label: Label,
    /// Non-empty bins only.
    pub bins: Vec<TrendBin>,
    /// Pearson r between bin centers and bin means; 0 when degenerate.
    pub r: f64,
    /// Set when bin means (or centers) have zero variance.
    pub degenerate: bool,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub n_bins: usize,
    /// Indexed by label.
    pub labels: [LabelTrend; 2],
}

pub const DEFAULT_BINS: usize = 10;

fn label_trend(records: &[&DifficultyRecord], label: Label, n_bins: usize) -> LabelTrend {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for r in records {
        let b = ((r.z * n_bins as f64).floor() as usize).min(n_bins - 1);
        groups[b].push(r.g);
    }
    let width = 1.0 / n_bins as f64;
    let bins: Vec<TrendBin> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(b, g)| TrendBin {
            bin: b,
            center: (b as f64 + 0.5) * width,
            mean_g: mean(g),
            sem: sample_sd(g) / (g.len() as f64).sqrt(),
            count: g.len(),
        })
        .collect();
    let xs: Vec<f64> = bins.iter().map(|b| b.center).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.mean_g).collect();
    let r = pearson_checked(&xs, &ys);
    let (slope, intercept) = if xs.len() >= 2 {
        let mx = mean(&xs);
        let my = mean(&ys);
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (slope, my - slope * mx)
    } else {
        (0.0, ys.first().copied().unwrap_or(0.0))
    };
    LabelTrend {
        label,
        bins,
        r: r.unwrap_or(0.0),
        degenerate: r.is_none(),
        slope,
        intercept,
    }
}

/// Equal-width z bins per label with bin means, per-sample SEM and a
/// correlation of bin means against bin centers.
pub fn trend_report(records: &[DifficultyRecord], n_bins: usize) -> Result<TrendReport> {
    if n_bins < 3 {
        return Err(Error::InvalidConfig("trend report needs at least 3 bins".into()));
    }
    let mut per_label = [Vec::new(), Vec::new()];
    for r in records {
        per_label[usize::from(r.y)].push(r);
    }
    for (label, subset) in per_label.iter().enumerate() {
        if subset.is_empty() {
            return Err(Error::EmptyLabelSubset(label as Label));
        }
    }
    Ok(TrendReport {
        n_bins,
        labels: [
            label_trend(&per_label[0], 0, n_bins),
            label_trend(&per_label[1], 1, n_bins),
        ],
    })
}

impl TrendReport {
    /// CSV with columns `bin,label,mean_g,sem,count`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("bin,label,mean_g,sem,count\n");
        for lt in &self.labels {
            for b in &lt.bins {
                let _ = writeln!(out, "{},{},{},{},{}", b.bin, lt.label, b.mean_g, b.sem, b.count);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize_ages, Sample};
    use crate::model::Architecture;

    fn rec(id: u64, z: f64, g: f64, y: Label) -> DifficultyRecord {
        DifficultyRecord { sample_id: id, g, z, y }
    }

    #[test]
    fn difficulty_definition() {
        assert!((sample_difficulty(0.8, 1) - 0.2).abs() < 1e-15);
        assert_eq!(sample_difficulty(0.8, 0), 0.8);
        assert_eq!(sample_difficulty(0.5, 0), 0.5);
        assert_eq!(sample_difficulty(0.5, 1), 0.5);
    }

    fn tiny_dataset() -> Dataset {
        let samples = (0..20)
            .map(|i| Sample {
                id: i,
                features: vec![if i % 2 == 0 { 5.0 } else { -5.0 }, i as f64],
                age_years: 20.0 + i as f64,
                z: 0.0,
                y: u8::from(i % 2 == 0),
            })
            .collect();
        normalize_ages(&Dataset::new(samples, 2).unwrap()).unwrap()
    }

    #[test]
    fn untrained_model_gives_half() {
        let ds = tiny_dataset();
        let m = Classifier::zeros(Architecture::Linear, 2);
        let recs = collect_difficulties(&m, &ds).unwrap();
        assert_eq!(recs.len(), ds.len());
        assert!(recs.iter().all(|r| r.g == 0.5));
    }

    #[test]
    fn oracle_model_is_easy_and_pass_is_pure() {
        let ds = tiny_dataset();
        let mut m = Classifier::zeros(Architecture::Linear, 2);
        m.params[0] = 10.0;
        let recs = collect_difficulties(&m, &ds).unwrap();
        assert!(recs.iter().all(|r| r.g < 0.01 && r.g > 0.0));
        assert_eq!(recs, collect_difficulties(&m, &ds).unwrap());
    }

    #[test]
    fn perfectly_linear_trends() {
        let mut recs = Vec::new();
        for i in 0..200 {
            let z = (i as f64 + 0.5) / 200.0;
            recs.push(rec(i, z, 0.2 + 0.5 * z, 0));
            recs.push(rec(1000 + i, z, 0.8 - 0.4 * z, 1));
        }
        // Each bin's mean z equals its center for this spacing.
        let rep = trend_report(&recs, 10).unwrap();
        assert!((rep.labels[0].r - 1.0).abs() < 1e-12);
        assert!((rep.labels[1].r + 1.0).abs() < 1e-12);
        assert!(rep.labels[0].slope > 0.0 && rep.labels[1].slope < 0.0);
        let total: usize = rep.labels.iter().flat_map(|l| &l.bins).map(|b| b.count).sum();
        assert_eq!(total, recs.len());
    }

    #[test]
    fn constant_difficulty_is_flagged() {
        let recs: Vec<_> = (0..50)
            .map(|i| rec(i, i as f64 / 49.0, 0.3, (i % 2) as u8))
            .collect();
        let rep = trend_report(&recs, 5).unwrap();
        for lt in &rep.labels {
            assert_eq!(lt.r, 0.0);
            assert!(lt.degenerate);
        }
    }

    #[test]
    fn errors() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, i as f64 / 9.0, 0.3, 0)).collect();
        assert!(matches!(trend_report(&recs, 10), Err(Error::EmptyLabelSubset(1))));
        assert!(trend_report(&recs, 2).is_err());
    }

    #[test]
    fn empty_bins_are_skipped() {
        let recs = vec![
            rec(0, 0.05, 0.1, 0),
            rec(1, 0.95, 0.9, 0),
            rec(2, 0.5, 0.4, 1),
        ];
        let rep = trend_report(&recs, 10).unwrap();
        assert_eq!(rep.labels[0].bins.len(), 2);
        assert_eq!(rep.labels[1].bins.len(), 1);
        let csv = rep.to_csv_string();
        assert!(csv.starts_with("bin,label,mean_g,sem,count\n0,0,0.1,0,1\n"));
    }
}
