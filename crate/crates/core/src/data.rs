//! Samples, datasets and their CSV representation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label.
pub type Label = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub age_years: f64,
    /// Age min-max normalized against the pool anchors.
    pub z: f64,
    pub y: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub age_min: f64,
    pub age_max: f64,
}

impl Dataset {
    /// Builds a dataset, checking labels and feature dimensions. Anchors are
    /// taken from the data and `z` is left as supplied; call
    /// [`normalize_ages`] to (re)compute it.
    pub fn new(samples: Vec<Sample>, feature_dim: usize) -> Result<Self> {
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::ShapeMismatch {
                    expected: feature_dim,
                    got: s.features.len(),
                });
            }
            if s.y > 1 {
                return Err(Error::Parse(format!("sample {} has label {}", s.id, s.y)));
            }
        }
        let (age_min, age_max) = age_range(&samples);
        Ok(Self {
            samples,
            feature_dim,
            age_min,
            age_max,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn zs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.z).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Fraction of positive labels; 0 for an empty dataset.
    pub fn prevalence(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.y == 1).count() as f64 / self.samples.len() as f64
    }

    /// A derived split carrying the same normalization anchors.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            feature_dim: self.feature_dim,
            age_min: self.age_min,
            age_max: self.age_max,
        }
    }

    /// Inverse of the normalization: age in years for a normalized age.
    pub fn denormalize(&self, z: f64) -> f64 {
        self.age_min + z * (self.age_max - self.age_min)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id,age_years,z,y");
        for j in 0..self.feature_dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{},{},{}", s.id, s.age_years, s.z, s.y);
            for f in &s.features {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV format written by [`Dataset::write_csv`]. The `z`
    /// column is kept verbatim; anchors must be supplied by the caller since
    /// a split alone cannot recover the pool range.
    pub fn read_csv(path: &Path, age_min: f64, age_max: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::from_csv_str(&text)?;
        ds.age_min = age_min;
        ds.age_max = age_max;
        Ok(ds)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.len() < 4
            || &headers[0] != "id"
            || &headers[1] != "age_years"
            || &headers[2] != "z"
            || &headers[3] != "y"
        {
            return Err(Error::Parse("expected header id,age_years,z,y,f0,...".into()));
        }
        let feature_dim = headers.len() - 4;
        for (j, h) in headers.iter().skip(4).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::Parse(format!("unexpected feature column {h}")));
            }
        }
        let num = |field: &str| -> Result<f64> {
            field
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("not a number: {field:?}")))
        };
        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record?;
            let id = record[0]
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad id {:?}", &record[0])))?;
            let y = match &record[3] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Parse(format!("bad label {other:?}"))),
            };
            let features = (4..record.len())
                .map(|j| num(&record[j]))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                features,
                age_years: num(&record[1])?,
                z: num(&record[2])?,
                y,
            });
        }
        Dataset::new(samples, feature_dim)
    }
}

fn age_range(samples: &[Sample]) -> (f64, f64) {
    samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.age_years), hi.max(s.age_years))
    })
}

/// Min-max normalizes ages against the pool's own range and stores the
/// anchors on the returned dataset.
pub fn normalize_ages(pool: &Dataset) -> Result<Dataset> {
    let (lo, hi) = age_range(&pool.samples);
    if pool.samples.is_empty() || hi <= lo {
        return Err(Error::DegenerateAges);
    }
    let span = hi - lo;
    let samples = pool
        .samples
        .iter()
        .map(|s| Sample {
            z: ((s.age_years - lo) / span).clamp(0.0, 1.0),
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        samples,
        feature_dim: pool.feature_dim,
        age_min: lo,
        age_max: hi,
    })
}

/// Train / validation / test partition of one pool under one age shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub gamma: f64,
    pub seed: u64,
}

impl SplitBundle {
    /// True when no id appears in more than one split.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        [&self.train, &self.validation, &self.test]
            .iter()
            .flat_map(|d| d.samples.iter())
            .all(|s| seen.insert(s.id))
    }
}
