//! Synthetic linear-factor datasets and CSV ingestion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_std, pearson};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// Number of latent factors.
    pub r: usize,
    /// Number of true signals.
    pub s: usize,
    pub amplitude: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_scale() -> f64 {
    1.0
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.s == 0 || self.s > self.p {
            return Err(Error::Config(format!(
                "signal count s={} must satisfy 0 < s <= p={}",
                self.s, self.p
            )));
        }
        if self.r == 0 {
            return Err(Error::Config("factor count r must be at least 1".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config("amplitude must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Feature matrix, response and optional ground truth.
///
/// `true_support` is stored 0-indexed and sorted; file formats use 1-indexed
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub covariates: Option<DMatrix<f64>>,
    pub true_support: Option<Vec<usize>>,
    pub beta: Option<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub task: Task,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates.as_ref().map_or(0, |c| c.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.n() {
            return Err(Error::Dimension {
                context: "response length",
                expected: self.n(),
                got: self.y.len(),
            });
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("dataset contains NaN or Inf".into()));
        }
        if let Some(c) = &self.covariates {
            if c.nrows() != self.n() {
                return Err(Error::Dimension {
                    context: "covariate rows",
                    expected: self.n(),
                    got: c.nrows(),
                });
            }
        }
        if let (Some(support), Some(beta)) = (&self.true_support, &self.beta) {
            let on: HashSet<usize> = support.iter().copied().collect();
            for (j, b) in beta.iter().enumerate() {
                if (*b != 0.0) != on.contains(&j) {
                    return Err(Error::Config(format!(
                        "beta and support disagree at feature {}",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write the dataset as CSV (features, covariates, then `y`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let cov_names: Vec<String> = (1..=self.covariate_dim()).map(|c| format!("C_{c}")).collect();
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.extend(cov_names.iter().map(String::as_str));
        header.push("y");
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            row.clear();
            row.extend(self.x.row(i).iter().map(|v| v.to_string()));
            if let Some(c) = &self.covariates {
                row.extend(c.row(i).iter().map(|v| v.to_string()));
            }
            row.push(self.y[i].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Sidecar JSON with the generating seed and the ground truth.
    pub fn write_truth_json(&self, path: &Path) -> Result<()> {
        let truth = GroundTruth {
            seed: self.seed,
            support: self
                .true_support
                .as_ref()
                .map(|s| s.iter().map(|j| j + 1).collect())
                .unwrap_or_default(),
            beta: self.beta.clone().unwrap_or_default(),
        };
        write_json(path, &truth)
    }
}

/// Sidecar record for simulated data. `support` is 1-indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: Option<u64>,
    pub support: Vec<usize>,
    pub beta: Vec<f64>,
}

impl GroundTruth {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn support_zero_based(&self) -> Vec<usize> {
        self.support.iter().map(|j| j - 1).collect()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    // Filled row by row so the draw order is independent of storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Draw `X = F Λ + E` and `y = X β + ε` (or a logistic response for the
/// binary task) with `s` random ±A signals.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, p, r) = (cfg.n, cfg.p, cfg.r);
    let factors = normal_matrix(n, r, &mut seed::rng_for(cfg.seed, seed::TAG_FACTORS));
    let loadings = normal_matrix(r, p, &mut seed::rng_for(cfg.seed, seed::TAG_LOADINGS));
    let noise = normal_matrix(n, p, &mut seed::rng_for(cfg.seed, seed::TAG_NOISE_X));
    let x = &factors * &loadings + noise;

    let mut rng = seed::rng_for(cfg.seed, seed::TAG_SUPPORT);
    let mut support = index::sample(&mut rng, p, cfg.s).into_vec();
    support.sort_unstable();
    let mut beta = vec![0.0; p];
    for &j in &support {
        beta[j] = if rng.random::<bool>() {
            cfg.amplitude
        } else {
            -cfg.amplitude
        };
    }

    let mut rng = seed::rng_for(cfg.seed, seed::TAG_RESPONSE);
    let y = (0..n)
        .map(|i| {
            let eta: f64 = support.iter().map(|&j| x[(i, j)] * beta[j]).sum();
            match cfg.task {
                Task::Regression => {
                    let eps: f64 = rng.sample(StandardNormal);
                    eta + cfg.noise_scale * eps
                }
                Task::Binary => {
                    if rng.random::<f64>() < sigmoid(eta) {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();

    let ds = Dataset {
        x,
        y,
        covariates: None,
        true_support: Some(support),
        beta: Some(beta),
        feature_names: default_feature_names(p),
        task: cfg.task,
        seed: Some(cfg.seed),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn default_feature_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("X_{j}")).collect()
}

/// Standardize each column in place to mean 0 and sample variance 1.
pub fn standardize_columns(x: &mut DMatrix<f64>, names: &[String]) -> Result<()> {
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let values: Vec<f64> = col.iter().copied().collect();
        let (mean, sd) = mean_std(&values);
        if sd.is_nan() || sd <= 0.0 {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("#{}", j + 1));
            return Err(Error::ConstantColumn(name));
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    Ok(())
}

/// Read a numeric CSV with a header row. Columns other than the response and
/// covariates become features, in header order.
pub fn load_csv(
    path: &Path,
    response_column: &str,
    covariate_columns: &[String],
    standardize: bool,
) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let response_idx = find(response_column)?;
    let covariate_idx: Vec<usize> = covariate_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| *i != response_idx && !covariate_idx.contains(i))
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Config("CSV has no feature columns".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parsed = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let cell = cell.trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NonNumeric {
                        row: r + 1,
                        column: header.get(c).cloned().unwrap_or_default(),
                        value: cell.to_string(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if parsed.len() != header.len() {
            return Err(Error::Dimension {
                context: "CSV row width",
                expected: header.len(),
                got: parsed.len(),
            });
        }
        rows.push(parsed);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Config("CSV has no data rows".into()));
    }

    let pick = |cols: &[usize]| DMatrix::from_fn(n, cols.len(), |i, j| rows[i][cols[j]]);
    let mut x = pick(&feature_idx);
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| header[i].clone()).collect();
    if standardize {
        standardize_columns(&mut x, &feature_names)?;
    }
    let covariates = (!covariate_idx.is_empty()).then(|| pick(&covariate_idx));
    let y: Vec<f64> = rows.iter().map(|r| r[response_idx]).collect();
    let task = if y.iter().all(|v| *v == 0.0 || *v == 1.0) {
        Task::Binary
    } else {
        Task::Regression
    };

    let ds = Dataset {
        x,
        y,
        covariates,
        true_support: None,
        beta: None,
        feature_names,
        task,
        seed: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// For each column, the largest Pearson correlation with any other column.
///
/// Zero-variance columns correlate as 0 with everything. Also applicable to
/// a trajectory matrix of importance vectors (records × features).
pub fn feature_correlation_profile(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.nrows() < 3 {
        return Err(Error::Config("correlation profile needs at least 3 rows".into()));
    }
    if x.ncols() < 2 {
        return Err(Error::Config("correlation profile needs at least 2 columns".into()));
    }
    let cols: Vec<Vec<f64>> = x.column_iter().map(|c| c.iter().copied().collect()).collect();
    let p = cols.len();
    let mut corr = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        for k in (j + 1)..p {
            let c = pearson(&cols[j], &cols[k]).unwrap_or(0.0);
            corr[(j, k)] = c;
            corr[(k, j)] = c;
        }
    }
    Ok((0..p)
        .map(|j| {
            (0..p)
                .filter(|&k| k != j)
                .map(|k| corr[(j, k)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}
