//! Second-order Gaussian knockoffs: single copies via the conditional law
//! `X̃ | X`, and multiple copies via sequential conditional independent
//! tuples (SCIT).
//!
//! Knockoff generation never sees the response.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{read_json, write_json};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_with_jitter, column_means, correlation_from_covariance, min_eigenvalue, psd_factor,
    sample_covariance,
};
use crate::seed;

const MIN_EIGENVALUE: f64 = 1e-6;

/// Gaussian feature model used to draw knockoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffModel {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Diagonal of the single-knockoff `diag(s)` term.
    pub s: DVector<f64>,
    /// Number of knockoff copies.
    pub copies: usize,
    /// Diagonal shrinkage weight that was applied to the sample covariance.
    pub shrinkage: f64,
}

#[derive(Serialize, Deserialize)]
struct KnockoffModelRecord {
    mu: Vec<f64>,
    #[serde(rename = "Sigma")]
    sigma: Vec<Vec<f64>>,
    s: Vec<f64>,
    #[serde(rename = "M")]
    copies: usize,
    shrinkage: f64,
}

impl KnockoffModel {
    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let rec = KnockoffModelRecord {
            mu: self.mu.iter().copied().collect(),
            sigma: self.sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            s: self.s.iter().copied().collect(),
            copies: self.copies,
            shrinkage: self.shrinkage,
        };
        write_json(path, &rec)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let rec: KnockoffModelRecord = read_json(path)?;
        let p = rec.mu.len();
        if rec.sigma.len() != p || rec.sigma.iter().any(|r| r.len() != p) || rec.s.len() != p {
            return Err(Error::Config("knockoff model JSON has inconsistent sizes".into()));
        }
        Ok(KnockoffModel {
            mu: DVector::from_vec(rec.mu),
            sigma: DMatrix::from_fn(p, p, |i, j| rec.sigma[i][j]),
            s: DVector::from_vec(rec.s),
            copies: rec.copies,
            shrinkage: rec.shrinkage,
        })
    }
}

/// Original features followed by the knockoff blocks, `[X | X̃¹ | … | X̃ᴹ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffAugmentedData {
    pub xaug: DMatrix<f64>,
    pub model: KnockoffModel,
    /// Per-feature variance of `X_j` removed by conditioning, so that
    /// `Cov(X_j, X̃_j) = Σ_jj − effective_s_j`. Equals `model.s` for single
    /// knockoffs; SCIT realizes its own values.
    pub effective_s: DVector<f64>,
}

impl KnockoffAugmentedData {
    pub fn p(&self) -> usize {
        self.model.p()
    }

    pub fn copies(&self) -> usize {
        self.xaug.ncols() / self.p() - 1
    }

    pub fn column_names(p: usize, copies: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=p).map(|j| format!("X_{j}")).collect();
        for m in 1..=copies {
            names.extend((1..=p).map(|j| format!("K{m}_{j}")));
        }
        names
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_augmented_csv(&self.xaug, self.p(), path)
    }
}

pub fn write_augmented_csv(xaug: &DMatrix<f64>, p: usize, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(KnockoffAugmentedData::column_names(p, xaug.ncols() / p - 1))?;
    for row in xaug.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an augmented matrix written by [`write_augmented_csv`]; returns the
/// matrix and the number of original features.
pub fn read_augmented_csv(path: &Path) -> Result<(DMatrix<f64>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let p = header.iter().filter(|h| h.starts_with("X_")).count();
    if p == 0 || header.len() % p != 0 {
        return Err(Error::Config("augmented CSV header is not [X | K1 | ... ]".into()));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (c, cell) in rec.iter().enumerate() {
            values.push(cell.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                row: r + 1,
                column: header.get(c).unwrap_or_default().to_string(),
                value: cell.to_string(),
            })?);
        }
        rows += 1;
    }
    Ok((DMatrix::from_row_slice(rows, header.len(), &values), p))
}

/// Fit mean, shrunk covariance and equicorrelated `s` for `copies` knockoffs.
pub fn fit_gaussian_model(x: &DMatrix<f64>, copies: usize) -> Result<KnockoffModel> {
    let (n, p) = x.shape();
    if p == 0 {
        return Err(Error::Config("no features to model".into()));
    }
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 samples, got {n}")));
    }
    if copies == 0 {
        return Err(Error::Config("knockoff copy count must be at least 1".into()));
    }
    let mu = column_means(x);
    let sample = sample_covariance(x);
    if let Some(j) = (0..p).find(|&j| sample[(j, j)].is_nan() || sample[(j, j)] <= MIN_EIGENVALUE) {
        return Err(Error::Numerical(format!("feature {} has (near) zero variance", j + 1)));
    }
    let (sigma, shrinkage) = shrink_to_min_eigenvalue(&sample);

    let corr = correlation_from_covariance(&sigma);
    let factor = (2.0 * min_eigenvalue(&corr)).clamp(0.0, 1.0);
    let s = DVector::from_iterator(p, (0..p).map(|j| sigma[(j, j)] * factor));
    Ok(KnockoffModel {
        mu,
        sigma,
        s,
        copies,
        shrinkage,
    })
}

/// Smallest weight `w` such that `(1 − w) S + w diag(S)` has minimum
/// eigenvalue at least 1e-6. λ_min is concave along the path, so the
/// feasible set is an interval ending at `w = 1` and bisection applies.
fn shrink_to_min_eigenvalue(sample: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let diag = DMatrix::from_diagonal(&sample.diagonal());
    let blend = |w: f64| sample * (1.0 - w) + &diag * w;
    if min_eigenvalue(sample) >= MIN_EIGENVALUE {
        return (sample.clone(), 0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if min_eigenvalue(&blend(mid)) >= MIN_EIGENVALUE {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (blend(hi), hi)
}

fn check_input(x: &DMatrix<f64>, model: &KnockoffModel) -> Result<()> {
    if x.ncols() != model.p() {
        return Err(Error::Dimension {
            context: "knockoff model features",
            expected: model.p(),
            got: x.ncols(),
        });
    }
    Ok(())
}

/// Draw one knockoff copy from `X̃ | X ~ N(X − (X − μ)Σ⁻¹D, 2D − DΣ⁻¹D)`.
pub fn sample_single_knockoffs(
    x: &DMatrix<f64>,
    model: &KnockoffModel,
    seed: u64,
) -> Result<KnockoffAugmentedData> {
    check_input(x, model)?;
    if model.copies != 1 {
        return Err(Error::Config(format!(
            "single knockoff sampling needs a model fitted with M=1, got M={}",
            model.copies
        )));
    }
    let (n, p) = x.shape();
    let d = DMatrix::from_diagonal(&model.s);
    let chol = cholesky_with_jitter(&model.sigma, "knockoff covariance")?;
    let sigma_inv_d = chol.solve(&d);
    let cond_cov = &d * 2.0 - &d * &sigma_inv_d;
    let mut cond_cov = cond_cov;
    crate::linalg::symmetrize(&mut cond_cov);
    let factor = psd_factor(&cond_cov, "knockoff conditional covariance")?;

    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.mu[j]);
    }
    let mean = x - centered * sigma_inv_d;

    let mut xaug = DMatrix::zeros(n, 2 * p);
    xaug.columns_mut(0, p).copy_from(x);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        // Per-row streams keep rows independent of generation order.
        let mut rng = seed::rng_for(seed, i as u64);
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let noise = &factor * &z;
        for j in 0..p {
            xaug[(i, p + j)] = mean[(i, j)] + noise[j];
        }
    }
    Ok(KnockoffAugmentedData {
        xaug,
        model: model.clone(),
        effective_s: model.s.clone(),
    })
}

/// Draw `M` knockoff copies with SCIT: for each feature `j` in order, sample
/// `M` independent draws from the Gaussian law of `X_j` given every other
/// original column and all knockoff columns realized so far.
pub fn sample_scit_knockoffs(
    x: &DMatrix<f64>,
    model: &KnockoffModel,
    seed: u64,
) -> Result<KnockoffAugmentedData> {
    check_input(x, model)?;
    let copies = model.copies;
    if copies == 0 {
        return Err(Error::Config("knockoff copy count must be at least 1".into()));
    }
    let (n, p) = x.shape();
    let total = (1 + copies) * p;

    // Joint covariance over [X | K¹ | … | Kᴹ]; knockoff rows are filled in as
    // the corresponding columns are realized.
    let mut joint = DMatrix::<f64>::zeros(total, total);
    joint.view_mut((0, 0), (p, p)).copy_from(&model.sigma);
    let mean_of = |col: usize| model.mu[col % p];

    let mut xaug = DMatrix::zeros(n, total);
    xaug.columns_mut(0, p).copy_from(x);
    let mut effective_s = DVector::zeros(p);

    for j in 0..p {
        let cond: Vec<usize> = (0..p)
            .filter(|&k| k != j)
            .chain((1..=copies).flat_map(|m| (0..j).map(move |l| m * p + l)))
            .collect();
        let var_j = joint[(j, j)];
        let (coef, cond_var) = if cond.is_empty() {
            (DVector::zeros(0), var_j)
        } else {
            let k = cond.len();
            let block = DMatrix::from_fn(k, k, |a, b| joint[(cond[a], cond[b])]);
            let cross = DVector::from_iterator(k, cond.iter().map(|&c| joint[(c, j)]));
            let chol = cholesky_with_jitter(&block, "SCIT conditioning block")?;
            let coef = chol.solve(&cross);
            let cond_var = var_j - cross.dot(&coef);
            (coef, cond_var)
        };
        if cond_var < -1e-8 * var_j.max(1.0) {
            return Err(Error::Numerical(format!(
                "negative conditional variance {cond_var:.3e} for feature {}",
                j + 1
            )));
        }
        let cond_var = cond_var.max(0.0);
        let sd = cond_var.sqrt();
        effective_s[j] = cond_var;

        let mut rng = seed::rng_for(seed, j as u64);
        for i in 0..n {
            let mean = model.mu[j]
                + cond
                    .iter()
                    .zip(coef.iter())
                    .map(|(&c, b)| (xaug[(i, c)] - mean_of(c)) * b)
                    .sum::<f64>();
            for m in 1..=copies {
                let z: f64 = rng.sample(StandardNormal);
                xaug[(i, m * p + j)] = mean + sd * z;
            }
        }

        // Each new column shares X_j's covariance with the conditioning set,
        // and differs from X_j (and its sibling draws) by independent noise.
        for m in 1..=copies {
            let idx = m * p + j;
            for &c in &cond {
                joint[(idx, c)] = joint[(j, c)];
                joint[(c, idx)] = joint[(j, c)];
            }
            joint[(idx, j)] = var_j - cond_var;
            joint[(j, idx)] = var_j - cond_var;
            for m2 in 1..=copies {
                let other = m2 * p + j;
                let v = if m2 == m { var_j } else { var_j - cond_var };
                joint[(idx, other)] = v;
            }
        }
    }
    Ok(KnockoffAugmentedData {
        xaug,
        model: model.clone(),
        effective_s,
    })
}

/// Single knockoffs for `M = 1`, SCIT otherwise.
pub fn sample_knockoffs(
    x: &DMatrix<f64>,
    model: &KnockoffModel,
    seed: u64,
) -> Result<KnockoffAugmentedData> {
    if model.copies == 1 {
        sample_single_knockoffs(x, model, seed)
    } else {
        sample_scit_knockoffs(x, model, seed)
    }
}
