//! Importance ensembles over a trajectory store.

use std::path::Path;

use nalgebra::{DMatrix, Dyn, SVD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::write_json;
use crate::error::{Error, Result};
use crate::linalg::percentile;
use crate::seed;
use crate::trainer::{best_cv_model, TrajectoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Importance of the single best-CV snapshot.
    Best,
    /// Mean over every snapshot.
    Avg,
    /// Mean over the `m` snapshots with lowest CV loss.
    TopM,
    /// Mean over `m` snapshots drawn by leverage score.
    MInfluential,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Best => "best",
            Strategy::Avg => "avg",
            Strategy::TopM => "top_m",
            Strategy::MInfluential => "m_influential",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Strategy::Best),
            "avg" => Ok(Strategy::Avg),
            "top_m" | "top-m" => Ok(Strategy::TopM),
            "m_influential" | "m-influential" | "m_inf" | "m-inf" => Ok(Strategy::MInfluential),
            other => Err(Error::Config(format!("unknown ensemble strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub strategy: Strategy,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Keep only records with CV loss at or below this percentile (0-100)
    /// before computing leverage.
    #[serde(default)]
    pub percentile_filter: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_m() -> usize {
    1
}

impl EnsembleSpec {
    pub fn new(strategy: Strategy, m: usize) -> Self {
        EnsembleSpec {
            strategy,
            m,
            percentile_filter: None,
            seed: 0,
        }
    }

    /// Display label, e.g. `top_m(500)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Best | Strategy::Avg => self.strategy.name().to_string(),
            s => format!("{}({})", s.name(), self.m),
        }
    }
}

/// An ensemble importance vector plus the records it averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub z: Vec<f64>,
    /// Indices into the store's record list.
    pub chosen: Vec<usize>,
}

#[derive(Serialize)]
struct EnsembleMetadata {
    strategy: Strategy,
    m: usize,
    percentile_filter: Option<f64>,
    seed: u64,
    chosen: Vec<RecordId>,
}

#[derive(Serialize)]
struct RecordId {
    setting: usize,
    epoch: usize,
}

impl EnsembleOutput {
    /// Write `index,z` CSV (1-indexed) and a JSON sidecar with the spec and
    /// the chosen `(setting, epoch)` pairs (1-indexed).
    pub fn write(&self, spec: &EnsembleSpec, store: &TrajectoryStore, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_importance_csv(csv_path, &self.z)?;
        let meta = EnsembleMetadata {
            strategy: spec.strategy,
            m: spec.m,
            percentile_filter: spec.percentile_filter,
            seed: spec.seed,
            chosen: self
                .chosen
                .iter()
                .map(|&i| RecordId {
                    setting: store.records[i].setting + 1,
                    epoch: store.records[i].epoch + 1,
                })
                .collect(),
        };
        write_json(json_path, &meta)
    }
}

pub fn write_importance_csv(path: &Path, z: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "z"])?;
    for (i, v) in z.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_importance_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut z = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(1).unwrap_or_default();
        z.push(cell.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
            row: r + 1,
            column: "z".into(),
            value: cell.to_string(),
        })?);
    }
    Ok(z)
}

fn mean_of(store: &TrajectoryStore, chosen: &[usize]) -> Vec<f64> {
    let mut z = vec![0.0; store.dim];
    for &i in chosen {
        for (acc, v) in z.iter_mut().zip(&store.records[i].z) {
            *acc += v;
        }
    }
    let inv = 1.0 / chosen.len() as f64;
    z.iter_mut().for_each(|v| *v *= inv);
    z
}

fn require_nonempty(store: &TrajectoryStore) -> Result<()> {
    if store.is_empty() {
        return Err(Error::InsufficientRecords { need: 1, have: 0 });
    }
    Ok(())
}

/// Elementwise mean of every record.
pub fn average_all(store: &TrajectoryStore) -> Result<EnsembleOutput> {
    require_nonempty(store)?;
    let chosen: Vec<usize> = (0..store.len()).collect();
    Ok(EnsembleOutput {
        z: mean_of(store, &chosen),
        chosen,
    })
}

/// Record indices ordered by CV loss, ties by `(setting, epoch)`.
fn by_loss(store: &TrajectoryStore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&store.records[a], &store.records[b]);
        ra.cv_loss
            .total_cmp(&rb.cv_loss)
            .then(ra.setting.cmp(&rb.setting))
            .then(ra.epoch.cmp(&rb.epoch))
    });
    order
}

/// Mean of the `m` records with the smallest CV loss.
pub fn top_m_average(store: &TrajectoryStore, m: usize) -> Result<EnsembleOutput> {
    if m == 0 || m > store.len() {
        return Err(Error::InsufficientRecords {
            need: m.max(1),
            have: store.len(),
        });
    }
    let mut chosen = by_loss(store);
    chosen.truncate(m);
    Ok(EnsembleOutput {
        z: mean_of(store, &chosen),
        chosen,
    })
}

/// Statistical leverage of each row of `z`: the squared row norms of an
/// orthonormal basis of its column space, from a thin SVD with singular
/// values below `1e-10 · σ_max` dropped.
pub fn leverage_scores(z: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (n, d) = z.shape();
    if n == 0 || d == 0 {
        return Err(Error::Config("leverage needs a nonempty matrix".into()));
    }
    if z.iter().all(|v| *v == 0.0) {
        return Err(Error::Numerical("leverage of an all-zero matrix is undefined".into()));
    }
    // Rescaling does not change the column space and keeps the SVD away
    // from overflow or underflow.
    let z = z / z.amax();
    let (u, sigma) = left_singular_basis(&z)?;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..sigma.len()).filter(|&k| sigma[k] > 1e-10 * sigma_max).collect();
    Ok((0..n)
        .map(|i| keep.iter().map(|&k| u[(i, k)].powi(2)).sum::<f64>().min(1.0))
        .collect())
}

/// Thin SVD left factor and singular values, checked by reconstruction.
/// With nalgebra's default convergence threshold the bidiagonal SVD can
/// return a wrong factorization for exactly rank-deficient input; a looser
/// threshold converges correctly, and the transpose is a second attempt.
fn left_singular_basis(z: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    const EPS: f64 = 1e-12;
    let valid = |svd: &SVD<f64, Dyn, Dyn>, target: &DMatrix<f64>| {
        let (Some(u), Some(v_t)) = (&svd.u, &svd.v_t) else {
            return false;
        };
        let tol = 1e-9 * target.amax();
        // Row by row, so no second n × d matrix is allocated.
        (0..target.nrows()).all(|i| {
            let row = u.row(i).component_mul(&svd.singular_values.transpose()) * v_t;
            (row - target.row(i)).amax() <= tol
        })
    };
    if let Some(svd) = SVD::try_new(z.clone(), true, true, EPS, 0) {
        if valid(&svd, z) {
            return Ok((svd.u.expect("requested"), svd.singular_values.iter().copied().collect()));
        }
    }
    let zt = z.transpose();
    if let Some(svd) = SVD::try_new(zt.clone(), true, true, EPS, 0) {
        if valid(&svd, &zt) {
            let u = svd.v_t.expect("requested").transpose();
            return Ok((u, svd.singular_values.iter().copied().collect()));
        }
    }
    Err(Error::Numerical("SVD of the trajectory matrix did not converge to a valid factorization".into()))
}

/// Record indices whose CV loss is at or below the given percentile.
pub fn percentile_eligible(store: &TrajectoryStore, q: f64) -> Vec<usize> {
    let losses: Vec<f64> = store.records.iter().map(|r| r.cv_loss).collect();
    let cutoff = percentile(&losses, q);
    (0..store.len()).filter(|&i| losses[i] <= cutoff).collect()
}

/// Draw `m` distinct indices with probability proportional to `weights`,
/// renormalizing after each draw. Zero-weight entries are never drawn.
pub fn weighted_sample_without_replacement(weights: &[f64], m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if m > positive {
        return Err(Error::InsufficientRecords { need: m, have: positive });
    }
    let mut w = weights.to_vec();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = w.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, wi) in w.iter().enumerate() {
            if *wi <= 0.0 {
                continue;
            }
            acc += wi;
            pick = Some(i);
            if target < acc {
                break;
            }
        }
        let i = pick.expect("a positive weight remains");
        chosen.push(i);
        w[i] = 0.0;
    }
    Ok(chosen)
}

/// Mean of `m` records sampled by leverage weight, optionally restricted to
/// the low-loss percentile first.
pub fn m_influential_average(
    store: &TrajectoryStore,
    m: usize,
    percentile_filter: Option<f64>,
    seed_: u64,
) -> Result<EnsembleOutput> {
    require_nonempty(store)?;
    let eligible = match percentile_filter {
        Some(q) => percentile_eligible(store, q),
        None => (0..store.len()).collect(),
    };
    if m == 0 || m > eligible.len() {
        return Err(Error::InsufficientRecords {
            need: m.max(1),
            have: eligible.len(),
        });
    }
    let z = DMatrix::from_fn(eligible.len(), store.dim, |i, j| store.records[eligible[i]].z[j]);
    let h = leverage_scores(&z)?;
    let total: f64 = h.iter().sum();
    let weights: Vec<f64> = h.iter().map(|v| v / total).collect();
    let mut rng = seed::rng_for(seed_, seed::TAG_ENSEMBLE);
    let picks = weighted_sample_without_replacement(&weights, m, &mut rng)?;
    let chosen: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();
    Ok(EnsembleOutput {
        z: mean_of(store, &chosen),
        chosen,
    })
}

/// Dispatch on the spec's strategy.
pub fn build(store: &TrajectoryStore, spec: &EnsembleSpec) -> Result<EnsembleOutput> {
    match spec.strategy {
        Strategy::Best => {
            let best = best_cv_model(store)?;
            let idx = store
                .records
                .iter()
                .position(|r| std::ptr::eq(r, best))
                .expect("best record comes from the store");
            Ok(EnsembleOutput {
                z: best.z.clone(),
                chosen: vec![idx],
            })
        }
        Strategy::Avg => average_all(store),
        Strategy::TopM => top_m_average(store, spec.m),
        Strategy::MInfluential => m_influential_average(store, spec.m, spec.percentile_filter, spec.seed),
    }
}
