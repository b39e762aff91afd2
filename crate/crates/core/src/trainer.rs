//! Hyperparameter-grid training with per-epoch trajectory capture.
//!
//! Every setting trains `folds` cross-validation models plus one model on
//! all samples, in lockstep. After each epoch the store records the mean
//! held-out loss of the fold models and the importance vector of the
//! full-data model.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{read_json, write_json, Dataset, Task};
use crate::error::{Error, Result};
use crate::linalg::mean_std;
use crate::model::{Batch, Network, NetworkConfig, RowMajor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    #[default]
    InputGradient,
    PairwiseWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub depths: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_prob: f64,
    #[serde(default)]
    pub importance: ImportanceMethod,
    /// Seeds the fold assignment, and the models unless `init_seed` is set.
    #[serde(default)]
    pub seed: u64,
    /// Separate seed for initialization, dropout and batch order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

fn default_folds() -> usize {
    5
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_hidden() -> usize {
    25
}
fn default_dropout() -> f64 {
    0.5
}

/// `count` values spaced evenly in log10 between `low` and `high`.
pub fn log_spaced(low: f64, high: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![low],
        _ => {
            let (a, b) = (low.log10(), high.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.depths.is_empty() {
            return Err(Error::Config("grid needs at least one lambda and one depth".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("grid needs at least one epoch".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Settings in grid order: depth-major, then lambda.
    pub fn settings(&self) -> Vec<SettingInfo> {
        self.depths
            .iter()
            .flat_map(|&depth| self.lambdas.iter().map(move |&lambda| (depth, lambda)))
            .enumerate()
            .map(|(index, (depth, lambda))| SettingInfo {
                index,
                lambda,
                depth,
            })
            .collect()
    }

    fn model_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingInfo {
    pub index: usize,
    pub lambda: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub setting: usize,
    pub epoch: usize,
    pub cv_loss: f64,
    pub z: Vec<f64>,
}

/// All `(setting, epoch)` snapshots of a grid run, ordered by setting then
/// epoch. Failed settings contribute no records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub grid: Option<GridSpec>,
    pub settings: Vec<SettingInfo>,
    pub failed: Vec<usize>,
    pub dim: usize,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    grid: Option<GridSpec>,
    settings: Vec<SettingInfo>,
    failed: Vec<usize>,
    dim: usize,
    epochs: usize,
}

impl TrajectoryStore {
    /// Store from bare `(cv_loss, z)` pairs laid out as `settings × epochs`.
    pub fn from_grid(losses: &[Vec<f64>], zs: &[Vec<Vec<f64>>]) -> Result<Self> {
        let dim = zs
            .first()
            .and_then(|s| s.first())
            .map(Vec::len)
            .ok_or(Error::InsufficientRecords { need: 1, have: 0 })?;
        let mut records = Vec::new();
        for (k, (ls, zk)) in losses.iter().zip(zs).enumerate() {
            if ls.len() != zk.len() {
                return Err(Error::Dimension {
                    context: "losses per setting",
                    expected: zk.len(),
                    got: ls.len(),
                });
            }
            for (e, (l, z)) in ls.iter().zip(zk).enumerate() {
                if z.len() != dim {
                    return Err(Error::Dimension {
                        context: "importance length",
                        expected: dim,
                        got: z.len(),
                    });
                }
                records.push(TrajectoryRecord {
                    setting: k,
                    epoch: e,
                    cv_loss: *l,
                    z: z.clone(),
                });
            }
        }
        Ok(TrajectoryStore {
            grid: None,
            settings: (0..losses.len())
                .map(|index| SettingInfo {
                    index,
                    lambda: 0.0,
                    depth: 1,
                })
                .collect(),
            failed: Vec::new(),
            dim,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn epochs(&self) -> usize {
        self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    /// Records as a `records × dim` matrix.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.records.len(), self.dim, |i, j| self.records[i].z[j])
    }

    pub fn setting_file(dir: &Path, setting: usize) -> PathBuf {
        dir.join(format!("setting_{setting:04}.csv"))
    }

    fn write_manifest(&self, dir: &Path) -> Result<()> {
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                grid: self.grid.clone(),
                settings: self.settings.clone(),
                failed: self.failed.clone(),
                dim: self.dim,
                epochs: self.epochs(),
            },
        )
    }

    /// Persist as `manifest.json` plus one CSV per trained setting.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_manifest(dir)?;
        for info in &self.settings {
            let recs: Vec<&TrajectoryRecord> =
                self.records.iter().filter(|r| r.setting == info.index).collect();
            if !recs.is_empty() {
                write_setting_csv(&Self::setting_file(dir, info.index), self.dim, &recs)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let mut records = Vec::new();
        for info in &manifest.settings {
            if manifest.failed.contains(&info.index) {
                continue;
            }
            let path = Self::setting_file(dir, info.index);
            records.extend(read_setting_csv(&path, info.index, manifest.dim)?);
        }
        Ok(TrajectoryStore {
            grid: manifest.grid,
            settings: manifest.settings,
            failed: manifest.failed,
            dim: manifest.dim,
            records,
        })
    }
}

fn write_setting_csv(path: &Path, dim: usize, recs: &[&TrajectoryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["epoch".to_string(), "cv_loss".to_string()];
    header.extend((1..=dim).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for r in recs {
        let mut row = vec![(r.epoch + 1).to_string(), r.cv_loss.to_string()];
        row.extend(r.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_setting_csv(path: &Path, setting: usize, dim: usize) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|c| {
                c.parse::<f64>().map_err(|_| Error::NonNumeric {
                    row: r + 1,
                    column: path.display().to_string(),
                    value: c.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != dim + 2 {
            return Err(Error::Dimension {
                context: "trajectory CSV width",
                expected: dim + 2,
                got: vals.len(),
            });
        }
        out.push(TrajectoryRecord {
            setting,
            epoch: vals[0] as usize - 1,
            cv_loss: vals[1],
            z: vals[2..].to_vec(),
        });
    }
    Ok(out)
}

/// Assign each sample to one of `folds` validation folds. Binary targets
/// are stratified by class.
pub fn assign_folds(targets: &[f64], task: Task, folds: usize, seed_: u64) -> Result<Vec<usize>> {
    let n = targets.len();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} samples into {folds} folds")));
    }
    let mut rng = seed::rng_for(seed_, seed::TAG_FOLDS);
    let groups: Vec<Vec<usize>> = match task {
        Task::Regression => vec![(0..n).collect()],
        Task::Binary => {
            let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| targets[i] > 0.5);
            vec![neg, pos]
        }
    };
    let mut fold_of = vec![0; n];
    let mut counter = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            fold_of[i] = counter % folds;
            counter += 1;
        }
    }
    Ok(fold_of)
}

/// Training inputs shared by every setting of a grid.
struct Prepared {
    x: RowMajor,
    covariates: Option<RowMajor>,
    targets: Vec<f64>,
    fold_of: Vec<usize>,
    p: usize,
    copies: usize,
    task: Task,
}

impl Prepared {
    fn new(dataset: &Dataset, xaug: &DMatrix<f64>, grid: &GridSpec) -> Result<Self> {
        let p = dataset.p();
        if xaug.nrows() != dataset.n() {
            return Err(Error::Dimension {
                context: "augmented rows",
                expected: dataset.n(),
                got: xaug.nrows(),
            });
        }
        if p == 0 || !xaug.ncols().is_multiple_of(p) || xaug.ncols() < 2 * p {
            return Err(Error::Dimension {
                context: "augmented columns",
                expected: 2 * p,
                got: xaug.ncols(),
            });
        }
        // Regression targets are standardized so one learning rate and
        // lambda grid serve any response scale.
        let targets = match dataset.task {
            Task::Regression => {
                let (mean, sd) = mean_std(&dataset.y);
                let sd = if sd > 0.0 { sd } else { 1.0 };
                dataset.y.iter().map(|v| (v - mean) / sd).collect()
            }
            Task::Binary => dataset.y.clone(),
        };
        let fold_of = assign_folds(&targets, dataset.task, grid.folds, grid.seed)?;
        Ok(Prepared {
            x: RowMajor::from_dmatrix(xaug),
            covariates: dataset.covariates.as_ref().map(RowMajor::from_dmatrix),
            targets,
            fold_of,
            p,
            copies: xaug.ncols() / p - 1,
            task: dataset.task,
        })
    }

    fn batch<'a>(&self, idx: &[usize], xb: &'a mut RowMajor, cb: &'a mut RowMajor) -> Batch<'a> {
        self.x.gather_into(idx, xb);
        let cov = self.covariates.as_ref().map(|c| {
            c.gather_into(idx, cb);
            &*cb
        });
        Batch::new(xb, cov)
    }
}

struct Member {
    net: Network,
    train_idx: Vec<usize>,
    shuffle_rng: rand_chacha::ChaCha8Rng,
}

fn train_setting(
    info: &SettingInfo,
    data: &Prepared,
    grid: &GridSpec,
) -> Result<Vec<TrajectoryRecord>> {
    let n = data.targets.len();
    let setting_seed = seed::derive(seed::derive(grid.model_seed(), seed::TAG_SETTING), info.index as u64);
    let make = |member: usize, train_idx: Vec<usize>| -> Result<Member> {
        let model_seed = seed::derive(setting_seed, member as u64);
        let net = Network::new(NetworkConfig {
            p: data.p,
            copies: data.copies,
            depth: info.depth,
            hidden: grid.hidden,
            lambda: info.lambda,
            dropout_prob: grid.dropout_prob,
            covariate_dim: data.covariates.as_ref().map_or(0, |c| c.ncols),
            task: data.task,
            seed: model_seed,
        })?;
        Ok(Member {
            net,
            train_idx,
            shuffle_rng: seed::rng_for(model_seed, seed::TAG_SHUFFLE),
        })
    };

    let mut members = Vec::with_capacity(grid.folds + 1);
    let mut validation = Vec::with_capacity(grid.folds);
    for f in 0..grid.folds {
        let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| data.fold_of[i] == f);
        let val_targets: Vec<f64> = val.iter().map(|&i| data.targets[i]).collect();
        let xv = data.x.gather(&val);
        let cv = data.covariates.as_ref().map(|c| c.gather(&val));
        validation.push((xv, cv, val_targets));
        members.push(make(f, train)?);
    }
    members.push(make(grid.folds, (0..n).collect())?);

    let full_batch = Batch::new(&data.x, data.covariates.as_ref());
    let mut xb = RowMajor::default();
    let mut cb = RowMajor::default();
    let mut yb = Vec::with_capacity(grid.batch_size);
    let mut records = Vec::with_capacity(grid.epochs);
    for epoch in 0..grid.epochs {
        for (mi, member) in members.iter_mut().enumerate() {
            member.train_idx.shuffle(&mut member.shuffle_rng);
            for (bi, chunk) in member.train_idx.chunks(grid.batch_size).enumerate() {
                let batch = data.batch(chunk, &mut xb, &mut cb);
                yb.clear();
                yb.extend(chunk.iter().map(|&i| data.targets[i]));
                member
                    .net
                    .train_step(&batch, &yb, grid.learning_rate)
                    .map_err(|e| match e {
                        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                            context: format!(
                                "setting {}, model {mi}, epoch {}, batch {}",
                                info.index + 1,
                                epoch + 1,
                                bi + 1
                            ),
                        },
                        other => other,
                    })?;
            }
        }
        let mut cv_loss = 0.0;
        for (member, (xv, cv, yv)) in members.iter().zip(&validation) {
            cv_loss += member.net.data_loss(&Batch::new(xv, cv.as_ref()), yv)?;
        }
        cv_loss /= grid.folds as f64;
        if !cv_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("setting {}, epoch {} validation", info.index + 1, epoch + 1),
            });
        }
        let full = &members[grid.folds].net;
        let z = match grid.importance {
            ImportanceMethod::InputGradient => full.input_gradient_importance(&full_batch)?,
            ImportanceMethod::PairwiseWeight => full.pairwise_weight_importance(),
        };
        records.push(TrajectoryRecord {
            setting: info.index,
            epoch,
            cv_loss,
            z,
        });
    }
    Ok(records)
}

fn assemble(
    grid: &GridSpec,
    settings: Vec<SettingInfo>,
    outcomes: Vec<Result<Vec<TrajectoryRecord>>>,
    dim: usize,
) -> Result<TrajectoryStore> {
    let mut failed = Vec::new();
    let mut records = Vec::new();
    for (info, outcome) in settings.iter().zip(outcomes) {
        match outcome {
            Ok(recs) => records.extend(recs),
            Err(Error::NonFiniteLoss { context }) => {
                log::warn!("setting {} excluded: non-finite loss at {context}", info.index + 1);
                failed.push(info.index);
            }
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        return Err(Error::AllSettingsFailed);
    }
    Ok(TrajectoryStore {
        grid: Some(grid.clone()),
        settings,
        failed,
        dim,
        records,
    })
}

/// Train every grid setting and collect the trajectory store. Settings run
/// on the current rayon pool.
pub fn run_grid(dataset: &Dataset, xaug: &DMatrix<f64>, grid: &GridSpec) -> Result<TrajectoryStore> {
    grid.validate()?;
    let data = Prepared::new(dataset, xaug, grid)?;
    let settings = grid.settings();
    let outcomes: Vec<_> = settings
        .par_iter()
        .map(|info| train_setting(info, &data, grid))
        .collect();
    assemble(grid, settings, outcomes, xaug.ncols())
}

/// Like [`run_grid`], persisting each setting to `dir` as soon as it
/// finishes. Settings whose CSV already exists (or that the manifest lists
/// as failed) are loaded instead of retrained.
pub fn run_grid_resumable(
    dataset: &Dataset,
    xaug: &DMatrix<f64>,
    grid: &GridSpec,
    dir: &Path,
) -> Result<TrajectoryStore> {
    grid.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = Prepared::new(dataset, xaug, grid)?;
    let settings = grid.settings();
    let dim = xaug.ncols();

    let previous_failed: Vec<usize> = match read_json::<Manifest>(&dir.join("manifest.json")) {
        Ok(m) if m.grid.as_ref() == Some(grid) => m.failed,
        Ok(_) => {
            return Err(Error::Config(format!(
                "{} holds trajectories for a different grid",
                dir.display()
            )))
        }
        Err(_) => Vec::new(),
    };

    let outcomes: Vec<_> = settings
        .par_iter()
        .map(|info| {
            let path = TrajectoryStore::setting_file(dir, info.index);
            if previous_failed.contains(&info.index) {
                return Err(Error::NonFiniteLoss {
                    context: "failed in an earlier run".into(),
                });
            }
            if path.exists() {
                log::info!("setting {} already trained, loading", info.index + 1);
                return read_setting_csv(&path, info.index, dim);
            }
            let recs = train_setting(info, &data, grid)?;
            let refs: Vec<&TrajectoryRecord> = recs.iter().collect();
            write_setting_csv(&path, dim, &refs)?;
            Ok(recs)
        })
        .collect();
    let store = assemble(grid, settings, outcomes, dim)?;
    store.write_manifest(dir)?;
    Ok(store)
}

/// The snapshot with the lowest CV loss; ties go to the lower setting, then
/// the lower epoch.
pub fn best_cv_model(store: &TrajectoryStore) -> Result<&TrajectoryRecord> {
    store
        .records
        .iter()
        .min_by(|a, b| {
            a.cv_loss
                .total_cmp(&b.cv_loss)
                .then(a.setting.cmp(&b.setting))
                .then(a.epoch.cmp(&b.epoch))
        })
        .ok_or(Error::InsufficientRecords { need: 1, have: 0 })
}
