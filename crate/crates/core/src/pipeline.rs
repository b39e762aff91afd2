//! End-to-end experiments: data, knockoffs, grid training, ensembles,
//! filtering and metrics over replicates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{load_csv, simulate, write_json, Dataset, SimConfig, Task};
use crate::ensemble::{self, EnsembleSpec, Strategy};
use crate::error::{Error, Result, ResultExt};
use crate::knockoff::{fit_gaussian_model, sample_knockoffs};
use crate::linalg::median;
use crate::metrics::{instability_profile, pairwise_jaccard, power_fdp, InstabilityProfile};
use crate::seed;
use crate::selection::{select, SelectionReport};
use crate::trainer::{log_spaced, run_grid, run_grid_resumable, GridSpec, ImportanceMethod, TrajectoryStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulated(SimConfig),
    Csv {
        path: PathBuf,
        response: String,
        #[serde(default)]
        covariates: Vec<String>,
        #[serde(default = "yes")]
        standardize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicates: usize,
    pub q: f64,
    /// Knockoff copies; 1 uses single knockoffs, more use SCIT.
    pub copies: usize,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Explicit per-replicate seeds, overriding derivation from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate_seeds: Option<Vec<u64>>,
    /// Amplitudes to sweep for simulated data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Vec<f64>>,
    pub data: DataSource,
    pub grid: GridSpec,
    pub ensembles: Vec<EnsembleSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl ExperimentConfig {
    /// Built-in configurations. `desk` runs in minutes on one core; `paper`
    /// is the full 100 λ × 3 depth × 300 epoch grid over 100 replicates.
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig {
                seed: 7,
                replicates: 10,
                q: 0.2,
                copies: 1,
                workers: None,
                out_dir: None,
                replicate_seeds: None,
                amplitudes: None,
                data: DataSource::Simulated(SimConfig {
                    n: 500,
                    p: 100,
                    r: 3,
                    s: 10,
                    amplitude: 20.0,
                    noise_scale: 1.0,
                    task: Task::Regression,
                    seed: 0,
                }),
                grid: GridSpec {
                    lambdas: log_spaced(1e-4, 1e-1, 20),
                    depths: vec![1],
                    epochs: 100,
                    folds: 5,
                    batch_size: 32,
                    learning_rate: 0.001,
                    hidden: 25,
                    dropout_prob: 0.5,
                    importance: ImportanceMethod::InputGradient,
                    seed: 0,
                    init_seed: None,
                },
                ensembles: vec![
                    EnsembleSpec::new(Strategy::Best, 1),
                    EnsembleSpec::new(Strategy::Avg, 1),
                    EnsembleSpec::new(Strategy::TopM, 100),
                    EnsembleSpec::new(Strategy::MInfluential, 100),
                ],
            },
            Profile::Paper => ExperimentConfig {
                seed: 7,
                replicates: 100,
                q: 0.2,
                copies: 1,
                workers: None,
                out_dir: None,
                replicate_seeds: None,
                amplitudes: Some(vec![10.0, 15.0, 20.0, 25.0, 30.0]),
                data: DataSource::Simulated(SimConfig {
                    n: 1000,
                    p: 500,
                    r: 3,
                    s: 25,
                    amplitude: 20.0,
                    noise_scale: 1.0,
                    task: Task::Regression,
                    seed: 0,
                }),
                grid: GridSpec {
                    lambdas: log_spaced(1e-5, 1e-1, 100),
                    depths: vec![1, 2, 3],
                    epochs: 300,
                    folds: 5,
                    batch_size: 32,
                    learning_rate: 0.001,
                    hidden: 25,
                    dropout_prob: 0.5,
                    importance: ImportanceMethod::InputGradient,
                    seed: 0,
                    init_seed: None,
                },
                ensembles: vec![
                    EnsembleSpec::new(Strategy::Best, 1),
                    EnsembleSpec::new(Strategy::Avg, 1),
                    EnsembleSpec::new(Strategy::TopM, 500),
                    EnsembleSpec::new(Strategy::MInfluential, 500),
                ],
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Config(format!("q must be in (0, 1), got {}", self.q)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("at least one replicate is required".into()));
        }
        if self.copies == 0 {
            return Err(Error::Config("at least one knockoff copy is required".into()));
        }
        if self.ensembles.is_empty() {
            return Err(Error::Config("at least one ensemble strategy is required".into()));
        }
        if let Some(seeds) = &self.replicate_seeds {
            if seeds.len() != self.replicates {
                return Err(Error::Config("replicate_seeds must list one seed per replicate".into()));
            }
        }
        if let DataSource::Simulated(sim) = &self.data {
            sim.validate()?;
        }
        self.grid.validate()
    }

    fn replicate_seed(&self, r: usize) -> u64 {
        match &self.replicate_seeds {
            Some(seeds) => seeds[r],
            None => seed::derive(seed::derive(self.seed, seed::TAG_REPLICATE), r as u64),
        }
    }
}

/// One strategy's outcome in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub strategy: String,
    pub power: Option<f64>,
    pub fdp: Option<f64>,
    pub n_selected: usize,
    #[serde(skip)]
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub replicates: usize,
    pub mean_power: Option<f64>,
    pub mean_fdp: Option<f64>,
    pub mean_n_selected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<StrategySummary>,
}

impl ExperimentResult {
    pub fn summary_for(&self, strategy: &str) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Order-independent mean, so permuting replicates cannot change the
/// aggregate in the last bit.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn summarize(rows: &[ReplicateRow], labels: &[String]) -> Vec<StrategySummary> {
    labels
        .iter()
        .map(|label| {
            let mine: Vec<&ReplicateRow> = rows.iter().filter(|r| &r.strategy == label).collect();
            let mut power: Vec<f64> = mine.iter().filter_map(|r| r.power).collect();
            let mut fdp: Vec<f64> = mine.iter().filter_map(|r| r.fdp).collect();
            let mut count: Vec<f64> = mine.iter().map(|r| r.n_selected as f64).collect();
            StrategySummary {
                strategy: label.clone(),
                replicates: mine.len(),
                mean_power: (!power.is_empty()).then(|| stable_mean(&mut power)),
                mean_fdp: (!fdp.is_empty()).then(|| stable_mean(&mut fdp)),
                mean_n_selected: if count.is_empty() { 0.0 } else { stable_mean(&mut count) },
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-replicate rows: `replicate,strategy,power,fdp,n_selected`.
pub fn write_results_csv(path: &Path, rows: &[ReplicateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["replicate", "strategy", "power", "fdp", "n_selected"])?;
    for r in rows {
        w.write_record([
            (r.replicate + 1).to_string(),
            r.strategy.clone(),
            opt(r.power),
            opt(r.fdp),
            r.n_selected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, summary: &[StrategySummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "replicates", "mean_power", "mean_fdp", "mean_n_selected"])?;
    for s in summary {
        w.write_record([
            s.strategy.clone(),
            s.replicates.to_string(),
            opt(s.mean_power),
            opt(s.mean_fdp),
            s.mean_n_selected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Data and knockoffs for one replicate.
struct ReplicateData {
    dataset: Dataset,
    xaug: nalgebra::DMatrix<f64>,
    knockoff_model: crate::knockoff::KnockoffModel,
}

fn prepare_replicate(cfg: &ExperimentConfig, base: Option<&Dataset>, rep_seed: u64) -> Result<ReplicateData> {
    let dataset = match (&cfg.data, base) {
        (_, Some(ds)) => ds.clone(),
        (DataSource::Simulated(sim), None) => simulate(&SimConfig {
            seed: seed::derive(rep_seed, seed::TAG_FACTORS),
            ..sim.clone()
        })?,
        (DataSource::Csv { .. }, None) => unreachable!("CSV data is loaded once up front"),
    };
    let knockoff_model = fit_gaussian_model(&dataset.x, cfg.copies)?;
    let aug = sample_knockoffs(&dataset.x, &knockoff_model, seed::derive(rep_seed, seed::TAG_KNOCKOFF))?;
    Ok(ReplicateData {
        dataset,
        xaug: aug.xaug,
        knockoff_model,
    })
}

fn load_base(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    match &cfg.data {
        DataSource::Simulated(_) => Ok(None),
        DataSource::Csv {
            path,
            response,
            covariates,
            standardize,
        } => Ok(Some(load_csv(path, response, covariates, *standardize)?)),
    }
}

fn ensemble_spec_for(spec: &EnsembleSpec, rep_seed: u64) -> EnsembleSpec {
    EnsembleSpec {
        seed: seed::derive(seed::derive(rep_seed, seed::TAG_ENSEMBLE), spec.seed),
        ..spec.clone()
    }
}

/// A strategy's result row with its ensemble scores.
type Scored = (ReplicateRow, Vec<f64>);

/// Selection for every configured strategy from one trajectory store.
fn select_all(
    cfg: &ExperimentConfig,
    store: &TrajectoryStore,
    dataset: &Dataset,
    replicate: usize,
    rep_seed: u64,
    out: Option<&Path>,
) -> Result<Vec<Scored>> {
    let mut rows = Vec::with_capacity(cfg.ensembles.len());
    for spec in &cfg.ensembles {
        let label = spec.label();
        let spec = ensemble_spec_for(spec, rep_seed);
        let ens = ensemble::build(store, &spec).context_with(|| format!("strategy {label}"))?;
        let (stats, sel) = select(&ens.z, cfg.copies, cfg.q)?;
        let metrics = match &dataset.true_support {
            Some(truth) => Some(power_fdp(&sel.selected, truth)?),
            None => None,
        };
        if let Some(dir) = out {
            let stem = file_stem(&label);
            let ens_dir = dir.join("ensembles");
            let sel_dir = dir.join("selections");
            create_dir(&ens_dir)?;
            create_dir(&sel_dir)?;
            ens.write(&spec, store, &ens_dir.join(format!("{stem}.csv")), &ens_dir.join(format!("{stem}.json")))?;
            let meta = serde_json::json!({ "label": label, "strategy": spec.strategy, "m": spec.m,
                "percentile_filter": spec.percentile_filter, "seed": spec.seed });
            SelectionReport::new(cfg.q, &stats, &sel, Some(meta)).write(&sel_dir.join(format!("{stem}.json")))?;
        }
        rows.push((
            ReplicateRow {
                replicate,
                strategy: label,
                power: metrics.map(|m| m.power),
                fdp: metrics.map(|m| m.fdp),
                n_selected: sel.selected.len(),
                selected: sel.selected,
            },
            ens.z,
        ));
    }
    Ok(rows)
}

fn run_replicate(cfg: &ExperimentConfig, base: Option<&Dataset>, r: usize) -> Result<Vec<ReplicateRow>> {
    let rep_seed = cfg.replicate_seed(r);
    let data = prepare_replicate(cfg, base, rep_seed)?;
    let grid = GridSpec {
        seed: seed::derive(rep_seed, seed::TAG_GRID),
        ..cfg.grid.clone()
    };
    let rep_dir = cfg.out_dir.as_ref().map(|d| d.join(format!("replicate_{:03}", r + 1)));
    let store = match &rep_dir {
        Some(dir) => {
            create_dir(dir)?;
            data.dataset.write_csv(&dir.join("data.csv"))?;
            if data.dataset.true_support.is_some() {
                data.dataset.write_truth_json(&dir.join("truth.json"))?;
            }
            data.knockoff_model.write_json(&dir.join("knockoff_model.json"))?;
            crate::knockoff::write_augmented_csv(&data.xaug, data.dataset.p(), &dir.join("augmented.csv"))?;
            run_grid_resumable(&data.dataset, &data.xaug, &grid, &dir.join("trajectories"))?
        }
        None => run_grid(&data.dataset, &data.xaug, &grid)?,
    };
    let rows = select_all(cfg, &store, &data.dataset, r, rep_seed, rep_dir.as_deref())?;
    Ok(rows.into_iter().map(|(row, _)| row).collect())
}

/// Run every replicate and aggregate mean power and FDP per strategy.
/// With an output directory, writes `results.csv`, `summary.csv` and all
/// per-replicate artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let base = load_base(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(dir, e))?;
    }
    let per_rep: Vec<Result<Vec<ReplicateRow>>> = with_workers(cfg.workers, || {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(cfg, base.as_ref(), r).context_with(|| format!("replicate {}", r + 1)))
            .collect()
    })?;
    let mut rows = Vec::new();
    for rep in per_rep {
        rows.extend(rep?);
    }
    let labels: Vec<String> = cfg.ensembles.iter().map(EnsembleSpec::label).collect();
    let summary = summarize(&rows, &labels);
    if let Some(dir) = &cfg.out_dir {
        write_results_csv(&dir.join("results.csv"), &rows)?;
        write_summary_csv(&dir.join("summary.csv"), &summary)?;
    }
    Ok(ExperimentResult { rows, summary })
}

/// Repeat the experiment for each amplitude (simulated data only). Writes
/// `sweep.csv` with one row per amplitude and strategy.
pub fn run_amplitude_sweep(cfg: &ExperimentConfig, amplitudes: &[f64]) -> Result<Vec<(f64, ExperimentResult)>> {
    let DataSource::Simulated(sim) = &cfg.data else {
        return Err(Error::Config("amplitude sweeps need simulated data".into()));
    };
    let mut out = Vec::with_capacity(amplitudes.len());
    for &a in amplitudes {
        let sub = ExperimentConfig {
            data: DataSource::Simulated(SimConfig {
                amplitude: a,
                ..sim.clone()
            }),
            out_dir: cfg.out_dir.as_ref().map(|d| d.join(format!("amplitude_{a}"))),
            amplitudes: None,
            ..cfg.clone()
        };
        out.push((a, run_experiment(&sub).context_with(|| format!("amplitude {a}"))?));
    }
    if let Some(dir) = &cfg.out_dir {
        let path = dir.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["amplitude", "strategy", "mean_power", "mean_fdp", "mean_n_selected"])?;
        for (a, res) in &out {
            for s in &res.summary {
                w.write_record([
                    a.to_string(),
                    s.strategy.clone(),
                    opt(s.mean_power),
                    opt(s.mean_fdp),
                    s.mean_n_selected.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyStability {
    pub strategy: String,
    /// Pairwise Jaccard indices over repeats, `(0,1), (0,2), …` order.
    pub jaccard: Vec<f64>,
    pub median_jaccard: f64,
    pub selected: Vec<Vec<usize>>,
    pub power: Vec<Option<f64>>,
    pub instability: InstabilityProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub repeats: usize,
    pub strategies: Vec<StrategyStability>,
}

impl StabilityReport {
    pub fn strategy(&self, label: &str) -> Option<&StrategyStability> {
        self.strategies.iter().find(|s| s.strategy == label)
    }
}

/// Retrain the whole grid `n_repeats` times on one replicate's data and
/// knockoffs, changing only the model seeds (initialization, dropout and
/// batch order). With `fixed_init`, every repeat reuses the same seed.
pub fn stability_experiment(cfg: &ExperimentConfig, n_repeats: usize, fixed_init: bool) -> Result<StabilityReport> {
    cfg.validate()?;
    if n_repeats < 2 {
        return Err(Error::Config("stability needs at least 2 repeats".into()));
    }
    let base = load_base(cfg)?;
    let rep_seed = cfg.replicate_seed(0);
    let data = prepare_replicate(cfg, base.as_ref(), rep_seed)?;
    let grid_seed = seed::derive(rep_seed, seed::TAG_GRID);

    let repeats: Vec<Result<Vec<Scored>>> = with_workers(cfg.workers, || {
        (0..n_repeats)
            .into_par_iter()
            .map(|i| {
                let init = if fixed_init { 0 } else { i as u64 };
                let grid = GridSpec {
                    seed: grid_seed,
                    init_seed: Some(seed::derive(seed::derive(rep_seed, seed::TAG_REPEAT), init)),
                    ..cfg.grid.clone()
                };
                let store = run_grid(&data.dataset, &data.xaug, &grid)?;
                select_all(cfg, &store, &data.dataset, i, rep_seed, None)
            })
            .collect()
    })?;
    let repeats: Vec<Vec<Scored>> = repeats.into_iter().collect::<Result<_>>()?;

    let mut strategies = Vec::new();
    for (s, spec) in cfg.ensembles.iter().enumerate() {
        let selected: Vec<Vec<usize>> = repeats.iter().map(|r| r[s].0.selected.clone()).collect();
        let zs: Vec<Vec<f64>> = repeats.iter().map(|r| r[s].1.clone()).collect();
        let jaccard = pairwise_jaccard(&selected);
        strategies.push(StrategyStability {
            strategy: spec.label(),
            median_jaccard: median(&jaccard),
            jaccard,
            power: repeats.iter().map(|r| r[s].0.power).collect(),
            selected: selected.iter().map(|v| v.iter().map(|j| j + 1).collect()).collect(),
            instability: instability_profile(&zs)?,
        });
    }
    let report = StabilityReport {
        repeats: n_repeats,
        strategies,
    };
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("stability.json"), &report)?;
        let path = dir.join("stability_jaccard.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(w, "strategy,run_a,run_b,jaccard").map_err(io)?;
        for s in &report.strategies {
            let mut k = 0;
            for a in 0..n_repeats {
                for b in (a + 1)..n_repeats {
                    writeln!(w, "{},{},{},{}", s.strategy, a + 1, b + 1, s.jaccard[k]).map_err(io)?;
                    k += 1;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.replicates = 2;
        cfg.data = DataSource::Simulated(SimConfig {
            n: 80,
            p: 8,
            r: 2,
            s: 3,
            amplitude: 5.0,
            noise_scale: 1.0,
            task: Task::Regression,
            seed: 0,
        });
        cfg.grid.lambdas = vec![1e-3, 1e-2];
        cfg.grid.epochs = 4;
        cfg.grid.folds = 2;
        cfg.grid.hidden = 4;
        cfg.ensembles = vec![
            EnsembleSpec::new(Strategy::Best, 1),
            EnsembleSpec::new(Strategy::Avg, 1),
            EnsembleSpec::new(Strategy::TopM, 3),
            EnsembleSpec::new(Strategy::MInfluential, 3),
        ];
        cfg
    }

    #[test]
    fn profiles_validate_and_round_trip_toml() {
        for p in [Profile::Desk, Profile::Paper] {
            let cfg = ExperimentConfig::profile(p);
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        let paper = ExperimentConfig::profile(Profile::Paper);
        let settings = paper.grid.settings().len();
        assert_eq!(settings * paper.grid.epochs, 90_000);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.q = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.replicate_seeds = Some(vec![1]);
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
    }

    #[test]
    fn minimal_run_gives_one_report() {
        let mut cfg = tiny();
        cfg.replicates = 1;
        cfg.grid.lambdas = vec![1e-3];
        cfg.grid.epochs = 1;
        cfg.ensembles = vec![EnsembleSpec::new(Strategy::Best, 1)];
        let dir = tempfile::tempdir().unwrap();
        cfg.out_dir = Some(dir.path().to_path_buf());
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        let reports: Vec<_> = std::fs::read_dir(dir.path().join("replicate_001/selections"))
            .unwrap()
            .collect();
        assert_eq!(reports.len(), 1);
        for f in ["results.csv", "summary.csv", "config.toml"] {
            assert!(dir.path().join(f).exists());
        }
        for f in ["data.csv", "truth.json", "knockoff_model.json", "augmented.csv", "trajectories/manifest.json"] {
            assert!(dir.path().join("replicate_001").join(f).exists(), "{f}");
        }
    }

    #[test]
    fn rows_and_summary_shape() {
        let res = run_experiment(&tiny()).unwrap();
        assert_eq!(res.rows.len(), 2 * 4);
        assert_eq!(res.summary.len(), 4);
        for s in &res.summary {
            assert_eq!(s.replicates, 2);
            let p = s.mean_power.unwrap();
            let f = s.mean_fdp.unwrap();
            assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&f));
        }
        assert!(res.summary_for("top_m(3)").is_some());
    }

    #[test]
    fn permuting_replicate_seeds_permutes_rows() {
        let mut a = tiny();
        a.replicate_seeds = Some(vec![11, 22]);
        let mut b = tiny();
        b.replicate_seeds = Some(vec![22, 11]);
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        assert_eq!(ra.summary, rb.summary);
        let key = |r: &ReplicateRow| (r.strategy.clone(), r.n_selected, r.power.map(f64::to_bits));
        let mut ka: Vec<_> = ra.rows.iter().map(key).collect();
        let mut kb: Vec<_> = rb.rows.iter().map(key).collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
    }

    #[test]
    fn multiple_knockoff_pipeline_runs() {
        let mut cfg = tiny();
        cfg.copies = 3;
        cfg.replicates = 1;
        cfg.ensembles[3].percentile_filter = Some(50.0);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 4);
    }

    #[test]
    fn csv_source_pipeline_has_no_power() {
        let ds = simulate(&SimConfig {
            n: 60,
            p: 5,
            r: 2,
            s: 2,
            amplitude: 3.0,
            noise_scale: 1.0,
            task: Task::Regression,
            seed: 3,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let mut cfg = tiny();
        cfg.replicates = 1;
        cfg.data = DataSource::Csv {
            path,
            response: "y".into(),
            covariates: vec![],
            standardize: true,
        };
        let res = run_experiment(&cfg).unwrap();
        assert!(res.rows.iter().all(|r| r.power.is_none()));
        assert!(res.summary[0].mean_power.is_none());
    }

    #[test]
    fn stability_pairs_and_fixed_init() {
        let mut cfg = tiny();
        cfg.grid.dropout_prob = 0.0;
        let report = stability_experiment(&cfg, 3, true).unwrap();
        for s in &report.strategies {
            assert_eq!(s.jaccard.len(), 3);
            assert!(s.jaccard.iter().all(|j| *j == 1.0), "{}: {:?}", s.strategy, s.jaccard);
        }
        assert!(stability_experiment(&cfg, 1, false).is_err());
        let report = stability_experiment(&cfg, 5, false).unwrap();
        assert_eq!(report.strategies[0].jaccard.len(), 10);
    }

    #[test]
    fn amplitude_sweep_writes_table() {
        let mut cfg = tiny();
        cfg.replicates = 1;
        cfg.grid.epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        cfg.out_dir = Some(dir.path().to_path_buf());
        let out = run_amplitude_sweep(&cfg, &[2.0, 4.0]).unwrap();
        assert_eq!(out.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
    }
}
