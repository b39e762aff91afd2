use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use trajknock::datagen::{load_csv, simulate, GroundTruth};
use trajknock::ensemble::{self, read_importance_csv};
use trajknock::knockoff::{fit_gaussian_model, read_augmented_csv, sample_knockoffs};
use trajknock::metrics::power_fdp;
use trajknock::pipeline::{run_amplitude_sweep, run_experiment, stability_experiment};
use trajknock::selection::select;
use trajknock::trainer::{log_spaced, run_grid_resumable, ImportanceMethod};
use trajknock::{Error, EnsembleSpec, ExperimentConfig, GridSpec, Profile, Result, SelectionReport, SimConfig, Strategy, Task};

#[derive(Parser)]
#[command(name = "trajknock", version, about = "Knockoff selection with training-trajectory importance ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a factor-model dataset with a sparse linear signal.
    Simulate(SimulateArgs),
    /// Fit a Gaussian knockoff model and write the augmented matrix.
    Knockoffs(KnockoffArgs),
    /// Train the hyperparameter grid and record every epoch's importance.
    Train(TrainArgs),
    /// Combine trajectory records into one importance vector.
    Ensemble(EnsembleArgs),
    /// Apply the knockoff filter to an importance vector.
    Select(SelectArgs),
    /// Score a selection against the true support.
    Evaluate(EvaluateArgs),
    /// Run replicated experiments end to end.
    Pipeline(ExperimentArgs),
    /// Retrain under different seeds and measure selection stability.
    Stability(StabilityArgs),
    /// Print a built-in profile as TOML.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Binary,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 10)]
    s: usize,
    #[arg(long, default_value_t = 20.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, value_enum, default_value = "regression")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `data.csv` and `truth.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Numeric CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    response: String,
    /// Columns passed to the network head but never selected.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Keep raw feature scales.
    #[arg(long)]
    no_standardize: bool,
}

impl DataArgs {
    fn load(&self) -> Result<trajknock::Dataset> {
        load_csv(&self.data, &self.response, &self.covariates, !self.no_standardize)
    }
}

#[derive(Args)]
struct KnockoffArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Knockoff copies per feature.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `knockoff_model.json` and `augmented.csv`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Augmented matrix written by `knockoffs`.
    #[arg(long)]
    augmented: PathBuf,
    /// TOML grid; overrides the grid flags below.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    lambda_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    lambda_max: f64,
    #[arg(long, default_value_t = 20)]
    n_lambdas: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    depths: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 25)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Use pairwise-weight importance instead of input gradients.
    #[arg(long)]
    weight_importance: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Trajectory directory; completed settings found here are reused.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Trajectory directory written by `train`.
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Percentile (0-100) of CV loss a record must not exceed.
    #[arg(long)]
    percentile_filter: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output importance CSV; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Importance CSV with columns `index,z`.
    #[arg(long)]
    importance: PathBuf,
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 0.2)]
    q: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.profile) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::profile(p.into()),
            (None, None) => ExperimentConfig::profile(Profile::Desk),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
            cfg.replicate_seeds = None;
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir.clone();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Reuse one initialization seed for every repeat.
    #[arg(long)]
    fixed_init: bool,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let ds = simulate(&SimConfig {
                n: a.n,
                p: a.p,
                r: a.r,
                s: a.s,
                amplitude: a.amplitude,
                noise_scale: a.noise_scale,
                task: match a.task {
                    TaskArg::Regression => Task::Regression,
                    TaskArg::Binary => Task::Binary,
                },
                seed: a.seed,
            })?;
            create_dir(&a.out_dir)?;
            ds.write_csv(&a.out_dir.join("data.csv"))?;
            ds.write_truth_json(&a.out_dir.join("truth.json"))?;
            info!("wrote {} rows to {}", ds.n(), a.out_dir.display());
        }
        Command::Knockoffs(a) => {
            let ds = a.data.load()?;
            let model = fit_gaussian_model(&ds.x, a.copies)?;
            let aug = sample_knockoffs(&ds.x, &model, a.seed)?;
            create_dir(&a.out_dir)?;
            model.write_json(&a.out_dir.join("knockoff_model.json"))?;
            aug.write_csv(&a.out_dir.join("augmented.csv"))?;
            info!("shrinkage {:.3e}", model.shrinkage);
        }
        Command::Train(a) => {
            let ds = a.data.load()?;
            let (xaug, p) = read_augmented_csv(&a.augmented)?;
            if p != ds.p() {
                return Err(Error::Dimension {
                    context: "augmented feature count",
                    expected: ds.p(),
                    got: p,
                });
            }
            let grid = match &a.grid {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    toml::from_str(&text)?
                }
                None => GridSpec {
                    lambdas: log_spaced(a.lambda_min, a.lambda_max, a.n_lambdas),
                    depths: a.depths.clone(),
                    epochs: a.epochs,
                    folds: a.folds,
                    batch_size: a.batch_size,
                    learning_rate: a.learning_rate,
                    hidden: a.hidden,
                    dropout_prob: a.dropout,
                    importance: if a.weight_importance {
                        ImportanceMethod::PairwiseWeight
                    } else {
                        ImportanceMethod::InputGradient
                    },
                    seed: a.seed,
                    init_seed: None,
                },
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers.unwrap_or(0)).build();
            let store = match pool {
                Ok(pool) => pool.install(|| run_grid_resumable(&ds, &xaug, &grid, &a.out_dir))?,
                Err(_) => run_grid_resumable(&ds, &xaug, &grid, &a.out_dir)?,
            };
            info!("{} records, {} failed settings", store.len(), store.failed.len());
        }
        Command::Ensemble(a) => {
            let store = trajknock::TrajectoryStore::load(&a.trajectories)?;
            let spec = EnsembleSpec {
                strategy: a.strategy,
                m: a.m,
                percentile_filter: a.percentile_filter,
                seed: a.seed,
            };
            let out = ensemble::build(&store, &spec)?;
            out.write(&spec, &store, &a.out, &a.out.with_extension("json"))?;
        }
        Command::Select(a) => {
            let z = read_importance_csv(&a.importance)?;
            let (stats, sel) = select(&z, a.copies, a.q)?;
            SelectionReport::new(a.q, &stats, &sel, None).write(&a.out)?;
            println!("selected {} features", sel.selected.len());
        }
        Command::Evaluate(a) => {
            let report = SelectionReport::read(&a.selection)?;
            let truth = GroundTruth::read(&a.truth)?;
            let m = power_fdp(&report.selected_zero_based(), &truth.support_zero_based())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Pipeline(a) => {
            let cfg = a.resolve()?;
            let results = match &cfg.amplitudes {
                Some(amps) => run_amplitude_sweep(&cfg, amps)?,
                None => vec![(f64::NAN, run_experiment(&cfg)?)],
            };
            println!("amplitude,strategy,mean_power,mean_fdp,mean_n_selected");
            for (amp, res) in &results {
                for s in &res.summary {
                    println!("{amp},{},{},{},{:.2}", s.strategy, fmt(s.mean_power), fmt(s.mean_fdp), s.mean_n_selected);
                }
            }
        }
        Command::Stability(a) => {
            let cfg = a.experiment.resolve()?;
            let report = stability_experiment(&cfg, a.repeats, a.fixed_init)?;
            println!("strategy,median_jaccard,median_instability");
            for s in &report.strategies {
                let mut inst: Vec<f64> = s.instability.instability.iter().copied().filter(|v| v.is_finite()).collect();
                inst.sort_by(f64::total_cmp);
                let med = if inst.is_empty() { f64::NAN } else { inst[inst.len() / 2] };
                println!("{},{:.3},{:.3}", s.strategy, s.median_jaccard, med);
            }
        }
        Command::Config { profile } => {
            print!("{}", ExperimentConfig::profile(profile.into()).to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
