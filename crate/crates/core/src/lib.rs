//! Controlled feature selection with model-X knockoffs, where feature
//! importance is an ensemble of input-gradient scores harvested across the
//! epochs and hyperparameter settings of a pairwise-connected network.
//!
//! The building blocks are usable on their own: [`datagen`] for data,
//! [`knockoff`] for knockoff construction, [`model`] and [`trainer`] for the
//! network and grid runs, [`ensemble`] for combining snapshots,
//! [`selection`] for the knockoff filter and [`metrics`] for evaluation.
//! [`pipeline`] wires them into replicated experiments.

pub mod datagen;
pub mod ensemble;
pub mod error;
pub mod knockoff;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod selection;
pub mod trainer;

pub use datagen::{Dataset, SimConfig, Task};
pub use ensemble::{EnsembleOutput, EnsembleSpec, Strategy};
pub use error::{Error, Result};
pub use knockoff::{KnockoffAugmentedData, KnockoffModel};
pub use model::{Network, NetworkConfig};
pub use pipeline::{ExperimentConfig, ExperimentResult, Profile, StabilityReport};
pub use selection::{FeatureStats, Selection, SelectionReport};
pub use trainer::{GridSpec, TrajectoryRecord, TrajectoryStore};
