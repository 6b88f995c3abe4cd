use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_synthetic, Dataset, SyntheticSpec};
use crate::error::{contract, Result};
use crate::model::Hyperparameters;
use crate::replay::CentroidDivisor;
use crate::sessions::{Setup, ValidationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Binary dataset container.
    File { path: PathBuf },
    /// `id,class,f0..fD` rows; the train/test split is drawn from the run seed.
    Csv { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(spec) => make_synthetic(spec),
            DatasetSource::File { path } => Dataset::load(path),
            DatasetSource::Csv { path } => Dataset::read_csv(std::fs::File::open(path)?, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full objective with replay.
    Cvs,
    /// Discrimination loss only, no replay: the lower bound.
    Finetune,
    /// One model on all training data, gallery re-extracted: the upper bound.
    Joint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cvs => "cvs",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayBudget {
    Items(usize),
    /// Fraction of the plan's training items.
    Fraction(f64),
}

impl ReplayBudget {
    pub fn resolve(self, total_train: usize) -> usize {
        match self {
            ReplayBudget::Items(n) => n,
            ReplayBudget::Fraction(f) => (f * total_train as f64).round() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub use_m: bool,
    pub use_d: bool,
    pub use_replay_data: bool,
    pub use_replayed_embedding: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { use_m: true, use_d: true, use_replay_data: true, use_replayed_embedding: true }
    }
}

impl LossToggles {
    pub const NONE: LossToggles =
        LossToggles { use_m: false, use_d: false, use_replay_data: false, use_replayed_embedding: false };
}

/// Everything that determines a run. Serialized field-for-field as the CLI
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub setup: Setup,
    pub hyper: Hyperparameters,
    pub replay_budget: ReplayBudget,
    pub toggles: LossToggles,
    pub method: Method,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub validation: ValidationSpec,
    /// Share of each mini-batch drawn from the replay buffer when it is
    /// non-empty.
    pub replay_batch_fraction: f64,
    /// Exemplars are sampled from the `factor · quota` items nearest their
    /// class mean.
    pub candidate_pool_factor: usize,
    pub centroid_divisor: CentroidDivisor,
    pub negatives_include_replayed: bool,
    pub anchors_include_replayed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            setup: Setup::General { initial: 4, increment: 4, old_percent: 30.0, sessions: 5 },
            hyper: Hyperparameters::default(),
            replay_budget: ReplayBudget::Fraction(0.05),
            toggles: LossToggles::default(),
            method: Method::Cvs,
            output_dir: None,
            seed: 0,
            validation: ValidationSpec::Fraction(0.1),
            replay_batch_fraction: 0.25,
            candidate_pool_factor: 2,
            centroid_divisor: CentroidDivisor::ContributingSessions,
            negatives_include_replayed: true,
            anchors_include_replayed: true,
        }
    }
}

impl RunConfig {
    /// Toggles actually applied: finetune and joint train with the
    /// discrimination loss alone and keep no replay.
    pub fn effective_toggles(&self) -> LossToggles {
        match self.method {
            Method::Cvs => self.toggles,
            Method::Finetune | Method::Joint => LossToggles::NONE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let t = self.effective_toggles();
        if t.use_d && !t.use_replayed_embedding {
            return Err(contract("the data-coherence term needs replayed embeddings (use_replayed_embedding)"));
        }
        if !(0.0..1.0).contains(&self.replay_batch_fraction) {
            return Err(contract("replay_batch_fraction must lie in [0, 1)"));
        }
        if let ReplayBudget::Fraction(f) = self.replay_budget {
            if !(0.0..=1.0).contains(&f) {
                return Err(contract("replay budget fraction must lie in [0, 1]"));
            }
        }
        if self.setup.num_sessions() == 0 {
            return Err(contract("a run needs at least one session"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
