//! The outer loop: meta-batches of episodes, meta-gradient steps on the
//! initializer, the hyperprior learners and the prior schedules, best-val
//! model selection, evaluation and the ablation grid.

mod config;
mod history;
mod run;
mod state;
mod step;

pub use config::{RunConfig, ThetaOptimizer};
pub use history::{read_history, write_history, HistoryRow};
pub use run::{
    evaluate, evaluation_seeds, run_ablation, run_meta_training, summarize_accuracies, AblationRow, EvalResult,
    TrainingReport,
};
pub use state::{AdamState, MetaState, SNAPSHOT_FORMAT, SNAPSHOT_VERSION};
pub use step::{episode_test_loss, meta_step, training_seeds, StepOutcome};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{EngineError, FrozenValues};
use crate::episode::EpisodeError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("{0}")]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("run aborted at iteration {iteration}: {rejected} consecutive steps rejected")]
    Diverged { iteration: u64, rejected: usize },
    #[error("evaluation needs at least 2 episodes, got {0}")]
    TooFewEpisodes(usize),
    #[error("empty meta-batch")]
    EmptyBatch,
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error("invalid history: {0}")]
    History(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for errors caused by invalid configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            TrainError::Config { .. } | TrainError::TooFewEpisodes(_) | TrainError::Engine(EngineError::Config(_))
        )
    }
}

pub fn load_frozen(path: &Path) -> Result<FrozenValues, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Config {
        field: "frozen_path",
        message: format!("{}: {e}", path.display()),
    })
}

pub fn save_frozen(path: &Path, values: &FrozenValues) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(values).expect("frozen values serialize");
    std::fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

#[cfg(test)]
mod tests;
