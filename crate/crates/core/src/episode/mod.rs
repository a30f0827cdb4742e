//! Few-shot episodes: synthetic N-way K-shot sampling from disjoint latent
//! class pools, CSV persistence, and a nearest-centroid difficulty oracle.

mod csv;
mod generator;
mod oracle;

pub use self::csv::{load_episodes, read_episodes, save_episodes, write_episodes};
pub use generator::{mix_seed, GeneratorConfig, GeneratorKind, TaskGenerator};
pub use oracle::centroid_oracle;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// Where an episode came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMeta {
    pub generator: String,
    pub seed: u64,
    pub episode_id: u64,
    pub split: Split,
    /// Latent class id behind each episode-local label.
    pub classes: Vec<usize>,
}

/// One few-shot task. Rows of `train_x` / `test_x` are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub train_x: Tensor<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Tensor<f64>,
    pub test_y: Vec<usize>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.meta.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.train_x.cols()
    }

    /// Checks label balance: each of the `N` classes appears equally often
    /// in train and equally often in test.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let n = self.n_way();
        for (role, x, y) in [("train", &self.train_x, &self.train_y), ("test", &self.test_x, &self.test_y)] {
            if x.rows() != y.len() || x.cols() != self.dim() {
                return Err(EpisodeError::Invalid(format!(
                    "{role} split has {} rows of width {} but {} labels",
                    x.rows(),
                    x.cols(),
                    y.len()
                )));
            }
            let mut counts = vec![0usize; n];
            for &label in y {
                if label >= n {
                    return Err(EpisodeError::Invalid(format!("{role} label {label} outside 0..{n}")));
                }
                counts[label] += 1;
            }
            if let Some(class) = counts.iter().position(|&c| c != counts[0] || c == 0) {
                return Err(EpisodeError::Invalid(format!(
                    "{role} class {class} appears {} times, class 0 appears {}",
                    counts[class], counts[0]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("cannot draw {n_way} classes from the {split} pool of {pool} classes")]
    PoolTooSmall { split: Split, n_way: usize, pool: usize },
    #[error("no episodes for split {0} in the episode file")]
    EmptySplit(Split),
    #[error("invalid generator settings: {0}")]
    Config(String),
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: episode {episode} {role} class {class} appears {count} times, expected {expected}")]
    LabelCount {
        line: usize,
        episode: u64,
        role: &'static str,
        class: usize,
        count: usize,
        expected: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
