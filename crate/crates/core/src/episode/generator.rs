use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::{load_episodes, Episode, EpisodeError, EpisodeMeta, Split};

/// Combines seed components into one well-mixed 64-bit seed (SplitMix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    GaussianClusters,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Feature dimension `d`.
    pub dim: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    /// Class means are drawn from `U(-separation, separation)^d`.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Episode CSV, required when `kind = "file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::GaussianClusters,
            dim: 16,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
            separation: 2.0,
            noise_sigma: 0.5,
            seed: 2020,
            path: None,
        }
    }
}

impl GeneratorConfig {
    pub fn pool_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_classes,
            Split::Val => self.val_classes,
            Split::Test => self.test_classes,
        }
    }

    /// First latent class id of the split's pool; pools are disjoint ranges.
    fn pool_offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train_classes,
            Split::Test => self.train_classes + self.val_classes,
        }
    }
}

/// Immutable episode source. Sampling is a pure function of
/// `(seed, split, episode_seed)`.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    config: GeneratorConfig,
    means: Vec<Vec<f64>>,
    file_episodes: Vec<Episode>,
}

impl TaskGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self, EpisodeError> {
        match config.kind {
            GeneratorKind::GaussianClusters => {
                if config.dim == 0 {
                    return Err(EpisodeError::Config("dim must be at least 1".into()));
                }
                if !(config.separation > 0.0 && config.separation.is_finite()) {
                    return Err(EpisodeError::Config("separation must be positive".into()));
                }
                if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
                    return Err(EpisodeError::Config("noise_sigma must be non-negative".into()));
                }
                let total = config.train_classes + config.val_classes + config.test_classes;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0]));
                let s = config.separation;
                let means = (0..total)
                    .map(|_| (0..config.dim).map(|_| rng.random_range(-s..s)).collect())
                    .collect();
                Ok(Self {
                    config,
                    means,
                    file_episodes: Vec::new(),
                })
            }
            GeneratorKind::File => {
                let path = config
                    .path
                    .clone()
                    .ok_or_else(|| EpisodeError::Config("file generator needs `path`".into()))?;
                let file_episodes = load_episodes(&path)?;
                Ok(Self {
                    config,
                    means: Vec::new(),
                    file_episodes,
                })
            }
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        match self.config.kind {
            GeneratorKind::File => self.file_episodes.first().map_or(self.config.dim, Episode::dim),
            GeneratorKind::GaussianClusters => self.config.dim,
        }
    }

    /// Mean of latent class `class` (gaussian generator only).
    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// Latent class ids available to `split`.
    pub fn pool(&self, split: Split) -> std::ops::Range<usize> {
        let start = self.config.pool_offset(split);
        start..start + self.config.pool_size(split)
    }

    pub fn sample_episode(
        &self,
        split: Split,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        episode_seed: u64,
    ) -> Result<Episode, EpisodeError> {
        if k_shot == 0 || n_query == 0 || n_way == 0 {
            return Err(EpisodeError::Config("N, K and Q must be at least 1".into()));
        }
        if self.config.kind == GeneratorKind::File {
            return self.pick_from_file(split, n_way, episode_seed);
        }
        let pool = self.config.pool_size(split);
        if n_way > pool {
            return Err(EpisodeError::PoolTooSmall { split, n_way, pool });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, split.tag(), episode_seed]));
        // Sampled order doubles as the episode-local label permutation.
        let offset = self.config.pool_offset(split);
        let classes: Vec<usize> = sample(&mut rng, pool, n_way).into_iter().map(|i| offset + i).collect();

        let d = self.config.dim;
        let sigma = self.config.noise_sigma;
        let draw = |count: usize, rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(count * n_way * d);
            let mut labels = Vec::with_capacity(count * n_way);
            for (label, &class) in classes.iter().enumerate() {
                for _ in 0..count {
                    for &mu in &self.means[class] {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push(mu + sigma * z);
                    }
                    labels.push(label);
                }
            }
            (Tensor::new(vec![count * n_way, d], data).expect("sized"), labels)
        };
        let (train_x, train_y) = draw(k_shot, &mut rng);
        let (test_x, test_y) = draw(n_query, &mut rng);
        Ok(Episode {
            train_x,
            train_y,
            test_x,
            test_y,
            meta: EpisodeMeta {
                generator: "gaussian-clusters".into(),
                seed: self.config.seed,
                episode_id: episode_seed,
                split,
                classes,
            },
        })
    }

    fn pick_from_file(&self, split: Split, n_way: usize, episode_seed: u64) -> Result<Episode, EpisodeError> {
        let candidates: Vec<&Episode> = self.file_episodes.iter().filter(|e| e.meta.split == split).collect();
        if candidates.is_empty() {
            return Err(EpisodeError::EmptySplit(split));
        }
        let episode = candidates[(episode_seed % candidates.len() as u64) as usize];
        if episode.n_way() != n_way {
            return Err(EpisodeError::Invalid(format!(
                "file episode {} is {}-way, run expects {n_way}-way",
                episode.meta.episode_id,
                episode.n_way()
            )));
        }
        Ok(episode.clone())
    }
}
