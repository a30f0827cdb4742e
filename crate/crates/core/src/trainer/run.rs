use std::collections::HashMap;

use crate::autodiff::Graph;
use crate::engine::{inner_loop, predict, Ablation, AMode, FrozenValues, VMode};
use crate::episode::{Episode, Split, TaskGenerator};

use super::step::{meta_step, ordered_map, training_seeds, StepOutcome};
use super::{HistoryRow, MetaState, RunConfig, TrainError};

/// Consecutive rejected steps after which a run is abandoned.
const MAX_REJECTED: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    /// Mean `alpha_m` / `v_m` over the evaluated episodes.
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn summarize_accuracies(acc: &[f64]) -> Result<(f64, f64), TrainError> {
    let n = acc.len();
    if n < 2 {
        return Err(TrainError::TooFewEpisodes(n));
    }
    let mean = acc.iter().sum::<f64>() / n as f64;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Episode seeds used for evaluation; shared by every run and cell.
pub fn evaluation_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).collect()
}

/// Accuracy of the state on `count` episodes of `split`. Never modifies
/// the state.
pub fn evaluate(
    state: &MetaState,
    generator: &TaskGenerator,
    split: Split,
    count: usize,
    workers: usize,
) -> Result<EvalResult, TrainError> {
    if count < 2 {
        return Err(TrainError::TooFewEpisodes(count));
    }
    let c = &state.config;
    let cfg = c.inner(state.frozen.clone())?;
    let seeds = evaluation_seeds(count);
    let results = ordered_map(&seeds, workers, |&s| -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
        let ep = generator.sample_episode(split, c.n_way, c.k_shot, c.q_query, s)?;
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g);
        let trace = inner_loop(&mut g, &ep, &bound, &cfg)?;
        let (_, acc) = predict(&trace, &ep.test_y);
        Ok((acc, trace.alphas, trace.vs))
    });
    let mut accuracies = Vec::with_capacity(count);
    let mut alpha = vec![0.0; c.epochs];
    let mut v = vec![0.0; c.epochs];
    for r in results {
        let (acc, a, w) = r?;
        accuracies.push(acc);
        for m in 0..c.epochs {
            alpha[m] += a[m] / count as f64;
            v[m] += w[m] / count as f64;
        }
    }
    let (mean, ci95) = summarize_accuracies(&accuracies)?;
    Ok(EvalResult {
        mean,
        ci95,
        accuracies,
        alpha,
        v,
    })
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    /// State with the highest validation accuracy (earliest on ties).
    pub best: MetaState,
    pub best_iteration: u64,
    /// State after the last iteration.
    pub last: MetaState,
    pub history: Vec<HistoryRow>,
    /// Validation result before any meta step.
    pub initial_val: EvalResult,
    pub rejected_steps: usize,
}

/// Trains a fresh state built from `config`.
pub fn run_meta_training(config: &RunConfig, workers: usize) -> Result<TrainingReport, TrainError> {
    train(MetaState::init(config)?, workers)
}

/// Runs `state.config.meta_iterations` meta steps from `state`, validating
/// every `eval_every` iterations and after the last one.
pub fn train(state: MetaState, workers: usize) -> Result<TrainingReport, TrainError> {
    let c = state.config.clone();
    let generator = TaskGenerator::new(c.generator.clone())?;
    let initial_val = evaluate(&state, &generator, Split::Val, c.eval_episode_count, workers)?;
    log::info!("iteration 0: val accuracy {:.4}", initial_val.mean);
    let mut best = state.clone();
    let mut best_acc = initial_val.mean;
    let mut best_iteration = 0;
    let mut state = state;
    let mut history = Vec::new();
    let mut rejected_run = 0;
    let mut rejected_steps = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for it in 1..=c.meta_iterations as u64 {
        let batch = training_seeds(c.seed, it, c.meta_batch_size)
            .into_iter()
            .map(|s| generator.sample_episode(Split::Train, c.n_way, c.k_shot, c.q_query, s))
            .collect::<Result<Vec<Episode>, _>>()?;
        match meta_step(&mut state, &batch, workers)? {
            StepOutcome::Accepted { loss } => {
                rejected_run = 0;
                loss_sum += loss;
                loss_count += 1;
            }
            StepOutcome::Rejected { .. } => {
                rejected_run += 1;
                rejected_steps += 1;
                if rejected_run >= MAX_REJECTED {
                    return Err(TrainError::Diverged {
                        iteration: it,
                        rejected: rejected_run,
                    });
                }
            }
        }
        if it % c.eval_every as u64 == 0 || it == c.meta_iterations as u64 {
            let val = evaluate(&state, &generator, Split::Val, c.eval_episode_count, workers)?;
            let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
            log::info!("iteration {it}: val accuracy {:.4} (train loss {train_loss:.4})", val.mean);
            if val.mean > best_acc {
                best_acc = val.mean;
                best = state.clone();
                best_iteration = it;
            }
            history.push(HistoryRow {
                iteration: it,
                val_acc: val.mean,
                ci95: val.ci95,
                alpha: val.alpha,
                v: val.v,
                train_loss,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainingReport {
        best,
        best_iteration,
        last: state,
        history,
        initial_val,
        rejected_steps,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub result: EvalResult,
    pub best_iteration: u64,
    pub eval_seeds: Vec<u64>,
    /// Seeds of the first meta-batch, identical across cells.
    pub first_batch_seeds: Vec<u64>,
    /// Values the cell ran with, for the `optimal` cells.
    pub frozen: Option<FrozenValues>,
}

/// Trains and evaluates every cell of [`Ablation::grid`] under the same
/// seeds. The `optimal` cells reuse the per-epoch values learned by the
/// matching `learnable` cell.
pub fn run_ablation(
    config: &RunConfig,
    split: Split,
    episodes: usize,
    workers: usize,
) -> Result<Vec<AblationRow>, TrainError> {
    let generator = TaskGenerator::new(config.generator.clone())?;
    let mut done: HashMap<Ablation, (AblationRow, MetaState)> = HashMap::new();
    let mut rows = Vec::new();
    for cell in Ablation::grid() {
        if let Some((row, _)) = done.get(&cell) {
            rows.push(row.clone());
            continue;
        }
        let mut cfg = config.clone();
        cfg.ablation = cell;
        cfg.frozen_path = None;
        let source = match (cell.v_mode, cell.a_mode) {
            (VMode::Optimal, _) => Some(Ablation {
                v_mode: VMode::Learnable,
                a_mode: cell.a_mode,
            }),
            (_, AMode::Optimal) => Some(Ablation {
                v_mode: cell.v_mode,
                a_mode: AMode::Learnable,
            }),
            _ => None,
        };
        let frozen = source.map(|src| {
            let (_, st) = done.get(&src).expect("learnable cell runs before its optimal cell");
            FrozenValues {
                alpha: st.params.priors.alpha.clone(),
                v: st.params.priors.v.clone(),
            }
        });
        let state = MetaState::with_frozen(&cfg, frozen.clone())?;
        log::info!("ablation cell {cell}");
        let report = train(state, workers)?;
        let result = evaluate(&report.best, &generator, split, episodes, workers)?;
        let row = AblationRow {
            ablation: cell,
            result,
            best_iteration: report.best_iteration,
            eval_seeds: evaluation_seeds(episodes),
            first_batch_seeds: training_seeds(cfg.seed, 1, cfg.meta_batch_size),
            frozen,
        };
        rows.push(row.clone());
        done.insert(cell, (row, report.best));
    }
    Ok(rows)
}
