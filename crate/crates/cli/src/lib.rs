//! Command-line surface for E3BM runs: TOML configs, the train / eval /
//! ablate / trace subcommands and the files they write.
//!
//! Every subcommand reports failures as [`CliError`], whose exit code is 2
//! for configuration problems and 1 for anything that goes wrong at run time.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use e3bm::engine::FrozenValues;
use e3bm::episode::{GeneratorKind, Split, TaskGenerator};
use e3bm::trainer::{
    evaluate, read_history, run_ablation, run_meta_training, write_history, HistoryRow, MetaState, RunConfig,
    TrainError,
};

/// Overrides the config seed when set; `--seed` takes precedence over it.
pub const SEED_ENV: &str = "E3BM_SEED";

pub const STATE_FILE: &str = "state.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn runtime(what: impl std::fmt::Display) -> CliError {
    CliError::Runtime(what.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

// ---------------------------------------------------------------- config

/// TOML text of a config.
pub fn config_to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("config serializes to TOML")
}

/// Parses and validates a config. Relative paths inside it are taken
/// relative to `base`.
pub fn parse_config(text: &str, base: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
    if let Some(base) = base {
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        rebase(&mut config.frozen_path);
        rebase(&mut config.generator.path);
    }
    config.validate()?;
    Ok(config)
}

/// Seed precedence: `flag`, then `E3BM_SEED`, then the config file.
pub fn resolve_seed(config: &mut RunConfig, flag: Option<u64>) -> Result<(), CliError> {
    if let Some(seed) = flag {
        config.seed = seed;
    } else if let Ok(text) = std::env::var(SEED_ENV) {
        config.seed = text
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: `{text}` is not an unsigned integer")))?;
    }
    Ok(())
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = parse_config(&text, path.parent())?;
    resolve_seed(&mut config, seed)?;
    Ok(config)
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(canonical.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn seeds_hash(seeds: &[u64]) -> String {
    let text = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Percent accuracy with one decimal and its interval, e.g. `63.8 ±0.4`.
pub fn format_accuracy(mean: f64, ci95: f64) -> String {
    format!("{:.1} ±{:.1}", 100.0 * mean, 100.0 * ci95)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub split: Split,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub val_acc: f64,
    pub ci95: f64,
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
    /// Absent when every step since the previous row was rejected.
    pub train_loss: Option<f64>,
}

impl From<&HistoryRow> for HistoryEntry {
    fn from(r: &HistoryRow) -> Self {
        Self {
            iteration: r.iteration,
            val_acc: r.val_acc,
            ci95: r.ci95,
            alpha: r.alpha.clone(),
            v: r.v.clone(),
            train_loss: r.train_loss.is_finite().then_some(r.train_loss),
        }
    }
}

/// Summary of one training run, written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub ablation: String,
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
    pub initial_val: Accuracy,
    pub best_iteration: u64,
    pub rejected_steps: usize,
    pub final_test: Accuracy,
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

pub struct TrainOptions {
    pub workers: usize,
    /// Test episodes for the final evaluation.
    pub episodes: usize,
}

/// Trains from a loaded config and writes `state.json` (best-validation
/// state), `history.csv` and `metrics.json` into `out`.
pub fn train_config(config: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<MetricsRecord, CliError> {
    if opts.episodes < 2 {
        return Err(CliError::Config(format!("--episodes must be at least 2, got {}", opts.episodes)));
    }
    let start = Instant::now();
    let report = run_meta_training(config, opts.workers)?;
    let generator = TaskGenerator::new(config.generator.clone()).map_err(TrainError::from)?;
    let test = evaluate(&report.best, &generator, Split::Test, opts.episodes, opts.workers)?;
    log::info!("final test accuracy {}", format_accuracy(test.mean, test.ci95));

    create_dir(out)?;
    report.best.save(&out.join(STATE_FILE))?;
    let mut csv = Vec::new();
    write_history(&mut csv, config.epochs, &report.history).map_err(runtime)?;
    write_file(&out.join(HISTORY_FILE), csv)?;

    let hash = config_hash(config);
    let metrics = MetricsRecord {
        run_id: format!("e3bm-{}", &hash[..12]),
        config_hash: hash,
        ablation: config.ablation.to_string(),
        seed: config.seed,
        history: report.history.iter().map(HistoryEntry::from).collect(),
        initial_val: Accuracy {
            split: Split::Val,
            episodes: config.eval_episode_count,
            mean_acc: report.initial_val.mean,
            ci95: report.initial_val.ci95,
        },
        best_iteration: report.best_iteration,
        rejected_steps: report.rejected_steps,
        final_test: Accuracy {
            split: Split::Test,
            episodes: opts.episodes,
            mean_acc: test.mean,
            ci95: test.ci95,
        },
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&metrics).map_err(runtime)?;
    write_file(&out.join(METRICS_FILE), json + "\n")?;
    Ok(metrics)
}

pub fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>, opts: &TrainOptions) -> Result<MetricsRecord, CliError> {
    let config = load_config(config_path, seed)?;
    train_config(&config, out, opts)
}

// ---------------------------------------------------------------- eval

/// Evaluates a snapshot on `episodes` episodes of `split`. Writes the result
/// as JSON to `out`, or next to the snapshot as `eval-<split>.json`.
pub fn cmd_eval(
    state_path: &Path,
    split: Split,
    episodes: usize,
    out: Option<&Path>,
    workers: usize,
) -> Result<Accuracy, CliError> {
    if episodes < 2 {
        return Err(CliError::Config(format!(
            "--episodes must be at least 2 for a confidence interval, got {episodes}"
        )));
    }
    let state = MetaState::load(state_path)?;
    if state.config.generator.kind == GeneratorKind::File && state.config.generator.path.is_none() {
        return Err(CliError::Config("snapshot config names no episode file".into()));
    }
    let generator = TaskGenerator::new(state.config.generator.clone()).map_err(TrainError::from)?;
    let r = evaluate(&state, &generator, split, episodes, workers)?;
    let acc = Accuracy {
        split,
        episodes,
        mean_acc: r.mean,
        ci95: r.ci95,
    };
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => state_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{split}.json")),
    };
    let json = serde_json::to_string_pretty(&acc).map_err(runtime)?;
    write_file(&path, json + "\n")?;
    Ok(acc)
}

// ---------------------------------------------------------------- ablate

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_SEEDS: &str = "seeds.json";
pub const ABLATION_FROZEN: &str = "frozen.json";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationLine {
    pub cell: String,
    pub v_mode: String,
    pub a_mode: String,
    pub mean_acc: f64,
    pub ci95: f64,
    pub best_iteration: u64,
    pub eval_seeds_sha256: String,
    pub train_seeds_sha256: String,
}

const ABLATION_HEADER: &str = "cell,v_mode,a_mode,mean_acc,ci95,best_iteration,eval_seeds_sha256,train_seeds_sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub cell: String,
    pub eval: Vec<u64>,
    pub first_batch: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFrozen {
    pub cell: String,
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn write_ablation_csv(lines: &[AblationLine]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for l in lines {
        let _ = writeln!(
            s,
            "{},{},{},{:.16e},{:.16e},{},{},{}",
            l.cell, l.v_mode, l.a_mode, l.mean_acc, l.ci95, l.best_iteration, l.eval_seeds_sha256, l.train_seeds_sha256
        );
    }
    s
}

pub fn read_ablation_csv(text: &str) -> Result<Vec<AblationLine>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(runtime("ablation table: unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || runtime(format!("ablation table: malformed line {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            Ok(AblationLine {
                cell: f[0].into(),
                v_mode: f[1].into(),
                a_mode: f[2].into(),
                mean_acc: f[3].parse().map_err(|_| bad())?,
                ci95: f[4].parse().map_err(|_| bad())?,
                best_iteration: f[5].parse().map_err(|_| bad())?,
                eval_seeds_sha256: f[6].into(),
                train_seeds_sha256: f[7].into(),
            })
        })
        .collect()
}

fn ablation_table(lines: &[AblationLine]) -> String {
    let mut s = format!("{:<8} {:<11} {:<10} {:>12} {:>6}\n", "cell", "v_mode", "a_mode", "accuracy", "best");
    for l in lines {
        let _ = writeln!(
            s,
            "{:<8} {:<11} {:<10} {:>12} {:>6}",
            l.cell,
            l.v_mode,
            l.a_mode,
            format_accuracy(l.mean_acc, l.ci95),
            l.best_iteration
        );
    }
    s
}

pub struct AblateOptions {
    pub split: Split,
    pub episodes: usize,
    pub workers: usize,
}

/// Runs the nine-cell ablation grid and writes the comparison table as
/// CSV and aligned text, the seed lists of every cell and the values used
/// by the `optimal` cells.
pub fn ablate_config(config: &RunConfig, out: &Path, opts: &AblateOptions) -> Result<Vec<AblationLine>, CliError> {
    if opts.episodes < 2 {
        return Err(CliError::Config(format!("--episodes must be at least 2, got {}", opts.episodes)));
    }
    create_dir(out)?;
    let rows = run_ablation(config, opts.split, opts.episodes, opts.workers)?;
    let lines: Vec<AblationLine> = rows
        .iter()
        .map(|r| AblationLine {
            cell: r.ablation.to_string(),
            v_mode: r.ablation.v_mode.as_str().into(),
            a_mode: r.ablation.a_mode.as_str().into(),
            mean_acc: r.result.mean,
            ci95: r.result.ci95,
            best_iteration: r.best_iteration,
            eval_seeds_sha256: seeds_hash(&r.eval_seeds),
            train_seeds_sha256: seeds_hash(&r.first_batch_seeds),
        })
        .collect();
    let seeds: Vec<CellSeeds> = rows
        .iter()
        .map(|r| CellSeeds {
            cell: r.ablation.to_string(),
            eval: r.eval_seeds.clone(),
            first_batch: r.first_batch_seeds.clone(),
        })
        .collect();
    let frozen: Vec<CellFrozen> = rows
        .iter()
        .filter_map(|r| {
            r.frozen.as_ref().map(|f: &FrozenValues| CellFrozen {
                cell: r.ablation.to_string(),
                alpha: f.alpha.clone(),
                v: f.v.clone(),
            })
        })
        .collect();
    write_file(&out.join(ABLATION_CSV), write_ablation_csv(&lines))?;
    write_file(&out.join(ABLATION_TABLE), ablation_table(&lines))?;
    write_file(&out.join(ABLATION_SEEDS), serde_json::to_string(&seeds).map_err(runtime)? + "\n")?;
    write_file(&out.join(ABLATION_FROZEN), serde_json::to_string_pretty(&frozen).map_err(runtime)? + "\n")?;
    Ok(lines)
}

pub fn cmd_ablate(config_path: &Path, out: &Path, seed: Option<u64>, opts: &AblateOptions) -> Result<Vec<AblationLine>, CliError> {
    let config = load_config(config_path, seed)?;
    ablate_config(&config, out, opts)
}

// ---------------------------------------------------------------- trace

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Alpha,
    V,
}

impl Quantity {
    fn as_str(self) -> &'static str {
        match self {
            Quantity::Alpha => "alpha",
            Quantity::V => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: u64,
    pub quantity: Quantity,
    /// 1-based.
    pub epoch: usize,
    pub value: f64,
}

const TRACE_HEADER: &str = "iteration,quantity,epoch_index,value";

pub fn trace_points(rows: &[HistoryRow]) -> Vec<TracePoint> {
    let mut out = Vec::new();
    for r in rows {
        for (quantity, values) in [(Quantity::Alpha, &r.alpha), (Quantity::V, &r.v)] {
            for (m, &value) in values.iter().enumerate() {
                out.push(TracePoint {
                    iteration: r.iteration,
                    quantity,
                    epoch: m + 1,
                    value,
                });
            }
        }
    }
    out
}

pub fn write_trace(points: &[TracePoint]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{:.16e}", p.iteration, p.quantity.as_str(), p.epoch, p.value);
    }
    s
}

pub fn read_trace(text: &str) -> Result<Vec<TracePoint>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(runtime("trace: unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || runtime(format!("trace: malformed line {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TracePoint {
                iteration: f[0].parse().map_err(|_| bad())?,
                quantity: match f[1] {
                    "alpha" => Quantity::Alpha,
                    "v" => Quantity::V,
                    _ => return Err(bad()),
                },
                epoch: f[2].parse().map_err(|_| bad())?,
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Long-format alpha / v data from the `history.csv` next to a snapshot.
/// Returns the number of data rows written.
pub fn cmd_trace(state_path: &Path, out: &Path) -> Result<usize, CliError> {
    let state = MetaState::load(state_path)?;
    let history_path = state_path.parent().unwrap_or(Path::new(".")).join(HISTORY_FILE);
    let file = fs::File::open(&history_path).map_err(|e| runtime(format!("cannot read {}: {e}", history_path.display())))?;
    let (epochs, rows) = read_history(std::io::BufReader::new(file))?;
    if epochs != state.config.epochs {
        return Err(runtime(format!(
            "{} has {epochs} epochs but the snapshot has {}",
            history_path.display(),
            state.config.epochs
        )));
    }
    let points = trace_points(&rows);
    if let Some(p) = points.iter().find(|p| !p.value.is_finite()) {
        return Err(runtime(format!(
            "non-finite {} at iteration {}, epoch {}",
            p.quantity.as_str(),
            p.iteration,
            p.epoch
        )));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = fs::File::create(out).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    std::io::Write::write_all(&mut BufWriter::new(file), write_trace(&points).as_bytes())
        .map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    Ok(points.len())
}
