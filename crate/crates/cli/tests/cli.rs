use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use e3bm::engine::{Ablation, AMode, Combine, SummaryMode, VMode};
use e3bm::episode::GeneratorConfig;
use e3bm::nn::{HyperpriorKind, VInit};
use e3bm::trainer::{read_history, write_history, HistoryRow, MetaState, RunConfig, ThetaOptimizer};
use e3bm_cli::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_e3bm"));
    c.env_remove(SEED_ENV).env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny() -> RunConfig {
    RunConfig {
        n_way: 3,
        q_query: 3,
        epochs: 3,
        hyperprior_hidden: 4,
        base_hidden: 6,
        meta_batch_size: 2,
        meta_iterations: 8,
        eval_every: 4,
        eval_episode_count: 6,
        generator: GeneratorConfig {
            dim: 5,
            ..GeneratorConfig::default()
        },
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, config_to_toml(cfg)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

#[test]
fn shipped_configs_parse() {
    let load = |name: &str| load_config(&configs_dir().join(name), None).unwrap();
    assert_eq!(load("default.toml"), RunConfig::default());
    assert_eq!(load("slow-hyperprior.toml"), RunConfig::slow_hyperprior());
    assert!(load("constrained.toml").constrained);
    assert_eq!(load("maml.toml").ablation, Ablation::MAML);
    let large = load("large-lambda.toml");
    assert_eq!((large.lambda1, large.lambda2), (0.5, 0.5));
}

#[test]
fn print_defaults_round_trips() {
    let out = run(&["--print-defaults"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(parse_config(&text, None).unwrap(), RunConfig::default());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let defaults = config_to_toml(&tiny());
    let variants = [
        ("missing.toml", defaults.lines().filter(|l| !l.starts_with("lambda1")).collect::<Vec<_>>().join("\n"), "lambda1"),
        ("range.toml", defaults.replace("lambda1 = 0.0001", "lambda1 = 1.5"), "lambda1"),
        ("unknown.toml", format!("colour = 3\n{defaults}"), "colour"),
        ("type.toml", defaults.replace("epochs = 3", "epochs = \"three\""), "epochs"),
        ("pool.toml", defaults.replace("test_classes = 20", "test_classes = 2"), "generator.test_classes"),
        ("syntax.toml", "n_way = = 5".to_string(), ""),
        ("frozen.toml", defaults.replace("v_mode = \"e3bm\"", "v_mode = \"optimal\""), "frozen_path"),
    ];
    for (name, text, field) in variants {
        let path = d.join(name);
        fs::write(&path, text).unwrap();
        let out = run(&["train", "--config", s(&path), "--out", s(&d.join("run"))]);
        assert_eq!(code(&out), 2, "{name}: {}", stderr(&out));
        assert!(stderr(&out).contains(field), "{name}: {}", stderr(&out));
        // The grid sets the ablation of every cell itself.
        if name != "frozen.toml" {
            let out = run(&["ablate", "--config", s(&path), "--out", s(&d.join("abl"))]);
            assert_eq!(code(&out), 2, "{name}");
        }
    }
    assert!(!d.join("run").exists());

    let good = write_config(d, "good.toml", &tiny());
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["train", "--config", s(&good)],
        vec!["train", "--config", "/nonexistent/e3bm.toml", "--out", s(d)],
        vec!["train", "--config", s(&good), "--out", s(d), "--workers", "many"],
        vec!["train", "--config", s(&good), "--out", s(d), "--episodes", "1"],
        vec!["eval", "--state", "x.json", "--split", "holdout"],
        vec!["eval", "--state", "x.json", "--episodes", "1"],
        vec!["launch"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
    let out = bin()
        .env(SEED_ENV, "twelve")
        .args(["train", "--config", s(&good), "--out", s(d)])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(SEED_ENV));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corrupt = d.join("corrupt.json");
    fs::write(&corrupt, "{\"format\": \"e3bm-state\"").unwrap();
    let lonely = d.join("lonely");
    fs::create_dir(&lonely).unwrap();
    MetaState::init(&tiny()).unwrap().save(&lonely.join(STATE_FILE)).unwrap();
    let out_file = d.join("trace.csv");
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--state", s(&corrupt)],
        vec!["eval", "--state", "/nonexistent/state.json"],
        vec!["trace", "--state", s(&corrupt), "--out", s(&out_file)],
        vec!["trace", "--state", "/nonexistent/state.json", "--out", s(&out_file)],
    ];
    for args in &cases {
        let out = run(args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    // Snapshot without a history next to it.
    let state = lonely.join(STATE_FILE);
    let out = run(&["trace", "--state", s(&state), "--out", s(&out_file)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains(HISTORY_FILE));

    // Every meta step overflows, so the run is abandoned.
    let cfg = RunConfig {
        beta_theta: f64::MAX,
        ..tiny()
    };
    let path = write_config(d, "diverge.toml", &cfg);
    let out = run(&["train", "--config", s(&path), "--out", s(&d.join("run"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("rejected") || stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn train_eval_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.toml", &tiny());
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&cfg), "--out", s(out), "--episodes", "20"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(o.stdout.is_empty());
    };
    let (a, b, c) = (d.join("a"), d.join("b"), d.join("c"));
    train(&a, &[]);
    train(&b, &[]);
    train(&c, &["--workers", "3"]);
    for f in [STATE_FILE, HISTORY_FILE, METRICS_FILE] {
        assert!(a.join(f).is_file(), "{f}");
    }
    for other in [&b, &c] {
        for f in [STATE_FILE, HISTORY_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(other.join(f)).unwrap(), "{f}");
        }
        let mut ma = MetricsRecord::load(&a.join(METRICS_FILE)).unwrap();
        let mut mb = MetricsRecord::load(&other.join(METRICS_FILE)).unwrap();
        ma.wall_clock_seconds = 0.0;
        mb.wall_clock_seconds = 0.0;
        assert_eq!(ma, mb);
    }
    let m = MetricsRecord::load(&a.join(METRICS_FILE)).unwrap();
    assert_eq!(m.config_hash, config_hash(&tiny()));
    assert_eq!(m.config_hash.len(), 64);
    assert_eq!(m.ablation, "v1+a1");
    assert_eq!(m.history.len(), 2);
    assert_eq!(m.final_test.episodes, 20);

    // Seed precedence: flag over environment over file.
    let run_seed = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = bin();
        if let Some(e) = env {
            cmd.env(SEED_ENV, e);
        }
        cmd.args(["train", "--config", s(&cfg), "--out", s(out), "--episodes", "4"]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0);
        MetricsRecord::load(&out.join(METRICS_FILE)).unwrap()
    };
    let env = run_seed(&d.join("env"), Some("77"), None);
    assert_eq!(env.seed, 77);
    assert_ne!(env.config_hash, m.config_hash);
    assert_eq!(run_seed(&d.join("flag"), Some("77"), Some("5")).seed, 5);

    // Eval.
    let state = a.join(STATE_FILE);
    let o = run(&["eval", "--state", s(&state), "--episodes", "30"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let text: Vec<&str> = line.trim().split(" ±").collect();
    assert_eq!(text.len(), 2, "{line}");
    for part in text {
        let (int, frac) = part.split_once('.').unwrap();
        assert!(int.parse::<u32>().is_ok() && frac.len() == 1, "{line}");
    }
    let acc: Accuracy = serde_json::from_str(&fs::read_to_string(a.join("eval-test.json")).unwrap()).unwrap();
    assert_eq!(line.trim(), format_accuracy(acc.mean_acc, acc.ci95));
    assert_eq!(acc.episodes, 30);
    let custom = d.join("val.json");
    let o = run(&["eval", "--state", s(&state), "--split", "val", "--episodes", "5", "--out", s(&custom)]);
    assert_eq!(code(&o), 0);
    assert!(custom.is_file());

    // Trace.
    let out = d.join("plots/trace.csv");
    let o = run(&["trace", "--state", s(&state), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let points = read_trace(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(points.len(), 2 * 3 * 2);
    assert!(points.iter().all(|p| p.value.is_finite()));
}

#[test]
fn trace_row_count_for_three_epochs_and_a_hundred_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = RunConfig {
        meta_iterations: 100,
        eval_every: 1,
        eval_episode_count: 2,
        meta_batch_size: 1,
        constrained: true,
        ..tiny()
    };
    let path = write_config(d, "c.toml", &cfg);
    let o = run(&["train", "--config", s(&path), "--out", s(&d.join("r")), "--episodes", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = d.join("trace.csv");
    assert_eq!(cmd_trace(&d.join("r").join(STATE_FILE), &out).unwrap(), 600);
    let points = read_trace(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(points.len(), 600);
    assert!(points.iter().all(|p| p.value > 0.0 && p.value < 1.0));
}

#[test]
fn untrained_snapshot_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = RunConfig {
        meta_iterations: 0,
        ..RunConfig::default()
    };
    let path = write_config(d, "c.toml", &cfg);
    let o = run(&["train", "--config", s(&path), "--out", s(&d.join("r")), "--episodes", "2", "--workers", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let acc = cmd_eval(&d.join("r").join(STATE_FILE), e3bm::episode::Split::Test, 1000, None, 4).unwrap();
    assert!((acc.mean_acc - 0.2).abs() <= 0.03, "{}", acc.mean_acc);
}

#[test]
fn ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = RunConfig {
        meta_iterations: 4,
        eval_every: 2,
        fixed_alpha: 0.3,
        ..tiny()
    };
    let path = write_config(d, "c.toml", &cfg);
    let out = d.join("abl");
    let o = run(&["ablate", "--config", s(&path), "--out", s(&out), "--episodes", "12", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = read_ablation_csv(&fs::read_to_string(out.join(ABLATION_CSV)).unwrap()).unwrap();
    let cells: Vec<&str> = lines.iter().map(|l| l.cell.as_str()).collect();
    assert_eq!(cells, ["v1+a4", "v2+a4", "v3+a4", "v4+a4", "v5+a4", "v5+a1", "v5+a2", "v5+a3", "v5+a4"]);
    for l in &lines {
        assert_eq!(l.eval_seeds_sha256, lines[0].eval_seeds_sha256);
        assert_eq!(l.train_seeds_sha256, lines[0].train_seeds_sha256);
    }
    let table = fs::read_to_string(out.join(ABLATION_TABLE)).unwrap();
    assert_eq!(table.lines().count(), 10);
    let seeds: Vec<CellSeeds> = serde_json::from_str(&fs::read_to_string(out.join(ABLATION_SEEDS)).unwrap()).unwrap();
    assert_eq!(seeds.len(), 9);
    assert!(seeds.iter().all(|c| c.eval == seeds[0].eval && c.first_batch == seeds[0].first_batch));
    assert_eq!(seeds[0].eval, (0..12).collect::<Vec<u64>>());
    let frozen: Vec<CellFrozen> = serde_json::from_str(&fs::read_to_string(out.join(ABLATION_FROZEN)).unwrap()).unwrap();
    assert_eq!(frozen.len(), 2);

    // The (v5, a4) cell is the plain MAML baseline trained on its own.
    let maml = RunConfig {
        ablation: Ablation::MAML,
        ..cfg.clone()
    };
    let m = train_config(&maml, &d.join("maml"), &TrainOptions {
        workers: 1,
        episodes: 12,
    })
    .unwrap();
    let cell = lines.iter().find(|l| l.cell == Ablation::MAML.to_string()).unwrap();
    assert!((cell.mean_acc - m.final_test.mean_acc).abs() * 100.0 < 0.1);
}

fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let v_mode = VMode::ALL[rng.random_range(0..VMode::ALL.len())];
    let a_mode = AMode::ALL[rng.random_range(0..AMode::ALL.len())];
    let n_way = rng.random_range(2..6);
    RunConfig {
        n_way,
        k_shot: rng.random_range(1..4),
        q_query: rng.random_range(1..5),
        epochs: rng.random_range(1..6),
        mode: if rng.random() { SummaryMode::Inductive } else { SummaryMode::Transductive },
        hyperprior: if rng.random() { HyperpriorKind::Fc } else { HyperpriorKind::Lstm },
        hyperprior_hidden: rng.random_range(1..9),
        base_hidden: rng.random_range(1..9),
        meta_batch_size: rng.random_range(1..5),
        meta_iterations: rng.random_range(0..5),
        eval_every: rng.random_range(1..4),
        eval_episode_count: rng.random_range(2..5),
        beta1: pick(rng, 1e-7, 1e-2),
        beta2: pick(rng, 1e-7, 1e-2),
        beta_theta: pick(rng, 1e-5, 1e-1),
        theta_optimizer: if rng.random() { ThetaOptimizer::Sgd } else { ThetaOptimizer::Adam },
        lambda1: pick(rng, 1e-5, 0.99),
        lambda2: pick(rng, 1e-5, 0.99),
        fixed_alpha: pick(rng, 1e-4, 0.5),
        alpha_init: pick(rng, 1e-4, 0.5),
        v_init: if rng.random() { VInit::Uniform } else { VInit::LastOne },
        constrained: rng.random(),
        combine: if rng.random() { Combine::Logits } else { Combine::Probabilities },
        ablation: Ablation { v_mode, a_mode },
        frozen_path: None,
        seed: rng.random(),
        generator: GeneratorConfig {
            dim: rng.random_range(1..7),
            train_classes: n_way + rng.random_range(0..5),
            val_classes: n_way + rng.random_range(0..5),
            test_classes: n_way + rng.random_range(0..5),
            separation: pick(rng, 0.1, 4.0),
            noise_sigma: pick(rng, 0.0, 1.0),
            seed: rng.random(),
            ..GeneratorConfig::default()
        },
    }
}

#[test]
fn artifacts_round_trip_over_random_configs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    for i in 0..20 {
        let mut cfg = random_config(&mut rng);
        if cfg.ablation.needs_frozen() {
            cfg.ablation = Ablation::E3BM;
        }
        let back = parse_config(&config_to_toml(&cfg), None).unwrap();
        assert_eq!(back, cfg, "config {i}");
        assert_eq!(config_hash(&back), config_hash(&cfg));

        let out = d.join(format!("run{i}"));
        let m = train_config(&cfg, &out, &TrainOptions { workers: 1, episodes: 3 }).unwrap();
        assert_eq!(MetricsRecord::load(&out.join(METRICS_FILE)).unwrap(), m);
        let state = MetaState::load(&out.join(STATE_FILE)).unwrap();
        assert_eq!(state.config, cfg);
        assert_eq!(MetaState::from_json(&state.to_json()).unwrap(), state);
        let history = fs::read(out.join(HISTORY_FILE)).unwrap();
        let (epochs, rows) = read_history(history.as_slice()).unwrap();
        assert_eq!(epochs, cfg.epochs);
        assert_eq!(rows.len(), m.history.len());
        let mut again = Vec::new();
        write_history(&mut again, epochs, &rows).unwrap();
        assert_eq!(again, history);

        let trace = out.join("trace.csv");
        let n = cmd_trace(&out.join(STATE_FILE), &trace).unwrap();
        let points = read_trace(&fs::read_to_string(&trace).unwrap()).unwrap();
        assert_eq!(points.len(), n);
        assert_eq!(points, trace_points(&rows));

        let acc = cmd_eval(&out.join(STATE_FILE), e3bm::episode::Split::Val, 3, None, 1).unwrap();
        let back: Accuracy = serde_json::from_str(&fs::read_to_string(out.join("eval-val.json")).unwrap()).unwrap();
        assert_eq!(back, acc);

        let lines = vec![AblationLine {
            cell: cfg.ablation.to_string(),
            v_mode: cfg.ablation.v_mode.as_str().into(),
            a_mode: cfg.ablation.a_mode.as_str().into(),
            mean_acc: rng.random(),
            ci95: rng.random(),
            best_iteration: rng.random_range(0..1000),
            eval_seeds_sha256: "ab".into(),
            train_seeds_sha256: "cd".into(),
        }];
        assert_eq!(read_ablation_csv(&write_ablation_csv(&lines)).unwrap(), lines);
    }
    let rows = vec![HistoryRow {
        iteration: 1,
        val_acc: 0.5,
        ci95: 0.1,
        alpha: vec![0.1],
        v: vec![f64::NAN],
        train_loss: 1.0,
    }];
    let mut csv = Vec::new();
    write_history(&mut csv, 1, &rows).unwrap();
    let run = d.join("nan");
    fs::create_dir(&run).unwrap();
    let cfg = RunConfig { epochs: 1, ..tiny() };
    MetaState::init(&cfg).unwrap().save(&run.join(STATE_FILE)).unwrap();
    fs::write(run.join(HISTORY_FILE), csv).unwrap();
    assert!(matches!(cmd_trace(&run.join(STATE_FILE), &d.join("t.csv")), Err(CliError::Runtime(_))));
}
