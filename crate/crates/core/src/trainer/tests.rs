use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::engine::{inner_loop, predict, Ablation, AMode, InnerTrace, VMode};
use crate::episode::{Episode, GeneratorConfig, Split, TaskGenerator};
use crate::nn::{FcHyperprior, Hyperprior, ParamSet};
use crate::testutil::{fd_grad, random};

fn tiny() -> RunConfig {
    RunConfig {
        n_way: 3,
        k_shot: 1,
        q_query: 2,
        epochs: 2,
        hyperprior_hidden: 4,
        base_hidden: 5,
        meta_batch_size: 2,
        meta_iterations: 6,
        eval_every: 3,
        eval_episode_count: 4,
        beta1: 1e-2,
        beta2: 1e-2,
        beta_theta: 1e-2,
        lambda1: 0.3,
        lambda2: 0.6,
        alpha_init: 0.2,
        fixed_alpha: 0.2,
        generator: GeneratorConfig {
            dim: 4,
            ..GeneratorConfig::default()
        },
        ..RunConfig::default()
    }
}

fn generator(cfg: &RunConfig) -> TaskGenerator {
    TaskGenerator::new(cfg.generator.clone()).unwrap()
}

fn batch(cfg: &RunConfig, seeds: std::ops::Range<u64>) -> Vec<Episode> {
    let gen = generator(cfg);
    seeds
        .map(|s| gen.sample_episode(Split::Train, cfg.n_way, cfg.k_shot, cfg.q_query, s).unwrap())
        .collect()
}

/// Perturbs every meta tensor so that no gradient path starts at zero.
fn scrambled(cfg: &RunConfig) -> MetaState {
    let mut state = MetaState::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for t in state.params.psi_a.tensors_mut().into_iter().chain(state.params.psi_v.tensors_mut()) {
        let noise = random(&mut rng, t.shape(), -0.1, 0.1);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    state
}

fn loss_of(state: &MetaState, ep: &Episode) -> f64 {
    let cfg = state.config.inner(state.frozen.clone()).unwrap();
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g);
    let trace = inner_loop(&mut g, ep, &bound, &cfg).unwrap();
    let loss = episode_test_loss(&mut g, &trace, &ep.test_y).unwrap();
    g.value(loss).item()
}

#[test]
fn test_loss_examples() {
    let trace = |rows: Vec<Vec<f64>>, g: &mut Graph<f64>| {
        let y_hat_value = Tensor::from_rows(&rows);
        InnerTrace {
            alphas: vec![],
            vs: vec![],
            train_losses: vec![],
            y_hat: g.param(y_hat_value.clone()),
            y_hat_value,
            per_epoch_scores: None,
            adapted: vec![],
        }
    };
    let mut g = Graph::new();
    let t = trace(vec![vec![0.0; 5]; 3], &mut g);
    let l = episode_test_loss(&mut g, &t, &[0, 3, 4]).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-15);

    let t = trace(vec![vec![800.0, 0.0], vec![0.0, 800.0]], &mut g);
    let l = episode_test_loss(&mut g, &t, &[0, 1]).unwrap();
    assert!(g.value(l).item() < 1e-300);

    let t = trace(vec![vec![0.5, -1.0], vec![2.0, 0.25]], &mut g);
    let l = episode_test_loss(&mut g, &t, &[1, 1]).unwrap();
    let want = ((0.5f64.exp() + (-1.0f64).exp()).ln() + 1.0 + (2.0f64.exp() + 0.25f64.exp()).ln() - 0.25) / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn zero_rates_change_only_the_iteration() {
    for ablation in Ablation::grid().into_iter().filter(|a| !a.needs_frozen()) {
        let cfg = RunConfig {
            beta1: 0.0,
            beta2: 0.0,
            beta_theta: 0.0,
            ablation,
            ..tiny()
        };
        let mut state = scrambled(&tiny());
        state.config = cfg.clone();
        let before = state.clone();
        let out = meta_step(&mut state, &batch(&cfg, 0..2), 1).unwrap();
        assert!(matches!(out, StepOutcome::Accepted { .. }));
        assert_eq!(state.iteration, 1);
        assert_eq!(state.params, before.params, "{ablation}");
    }
}

#[test]
fn meta_step_follows_finite_difference_gradient() {
    // Single episode, d=4, M=2; learnable priors so they move by their gradient.
    for ablation in [Ablation::E3BM, Ablation { v_mode: VMode::Learnable, a_mode: AMode::Learnable }] {
        let cfg = RunConfig { ablation, ..tiny() };
        let state = scrambled(&cfg);
        let ep = batch(&cfg, 7..8);
        let mut next = state.clone();
        meta_step(&mut next, &ep, 1).unwrap();

        let check = |name: &str, before: Vec<Tensor<f64>>, after: Vec<Tensor<f64>>, rate: f64, set: &dyn Fn(&mut MetaState, &[Tensor<f64>])| {
            let fd = fd_grad(
                |ts| {
                    let mut s = state.clone();
                    set(&mut s, ts);
                    loss_of(&s, &ep[0])
                },
                &before,
                1e-5,
            );
            let mut worst = 0.0f64;
            let mut scale = 1e-12f64;
            for ((b, a), f) in before.iter().zip(&after).zip(&fd) {
                for ((x0, x1), d) in b.data().iter().zip(a.data()).zip(f.data()) {
                    let want = x0 - rate * d;
                    worst = worst.max((x1 - want).abs());
                    scale = scale.max((rate * d).abs());
                }
            }
            assert!(worst / scale < 1e-4, "{ablation} {name}: {}", worst / scale);
        };
        let tensors = |s: &MetaState, which: u8| -> Vec<Tensor<f64>> {
            match which {
                0 => s.params.theta.tensors().into_iter().cloned().collect(),
                1 => s.params.psi_a.tensors().into_iter().cloned().collect(),
                2 => s.params.psi_v.tensors().into_iter().cloned().collect(),
                _ => vec![Tensor::row(&s.params.priors.alpha), Tensor::row(&s.params.priors.v)],
            }
        };
        check("theta", tensors(&state, 0), tensors(&next, 0), cfg.beta_theta, &|s, ts| {
            for (t, v) in s.params.theta.tensors_mut().into_iter().zip(ts) {
                *t = v.clone();
            }
        });
        if ablation == Ablation::E3BM {
            check("psi_a", tensors(&state, 1), tensors(&next, 1), cfg.beta1, &|s, ts| {
                for (t, v) in s.params.psi_a.tensors_mut().into_iter().zip(ts) {
                    *t = v.clone();
                }
            });
            check("psi_v", tensors(&state, 2), tensors(&next, 2), cfg.beta2, &|s, ts| {
                for (t, v) in s.params.psi_v.tensors_mut().into_iter().zip(ts) {
                    *t = v.clone();
                }
            });
        } else {
            check("priors", tensors(&state, 3), tensors(&next, 3), cfg.beta_theta, &|s, ts| {
                s.params.priors.alpha = ts[0].data().to_vec();
                s.params.priors.v = ts[1].data().to_vec();
            });
        }
    }
}

#[test]
fn e3bm_priors_take_the_batch_mean() {
    let cfg = tiny();
    let mut state = scrambled(&cfg);
    let episodes = batch(&cfg, 0..2);
    let inner = cfg.inner(None).unwrap();
    let mut alpha = [0.0; 2];
    let mut v = [0.0; 2];
    for ep in &episodes {
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g);
        let t = inner_loop(&mut g, ep, &bound, &inner).unwrap();
        for m in 0..2 {
            alpha[m] += t.alphas[m] / 2.0;
            v[m] += t.vs[m] / 2.0;
        }
    }
    meta_step(&mut state, &episodes, 1).unwrap();
    assert_eq!(state.params.priors.alpha, alpha);
    assert_eq!(state.params.priors.v, v);
}

#[test]
fn frozen_components_never_move() {
    let cfg0 = tiny();
    let frozen = crate::engine::FrozenValues {
        alpha: vec![0.15, 0.25],
        v: vec![0.4, 0.6],
    };
    for ablation in Ablation::grid() {
        let cfg = RunConfig { ablation, ..cfg0.clone() };
        let mut state = MetaState::with_frozen(&cfg, ablation.needs_frozen().then(|| frozen.clone())).unwrap();
        let before = state.clone();
        let steps = if ablation == Ablation::MAML { 100 } else { 5 };
        for it in 0..steps {
            let out = meta_step(&mut state, &batch(&cfg, 2 * it..2 * it + 2), 1).unwrap();
            assert!(matches!(out, StepOutcome::Accepted { .. }));
        }
        let p = &state.params;
        let b = &before.params;
        assert_ne!(p.theta, b.theta, "{ablation}");
        assert_eq!(p.psi_a == b.psi_a, ablation.a_mode != AMode::E3bm, "{ablation}");
        assert_eq!(p.psi_v == b.psi_v, ablation.v_mode != VMode::E3bm, "{ablation}");
        let alpha_frozen = matches!(ablation.a_mode, AMode::Fixed | AMode::Optimal);
        let v_frozen = matches!(ablation.v_mode, VMode::Equal | VMode::LastEpoch | VMode::Optimal);
        assert_eq!(p.priors.alpha == b.priors.alpha, alpha_frozen, "{ablation}");
        assert_eq!(p.priors.v == b.priors.v, v_frozen, "{ablation}");
    }
}

#[test]
fn non_finite_steps_are_rejected() {
    let cfg = RunConfig {
        ablation: Ablation::MAML,
        fixed_alpha: 1e308,
        base_hidden: 5,
        ..tiny()
    };
    let mut state = MetaState::init(&cfg).unwrap();
    // One linear layer, so nothing saturates.
    state.params.theta = crate::nn::BaseParams::init(&[4, 3], &mut ChaCha8Rng::seed_from_u64(0));
    let before = state.clone();
    let out = meta_step(&mut state, &batch(&cfg, 0..2), 1).unwrap();
    assert!(matches!(out, StepOutcome::Rejected { .. }));
    assert_eq!(state, before);
}

#[test]
fn run_aborts_after_repeated_rejections() {
    let cfg = RunConfig {
        meta_iterations: 50,
        eval_every: 100,
        beta_theta: f64::MAX,
        ..tiny()
    };
    let state = MetaState::init(&cfg).unwrap();
    match run::train(state, 1) {
        Err(TrainError::Diverged { iteration, rejected }) => {
            // The first step may survive when every gradient entry is below one.
            assert_eq!(rejected, 10);
            assert!((10..=11).contains(&iteration), "{iteration}");
        }
        other => panic!("{:?}", other.map(|r| r.history)),
    }
}

#[test]
fn evaluation_summary_examples() {
    assert_eq!(summarize_accuracies(&[1.0; 10]).unwrap(), (1.0, 0.0));
    let (m, ci) = summarize_accuracies(&[0.2, 0.4]).unwrap();
    assert!((m - 0.3).abs() < 1e-15);
    assert!((ci - 1.96 * 0.02f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    assert!((ci - 0.196).abs() < 1e-3);
    assert!(matches!(summarize_accuracies(&[0.5]), Err(TrainError::TooFewEpisodes(1))));
    let state = MetaState::init(&tiny()).unwrap();
    assert!(evaluate(&state, &generator(&tiny()), Split::Val, 1, 1).is_err());
}

#[test]
fn evaluation_leaves_state_untouched() {
    let cfg = tiny();
    let state = scrambled(&cfg);
    let before = state.to_json();
    let a = evaluate(&state, &generator(&cfg), Split::Test, 20, 1).unwrap();
    let b = evaluate(&state, &generator(&cfg), Split::Test, 20, 3).unwrap();
    assert_eq!(state.to_json(), before);
    assert_eq!(a, b);
}

#[test]
fn untrained_state_is_at_chance() {
    let cfg = RunConfig::default();
    let state = MetaState::init(&cfg).unwrap();
    let r = evaluate(&state, &generator(&cfg), Split::Test, 1000, 4).unwrap();
    assert!((r.mean - 0.20).abs() <= 0.03, "{}", r.mean);
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let cfg = RunConfig {
        meta_iterations: 0,
        ..tiny()
    };
    let rep = run_meta_training(&cfg, 1).unwrap();
    assert!(rep.history.is_empty());
    assert_eq!(rep.best, MetaState::init(&cfg).unwrap());
    assert_eq!(rep.best_iteration, 0);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let a = run_meta_training(&cfg, 1).unwrap();
    let b = run_meta_training(&cfg, 1).unwrap();
    let c = run_meta_training(&cfg, 3).unwrap();
    for other in [&b, &c] {
        assert_eq!(a.best.to_json(), other.best.to_json());
        assert_eq!(a.last.to_json(), other.last.to_json());
        let hist = |r: &TrainingReport| {
            let mut buf = Vec::new();
            write_history(&mut buf, cfg.epochs, &r.history).unwrap();
            buf
        };
        assert_eq!(hist(&a), hist(other));
    }
    assert_eq!(a.history.iter().map(|h| h.iteration).collect::<Vec<_>>(), vec![3, 6]);
}

#[test]
fn snapshot_round_trips_bitwise() {
    let cfg = RunConfig {
        theta_optimizer: ThetaOptimizer::Adam,
        ..tiny()
    };
    let mut state = scrambled(&cfg);
    meta_step(&mut state, &batch(&cfg, 0..2), 1).unwrap();
    assert!(state.adam.is_some());
    let text = state.to_json();
    let back = MetaState::from_json(&text).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.to_json(), text);
    let bits = |s: &MetaState| {
        s.params
            .theta
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&back), bits(&state));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    state.save(&path).unwrap();
    assert_eq!(MetaState::load(&path).unwrap(), state);

    for broken in [
        text.replace("e3bm-state", "other"),
        text.replacen("\"version\": 1", "\"version\": 9", 1),
        text[..text.len() / 2].to_string(),
    ] {
        assert!(matches!(MetaState::from_json(&broken), Err(TrainError::Snapshot(_))));
    }
}

#[test]
fn snapshot_values_carry_seventeen_digits() {
    let state = MetaState::init(&tiny()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&state.to_json()).unwrap();
    let text = state.to_json();
    let first = json["theta"][0]["values"][0].as_f64().unwrap();
    assert!(text.contains(&format!("{first:.16e}")));
}

#[test]
fn history_round_trips() {
    let rows = vec![
        HistoryRow {
            iteration: 10,
            val_acc: 0.75,
            ci95: 0.01,
            alpha: vec![0.1, 1.0 / 3.0],
            v: vec![0.5, 0.25],
            train_loss: 1.2345678901234567,
        },
        HistoryRow {
            iteration: 20,
            val_acc: 0.8,
            ci95: 0.02,
            alpha: vec![0.2, 0.3],
            v: vec![0.5, 0.5],
            train_loss: f64::NAN,
        },
    ];
    let mut buf = Vec::new();
    write_history(&mut buf, 2, &rows).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("iteration,val_acc,ci95,alpha_1,alpha_2,v_1,v_2,train_loss\n"));
    let (epochs, back) = read_history(buf.as_slice()).unwrap();
    assert_eq!(epochs, 2);
    assert_eq!(back[0], rows[0]);
    assert!(back[1].train_loss.is_nan());
    assert!(read_history("".as_bytes()).is_err());
    assert!(read_history("iteration,val_acc,ci95,alpha_1,v_1,train_loss\n1,2\n".as_bytes()).is_err());
}

#[test]
fn config_errors_name_the_field() {
    let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>)> = vec![
        ("lambda1", Box::new(|c| c.lambda1 = 1.0)),
        ("lambda2", Box::new(|c| c.lambda2 = 0.0)),
        ("beta1", Box::new(|c| c.beta1 = -1.0)),
        ("beta_theta", Box::new(|c| c.beta_theta = 0.0)),
        ("epochs", Box::new(|c| c.epochs = 0)),
        ("epochs", Box::new(|c| c.epochs = 101)),
        ("eval_episode_count", Box::new(|c| c.eval_episode_count = 1)),
        ("generator.val_classes", Box::new(|c| c.generator.val_classes = 2)),
        ("n_way", Box::new(|c| c.n_way = 1)),
    ];
    for (name, edit) in cases {
        let mut cfg = RunConfig::default();
        edit(&mut cfg);
        match cfg.validate() {
            Err(TrainError::Config { field, .. }) => assert_eq!(field, name),
            other => panic!("{name}: {other:?}"),
        }
    }
    RunConfig::default().validate().unwrap();
    RunConfig::slow_hyperprior().validate().unwrap();
    let cfg = RunConfig {
        ablation: Ablation {
            v_mode: VMode::Optimal,
            a_mode: AMode::Fixed,
        },
        ..tiny()
    };
    assert!(matches!(MetaState::init(&cfg), Err(TrainError::Config { field: "frozen_path", .. })));
}

#[test]
fn frozen_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frozen.json");
    let values = crate::engine::FrozenValues {
        alpha: vec![0.1, 0.2],
        v: vec![0.3, 0.7],
    };
    save_frozen(&path, &values).unwrap();
    assert_eq!(load_frozen(&path).unwrap(), values);
    let cfg = RunConfig {
        ablation: Ablation {
            v_mode: VMode::LastEpoch,
            a_mode: AMode::Optimal,
        },
        frozen_path: Some(path),
        ..tiny()
    };
    assert_eq!(MetaState::init(&cfg).unwrap().frozen, Some(values));
}

#[test]
fn learnable_and_e3bm_weights_coincide_when_the_hyperprior_is_a_constant() {
    let mut cfg = tiny();
    cfg.lambda2 = 1.0 - 1e-9;
    let mut state = scrambled(&cfg);
    state.params.priors.v = vec![0.35, 0.9];
    let input = crate::engine::summary_dim(4, 4);
    let v = state.params.priors.v.clone();
    state.params.psi_v = Hyperprior::Fc(FcHyperprior::with_biases(input, 2, |m| [0.0, v[m]]));
    state.params.psi_a = Hyperprior::Fc(FcHyperprior::zeros(input, 2));
    let ep = batch(&cfg, 3..4).pop().unwrap();
    let mut preds = Vec::new();
    for v_mode in [VMode::E3bm, VMode::Learnable] {
        let inner = RunConfig {
            ablation: Ablation {
                v_mode,
                a_mode: AMode::Fixed,
            },
            ..cfg.clone()
        }
        .inner(None)
        .unwrap();
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g);
        let trace = inner_loop(&mut g, &ep, &bound, &inner).unwrap();
        preds.push((predict(&trace, &ep.test_y).0, trace.vs));
    }
    assert_eq!(preds[0].0, preds[1].0);
    for (a, b) in preds[0].1.iter().zip(&preds[1].1) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn step_time_grows_linearly_in_epochs() {
    let time = |epochs: usize| {
        let cfg = RunConfig {
            epochs,
            meta_batch_size: 4,
            ..RunConfig::default()
        };
        let mut state = MetaState::init(&cfg).unwrap();
        let episodes = batch(&cfg, 0..4);
        meta_step(&mut state, &episodes, 1).unwrap();
        (0..5)
            .map(|_| {
                let t = Instant::now();
                meta_step(&mut state, &episodes, 1).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (t2, t6) = (time(2), time(6));
    assert!(t6 <= 3.0 * t2, "M=2: {t2:.4}s, M=6: {t6:.4}s");
}

#[test]
fn ablation_grid_shares_seeds() {
    let cfg = RunConfig {
        meta_iterations: 2,
        eval_every: 2,
        ..tiny()
    };
    let rows = run_ablation(&cfg, Split::Test, 6, 1).unwrap();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert_eq!(r.eval_seeds, rows[0].eval_seeds);
        assert_eq!(r.first_batch_seeds, rows[0].first_batch_seeds);
    }
    assert_eq!(rows[4].ablation, Ablation::MAML);
    assert_eq!(rows[8].ablation, Ablation::MAML);
    assert_eq!(rows[4].result, rows[8].result);
}
