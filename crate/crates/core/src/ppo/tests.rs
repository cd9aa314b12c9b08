use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::update::EpisodeTargets;
use super::*;
use crate::gradcheck::max_param_rel_error;
use crate::gridnav::{Action, EpisodeSpec, Observation};
use crate::matching::GroundTruthItem;
use crate::ndgrad::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::net::{DmtfNet, ModelConfig};
use crate::testkit::{tiny_env, tiny_model, tiny_suites};

fn rollouts(net: &DmtfNet, specs: &[EpisodeSpec], horizon: u32, workers: usize) -> RolloutBuffer {
    let (_, bank) = tiny_suites(7, 12);
    let seeds: Vec<u64> = specs.iter().map(|s| 100 + s.id).collect();
    collect_rollouts(net, &tiny_env(), &bank, specs, &seeds, horizon, workers).unwrap()
}

fn train_specs() -> Vec<EpisodeSpec> {
    tiny_suites(7, 12).0.suites[0].episodes.clone()
}

#[test]
fn gae_hand_cases() {
    let (a, r) = gae(&[1.0], &[0.0], 0.0, 0.99, 0.95);
    assert_eq!((a, r), (vec![1.0], vec![1.0]));

    let rewards = [0.5, -0.2, 1.0];
    let values = [0.3, 0.1, -0.4];
    let (a, _) = gae(&rewards, &values, 0.7, 0.9, 0.0);
    assert_eq!(a[0], 0.5 + 0.9 * 0.1 - 0.3);
    assert_eq!(a[2], 1.0 + 0.9 * 0.7 - (-0.4));

    // Hand unroll of the recursion for a terminated 3-step episode.
    let (g, l) = (0.99, 0.95);
    let d2 = 1.0 - (-0.4);
    let d1 = -0.2 + g * (-0.4) - 0.1;
    let d0 = 0.5 + g * 0.1 - 0.3;
    let expected = [d0 + g * l * d1 + (g * l) * (g * l) * d2, d1 + g * l * d2, d2];
    let (a, r) = gae(&rewards, &values, 0.0, g, l);
    for t in 0..3 {
        assert!((a[t] - expected[t]).abs() < 1e-12);
        assert!((r[t] - (expected[t] + values[t])).abs() < 1e-12);
    }
}

#[test]
fn lambda_one_gives_discounted_returns() {
    let rewards = [1.0, 2.0, 3.0];
    let values = [0.5, -1.0, 2.0];
    let (_, r) = gae(&rewards, &values, 4.0, 0.9, 1.0);
    let mc = 1.0 + 0.9 * (2.0 + 0.9 * (3.0 + 0.9 * 4.0));
    assert!((r[0] - mc).abs() < 1e-12);
}

#[test]
fn sampling_follows_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_action(&[0.0, 0.0, 1.0, 0.0], &mut rng), Action::TurnRight);
    let probs = [0.1, 0.2, 0.3, 0.4];
    let mut counts = [0usize; 4];
    for _ in 0..20000 {
        counts[sample_action(&probs, &mut rng).index()] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        assert!((*c as f64 / 20000.0 - p).abs() < 0.015, "{counts:?}");
    }
}

#[test]
fn rollouts_are_deterministic_and_worker_independent() {
    let net = DmtfNet::new(tiny_model(), 2).unwrap();
    let specs = train_specs();
    let one = rollouts(&net, &specs, 500, 1);
    assert_eq!(one, rollouts(&net, &specs, 500, 1));
    assert_eq!(one, rollouts(&net, &specs, 500, 4));
    assert_eq!(one.episodes.len(), specs.len());
    for ep in &one.episodes {
        assert!(ep.steps[0].hidden.iter().all(|&h| h == 0.0));
        assert_eq!(ep.steps.last().unwrap().done, ep.record.is_some());
        if ep.terminated {
            assert_eq!(ep.bootstrap, 0.0);
            assert_eq!(ep.steps.last().unwrap().action, Action::Stop);
        }
        if let Some(rec) = &ep.record {
            assert_eq!(rec.episode_return, ep.episode_return());
            assert_eq!(rec.actions as usize, ep.steps.len());
        }
        for s in &ep.steps {
            assert_eq!(s.targets.len(), net.config().effective_targets());
        }
    }
}

#[test]
fn horizon_one_gives_single_transitions() {
    let net = DmtfNet::new(tiny_model(), 3).unwrap();
    let buf = rollouts(&net, &train_specs(), 1, 2);
    for ep in &buf.episodes {
        assert_eq!(ep.steps.len(), 1);
        if !ep.terminated {
            assert_ne!(ep.bootstrap, 0.0);
        }
    }
    assert_eq!(buf.len(), buf.episodes.len());
}

fn targets_for<'a>(buf: &'a RolloutBuffer, est: &'a AdvantageEstimates, adv: &'a [f64]) -> Vec<EpisodeTargets<'a>> {
    let mut out = Vec::new();
    let mut at = 0;
    for ep in &buf.episodes {
        let n = ep.steps.len();
        out.push(EpisodeTargets {
            episode: ep,
            advantages: &adv[at..at + n],
            returns: &est.returns[at..at + n],
        });
        at += n;
    }
    out
}

#[test]
fn unchanged_policy_has_unit_ratio() {
    let net = DmtfNet::new(tiny_model(), 4).unwrap();
    let buf = rollouts(&net, &train_specs()[..6], 500, 1);
    let est = compute_gae(&buf, 0.99, 0.95);
    let adv = normalize(&est.advantages);
    let cfg = PpoConfig::default();
    let mut tape = Tape::with_params(net.params());
    let (_, parts) = minibatch_loss(&mut tape, &net, &targets_for(&buf, &est, &adv), &cfg).unwrap();
    assert_eq!(parts.clip_fraction, 0.0);
    assert!(parts.surrogate.abs() < 1e-12, "{}", parts.surrogate);
    // Recomputed log-probabilities match the rollout exactly.
    assert_eq!(parts.max_ratio_deviation, 0.0);
}

#[test]
fn clipped_branch_has_zero_gradient() {
    for (rho, adv, expected) in [(1.2, 1.0, 0.0), (1.05, 1.0, 1.0), (0.8, -1.0, 0.0), (0.8, 1.0, 1.0)] {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::vector(vec![rho]));
        let a = tape.constant(Tensor::vector(vec![adv]));
        let s1 = tape.mul(r, a).unwrap();
        let c = tape.clamp(r, 0.9, 1.1).unwrap();
        let s2 = tape.mul(c, a).unwrap();
        let m = tape.minimum(s1, s2).unwrap();
        let chosen = tape.value(m).item();
        if (rho - 1.0f64).abs() > 0.1 && expected == 0.0 {
            // The selected value sits on the clip boundary.
            assert!((chosen / adv - 1.0).abs() <= 0.1 + 1e-12);
        }
        let l = tape.sum(m).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(r).unwrap().item(), expected, "rho {rho} adv {adv}");
    }
}

#[test]
fn minibatch_gradients_match_finite_differences() {
    let cfg_model = ModelConfig {
        d_model: 4,
        gru_hidden: 3,
        ..tiny_model()
    };
    let net = DmtfNet::new(cfg_model.clone(), 5).unwrap();
    let buf = rollouts(&net, &train_specs()[..3], 4, 1);
    let est = compute_gae(&buf, 0.99, 0.95);
    let adv = normalize(&est.advantages);
    let cfg = PpoConfig {
        match_coef: 0.5,
        ..PpoConfig::default()
    };
    let mut params = net.params().clone();
    let err = max_param_rel_error(&mut params, |p: &ParamStore| -> Result<(f64, Vec<Tensor>), PpoError> {
        let net = DmtfNet::from_params(cfg_model.clone(), p.clone())?;
        let mut tape = Tape::with_params(p);
        let (loss, parts) = minibatch_loss(&mut tape, &net, &targets_for(&buf, &est, &adv), &cfg)?;
        tape.backward(loss)?;
        Ok((parts.total, tape.param_grads()))
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// One-step episodes with a constant observation; only action 0 pays.
fn bandit_buffer(net: &DmtfNet, obs: &Observation, rng: &mut ChaCha8Rng, n: usize) -> RolloutBuffer {
    let nt = net.config().effective_targets();
    let out = net.step(obs, &net.zero_hidden(), false).unwrap();
    let episodes = (0..n)
        .map(|i| {
            let action = sample_action(&out.probs, rng);
            EpisodeRollout {
                episode_id: i as u64,
                steps: vec![Transition {
                    observation: obs.clone(),
                    hidden: net.zero_hidden(),
                    action,
                    reward: if action == Action::MoveForward { 1.0 } else { 0.0 },
                    value: out.value,
                    log_prob: out.log_probs[action.index()],
                    done: true,
                    targets: vec![GroundTruthItem::NULL; nt],
                }],
                terminated: true,
                bootstrap: 0.0,
                record: None,
            }
        })
        .collect();
    RolloutBuffer { episodes }
}

#[test]
fn bandit_converges_to_rewarded_arm() {
    let cfg_model = tiny_model();
    let mut net = DmtfNet::new(cfg_model.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = Observation {
        image: (0..cfg_model.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        audio: (0..cfg_model.audio_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        delta: None,
    };
    let cfg = PpoConfig {
        lr: 3e-3,
        minibatches: 2,
        match_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut adam = AdamState::new(net.params(), AdamConfig::with_lr(cfg.lr));
    let p0 = net.step(&obs, &net.zero_hidden(), false).unwrap().probs[0];
    let mut history = Vec::new();
    for _ in 0..200 {
        let buf = bandit_buffer(&net, &obs, &mut rng, 16);
        let est = compute_gae(&buf, cfg.gamma, cfg.gae_lambda);
        ppo_update(&mut net, &mut adam, &buf, &est, &cfg, &mut rng).unwrap();
        history.push(net.step(&obs, &net.zero_hidden(), false).unwrap().probs[0]);
    }
    let p = *history.last().unwrap();
    assert!(p > 0.95, "P(optimal) {p0} -> {p}");
    // Windowed monotonicity: each block of 20 updates ends at least as high as the previous.
    let windows: Vec<f64> = history.chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] >= w[0] - 1e-3), "{windows:?}");
}

#[test]
fn update_validates_inputs() {
    let mut net = DmtfNet::new(tiny_model(), 8).unwrap();
    let buf = rollouts(&net, &train_specs()[..2], 3, 1);
    let est = AdvantageEstimates {
        advantages: vec![0.0],
        returns: vec![0.0],
    };
    let mut adam = AdamState::new(net.params(), AdamConfig::with_lr(1e-3));
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        ppo_update(&mut net, &mut adam, &buf, &est, &cfg, &mut rng),
        Err(PpoError::Config(_))
    ));
    assert!(PpoConfig { clip: 0.0, ..cfg.clone() }.validate().is_err());
    assert!(PpoConfig { gamma: 1.5, ..cfg.clone() }.validate().is_err());
    assert!(PpoConfig { horizon: 501, ..cfg.clone() }.validate().is_err());
    assert!(cfg.validate().is_ok());
}

#[test]
fn update_changes_parameters_and_keeps_f32() {
    let mut net = DmtfNet::new(tiny_model(), 9).unwrap();
    let before = net.params().clone();
    let buf = rollouts(&net, &train_specs()[..4], 8, 1);
    let est = compute_gae(&buf, 0.99, 0.95);
    let cfg = PpoConfig::default();
    let mut adam = AdamState::new(net.params(), AdamConfig::with_lr(1e-3));
    let report = ppo_update(&mut net, &mut adam, &buf, &est, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(report.minibatches, 16);
    assert_ne!(net.params(), &before);
    for (_, t) in net.params().iter() {
        assert!(t.data().iter().all(|&v| f64::from(v as f32) == v));
    }
}
