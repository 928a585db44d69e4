use vlf_core::channel::{ChannelConfig, FeedbackSnr, NoiseSource};
use vlf_core::message::{BeliefMatrix, BitGroupBlock};
use vlf_core::net::checkpoint::{decode_checkpoint, encode_checkpoint};
use vlf_core::net::{CodecConfig, CodecParameters, PowerMode, Variant};
use vlf_core::protocol::{rollout, EngineConfig, LossWindow, Rule, SessionKind};
use vlf_core::tape::Tape;
use vlf_core::training::*;

fn blocks_and_noises(cfg: &CodecConfig, seed: u64, batch: usize) -> (Vec<BitGroupBlock>, Vec<NoiseSource>) {
    let mut noises: Vec<NoiseSource> = (0..batch).map(|s| NoiseSource::for_worker(seed, s as u64)).collect();
    let blocks = noises
        .iter_mut()
        .map(|ns| BitGroupBlock::new(ns.bits(cfg.num_bits()), cfg.groups).unwrap())
        .collect();
    (blocks, noises)
}

#[test]
fn gradient_check_on_tiny_models() {
    for (seed, variant) in [(1, Variant::R), (2, Variant::T)] {
        let p = CodecParameters::init(CodecConfig::tiny(variant), seed).unwrap();
        let report = gradient_check(&p, 3, seed).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.per_group.len(), p.len());
        assert_eq!(report.scalars_checked, p.num_scalars());
    }
}

#[test]
fn gradient_check_of_zero_model() {
    let p = CodecParameters::zeros(CodecConfig::tiny(Variant::R)).unwrap();
    let report = gradient_check(&p, 2, 0).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn gradient_check_rejects_large_models() {
    let p = CodecParameters::zeros(CodecConfig::desk(Variant::R)).unwrap();
    assert!(gradient_check(&p, 2, 0).is_err());
}

/// Brute-force oracle: explicit loops over sessions, groups, rounds and
/// patterns.
fn oracle_loss(sessions: &[LossSession], tau_plus: usize, theta: f64, c: f64) -> f64 {
    let mut total = 0.0;
    for s in sessions {
        for q in 0..s.truth.len() {
            for tau in 1..=s.stops[q] {
                if tau < tau_plus {
                    continue;
                }
                let col = s.beliefs[tau - 1].column(q);
                for (j, &p) in col.iter().enumerate() {
                    if j == s.truth[q] {
                        let w = theta.powf(tau as f64 - c);
                        total += -w * (if p < 1e-12 { 1e-12 } else { p }).ln();
                    }
                }
            }
        }
    }
    total / sessions.len() as f64
}

#[test]
fn weighted_loss_matches_brute_force() {
    let mut ns = NoiseSource::new(77);
    for _ in 0..100 {
        let q = 1 + ns.uniform_index(2);
        let m = 1 + ns.uniform_index(2);
        let rounds = 1 + ns.uniform_index(3);
        let batch = 1 + ns.uniform_index(3);
        let sessions: Vec<LossSession> = (0..batch)
            .map(|_| {
                let beliefs = (0..rounds)
                    .map(|_| {
                        let cols = (0..q)
                            .map(|_| {
                                let raw: Vec<f64> = (0..1 << m).map(|_| (3.0 * ns.gaussian(vlf_core::channel::Stream::Aux)).exp()).collect();
                                let z: f64 = raw.iter().sum();
                                raw.iter().map(|r| r / z).collect()
                            })
                            .collect();
                        BeliefMatrix::from_columns(cols).unwrap()
                    })
                    .collect();
                LossSession {
                    beliefs,
                    truth: (0..q).map(|_| ns.uniform_index(1 << m)).collect(),
                    stops: (0..q).map(|_| 1 + ns.uniform_index(rounds)).collect(),
                }
            })
            .collect();
        let tau_plus = 1 + ns.uniform_index(rounds);
        let theta = 0.5 + 10.0 * ns.uniform_index(100) as f64 / 100.0;
        let c = ns.uniform_index(10) as f64;
        let w = LossWindow {
            tau_plus,
            theta,
            offset: c,
        };
        let got = weighted_loss(&sessions, w).unwrap();
        let want = oracle_loss(&sessions, tau_plus, theta, c);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "{got} vs {want}");
    }
}

#[test]
fn engine_loss_equals_transcript_loss() {
    let cfg = CodecConfig::tiny(Variant::R);
    let p = CodecParameters::init(cfg.clone(), 4).unwrap();
    let (blocks, mut noises) = blocks_and_noises(&cfg, 5, 4);
    let window = LossWindow {
        tau_plus: 2,
        theta: 3.0,
        offset: 2.0,
    };
    let engine = EngineConfig {
        rule: Rule::receiver(0.4),
        tau_max: 3,
        power: PowerMode::Infer,
        record: true,
        loss: Some(window),
    };
    let tape = Tape::new();
    let chan = ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless);
    let out = rollout(&tape, &p, &chan, &engine, &blocks, &mut noises).unwrap();
    let sessions: Vec<LossSession> = out
        .transcripts
        .iter()
        .map(|t| LossSession {
            beliefs: t
                .rounds
                .iter()
                .map(|r| BeliefMatrix::from_flat(r.beliefs.clone(), 4).unwrap())
                .collect(),
            truth: t.truth.clone(),
            stops: t.group_stop.clone(),
        })
        .collect();
    let engine_loss = out.loss.unwrap().value()[[0, 0]];
    let direct = weighted_loss(&sessions, window).unwrap();
    assert!((engine_loss - direct).abs() < 1e-10 * direct.abs());
}

#[test]
fn scaling_weights_scales_gradients() {
    let cfg = CodecConfig::tiny(Variant::T);
    let p = CodecParameters::init(cfg.clone(), 8).unwrap();
    let (blocks, noises) = blocks_and_noises(&cfg, 6, 3);
    let chan = ChannelConfig::awgn(0.0, FeedbackSnr::Noiseless);
    let rule = Rule::fixed_horizon(SessionKind::T);
    let w1 = LossWindow {
        tau_plus: 1,
        theta: 2.0,
        offset: 0.0,
    };
    // theta^(tau - c + 1) = 2 * theta^(tau - c)
    let w2 = LossWindow { offset: -1.0, ..w1 };
    let (l1, g1, _) = loss_and_gradients(&p, &chan, rule, w1, &blocks, &mut noises.clone()).unwrap();
    let (l2, g2, _) = loss_and_gradients(&p, &chan, rule, w2, &blocks, &mut noises.clone()).unwrap();
    assert!((l2 - 2.0 * l1).abs() < 1e-12 * l1.abs());
    for (a, b) in g1.iter().zip(&g2) {
        if let (Some(a), Some(b)) = (a, b) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1e-12));
            }
        }
    }
}

#[test]
fn frozen_rounds_contribute_no_gradient() {
    // a window entirely after every group's stop yields no loss terms
    let cfg = CodecConfig::tiny(Variant::R);
    let mut p = CodecParameters::zeros(cfg.clone()).unwrap();
    // decoder bias with a point mass on pattern 0: every group freezes in round 1
    p.get_mut("decoder.out.bias").unwrap()[[0, 0]] = 60.0;
    let blocks = vec![BitGroupBlock::from_indices(&[1, 2], 2).unwrap(); 2];
    let noises: Vec<NoiseSource> = (0..2).map(NoiseSource::new).collect();
    let chan = ChannelConfig::awgn(0.0, FeedbackSnr::Noiseless);
    let w = LossWindow {
        tau_plus: 2,
        theta: 1.0,
        offset: 0.0,
    };
    let (loss, grads, _) =
        loss_and_gradients(&p, &chan, Rule::receiver(0.9), w, &blocks, &mut noises.clone()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(Option::is_none));
    // with the window including round 1 the same batch produces gradient
    let w = LossWindow { tau_plus: 1, ..w };
    let (loss, grads, _) = loss_and_gradients(&p, &chan, Rule::receiver(0.9), w, &blocks, &mut noises.clone()).unwrap();
    assert!(loss > 0.0);
    assert!(grads.iter().any(Option::is_some));
}

fn tiny_train_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::desk(variant);
    cfg.codec = CodecConfig::tiny(variant);
    cfg.batch_size = 8;
    cfg.steps = 3;
    cfg.calibration_batches = 2;
    cfg.eta_f_db = [0.0, 2.0];
    cfg.threshold = match variant {
        Variant::R => [0.9, 0.99],
        Variant::T => [0.0, 0.5],
    };
    cfg
}

#[test]
fn small_step_decreases_loss() {
    let cfg = CodecConfig::tiny(Variant::R);
    let mut p = CodecParameters::init(cfg.clone(), 12).unwrap();
    let (blocks, noises) = blocks_and_noises(&cfg, 13, 4);
    let chan = ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless);
    let rule = Rule::fixed_horizon(SessionKind::R);
    let w = LossWindow {
        tau_plus: 1,
        theta: 2.0,
        offset: 3.0,
    };
    let (l0, grads, _) = loss_and_gradients(&p, &chan, rule, w, &blocks, &mut noises.clone()).unwrap();
    for (a, g) in p.arrays.iter_mut().zip(&grads) {
        if let Some(g) = g {
            a.scaled_add(-1e-4, g);
        }
    }
    let (l1, _, _) = loss_and_gradients(&p, &chan, rule, w, &blocks, &mut noises.clone()).unwrap();
    assert!(l1 < l0, "{l1} !< {l0}");
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    for variant in [Variant::R, Variant::T] {
        let cfg = tiny_train_config(variant);
        let a = train_phase1(&cfg, &mut TrainHooks::default()).unwrap();
        let b = train_phase1(&cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(a.arrays, b.arrays);
        assert_eq!(a.power, b.power);
        assert!(a.power.calibrated);
        let bytes = encode_checkpoint(&a, &serde_json::Value::Null).unwrap();
        let (c, _) = decode_checkpoint(&bytes).unwrap();
        let eval = |p: &CodecParameters| {
            let (blocks, mut noises) = blocks_and_noises(&p.config, 3, 5);
            let engine = EngineConfig {
                rule: Rule::fixed_horizon(SessionKind::R),
                tau_max: 3,
                power: PowerMode::Infer,
                record: true,
                loss: None,
            };
            let out = rollout(
                &Tape::inference(),
                p,
                &ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless),
                &engine,
                &blocks,
                &mut noises,
            )
            .unwrap();
            serde_json::to_string(&out.transcripts).unwrap()
        };
        assert_eq!(a.arrays, c.arrays);
        assert_eq!(a.power, c.power);
        assert_eq!(a.first_decode_round, c.first_decode_round);
        assert_eq!(eval(&a), eval(&c));
        let tuned = train_phase2(c, &cfg, &mut TrainHooks::default()).unwrap();
        assert!(tuned.is_finite());
    }
}

#[test]
fn training_log_lines_and_periodic_checkpoint() {
    let mut cfg = tiny_train_config(Variant::R);
    cfg.log_every = 1;
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut log = Vec::new();
    {
        let mut hooks = TrainHooks {
            log: Some(&mut log),
            checkpoint: Some(path.clone()),
            ..Default::default()
        };
        train_phase1(&cfg, &mut hooks).unwrap();
    }
    let text = String::from_utf8(log).unwrap();
    let recs: Vec<TrainLogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.loss.is_finite() && (0.0..=2.0).contains(&r.eta_f_db)));
    let (p, extra) = vlf_core::net::checkpoint::load_checkpoint(&path).unwrap();
    assert_eq!(extra["step"], 2);
    assert!(p.is_finite());
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let mut cfg = tiny_train_config(Variant::R);
    cfg.learning_rate = f64::MAX;
    cfg.steps = 4;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut hooks = TrainHooks {
        checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let err = train_phase1(&cfg, &mut hooks).unwrap_err();
    assert!(matches!(err, vlf_core::Error::Diverged { .. }), "{err}");
    let (p, _) = vlf_core::net::checkpoint::load_checkpoint(&path).unwrap();
    assert!(p.is_finite());
}
