use proptest::prelude::*;
use vlf_core::channel::{ChannelConfig, FeedbackSnr, NoiseSource};
use vlf_core::message::{BitGroupBlock, DecodeMask};
use vlf_core::net::{build_encoder_knowledge, CodecConfig, CodecParameters, Variant};
use vlf_core::protocol::*;
use vlf_core::tape::Mat;

fn random_block(cfg: &CodecConfig, noise: &mut NoiseSource) -> BitGroupBlock {
    BitGroupBlock::new(noise.bits(cfg.num_bits()), cfg.groups).unwrap()
}

/// Decoder whose logits for group `g` are `logits[g]`, whatever it receives.
fn scripted_decoder(cfg: CodecConfig, logits: &[Vec<f64>]) -> CodecParameters {
    let mut p = CodecParameters::zeros(cfg.clone()).unwrap();
    let d = cfg.width;
    let patterns = cfg.num_patterns();
    assert!(patterns <= d);
    // positional row g carries the logits (shifted positive) through
    // identity heads; gelu(x) ~ x for large x
    let shift = 50.0;
    let mut pos = Mat::zeros((cfg.groups, d));
    for (g, row) in logits.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            pos[[g, j]] = v + shift;
        }
    }
    *p.get_mut("decoder.position").unwrap() = pos;
    *p.get_mut("decoder.head.0.weight").unwrap() = Mat::eye(d);
    *p.get_mut("decoder.head.1.weight").unwrap() = Mat::eye(d);
    let mut out = Mat::zeros((d, patterns));
    for j in 0..patterns {
        out[[j, j]] = 1.0;
    }
    *p.get_mut("decoder.out.weight").unwrap() = out;
    p
}

fn tiny_r() -> CodecConfig {
    CodecConfig::tiny(Variant::R)
}

fn awgn(eta: f64) -> ChannelConfig {
    ChannelConfig::awgn(eta, FeedbackSnr::Noiseless)
}

#[test]
fn point_mass_decoder_stops_in_round_one() {
    let cfg = tiny_r();
    let p = scripted_decoder(cfg.clone(), &[vec![40.0, 0.0, 0.0, 0.0], vec![0.0, 40.0, 0.0, 0.0]]);
    let block = BitGroupBlock::from_indices(&[0, 1], 2).unwrap();
    let t = run_session_r(&block, &p, &awgn(0.0), 0.26, 3, &mut NoiseSource::new(1)).unwrap();
    assert_eq!(t.group_stop, vec![1, 1]);
    assert_eq!(t.channel_uses(), 2);
    assert_eq!(t.termination, Termination::Threshold);
    assert!(!t.is_error());
    assert_eq!(code_rate(&t), 2.0);
}

#[test]
fn uniform_decoder_times_out() {
    let cfg = tiny_r();
    let p = CodecParameters::zeros(cfg).unwrap();
    let block = BitGroupBlock::from_indices(&[3, 2], 2).unwrap();
    let t = run_session_r(&block, &p, &awgn(0.0), 0.9, 3, &mut NoiseSource::new(1)).unwrap();
    assert_eq!(t.termination, Termination::TauMaxForced);
    assert_eq!(t.group_stop, vec![3, 3]);
    // ties go to pattern 0
    assert_eq!(t.estimate, vec![0, 0]);
}

#[test]
fn frozen_group_stops_transmitting() {
    let cfg = tiny_r();
    let p = scripted_decoder(cfg, &[vec![40.0, 0.0, 0.0, 0.0], vec![0.0; 4]]);
    let block = BitGroupBlock::from_indices(&[0, 2], 2).unwrap();
    let t = run_session_r(&block, &p, &awgn(1.0), 0.9, 3, &mut NoiseSource::new(4)).unwrap();
    assert_eq!(t.group_stop[0], 1);
    // replay the records: round 2 has exactly one transmitting group
    let r2 = &t.rounds[1];
    assert_eq!(r2.active, vec![false, true]);
    assert_eq!(r2.active.iter().filter(|&&a| a).count(), 1);
    assert_eq!(r2.sent[0], 0.0);
    assert_eq!(t.symbols_per_round, vec![2, 1, 1]);
}

#[test]
fn transmitter_gate_blocks_low_confidence() {
    let cfg = CodecConfig::tiny(Variant::T);
    let a = 27f64.ln();
    let p = scripted_decoder(cfg, &[vec![a, 0.0, 0.0, 0.0], vec![a, 0.0, 0.0, 0.0]]);
    let block = BitGroupBlock::from_indices(&[0, 0], 2).unwrap();
    let t = run_session_t(&block, &p, &awgn(3.0), 0.99, 3, &mut NoiseSource::new(2)).unwrap();
    assert_eq!(t.termination, Termination::TauMaxForced);
    assert_eq!(t.symbols_per_round, vec![2, 2, 2]);
    let max = t.rounds[0].beliefs[0];
    assert!((max - 0.9).abs() < 1e-9, "{max}");
    let t = run_session_t(&block, &p, &awgn(3.0), 0.85, 3, &mut NoiseSource::new(2)).unwrap();
    assert_eq!(t.termination, Termination::Transmitter);
    assert_eq!(t.stop, 1);
    // wrong estimate never passes the check
    let wrong = BitGroupBlock::from_indices(&[0, 1], 2).unwrap();
    let t = run_session_t(&wrong, &p, &awgn(3.0), 0.0, 3, &mut NoiseSource::new(2)).unwrap();
    assert_eq!(t.termination, Termination::TauMaxForced);
    assert!(t.is_error());
}

#[test]
fn rate_examples() {
    let mut t = SessionTranscript {
        kind: SessionKind::R,
        seed: 0,
        bits_per_group: 3,
        bits: vec![0; 48],
        truth: vec![0; 16],
        rounds: vec![],
        symbols_per_round: vec![16; 6],
        group_stop: vec![6; 16],
        stop: 6,
        estimate: vec![0; 16],
        termination: Termination::Threshold,
        power_sum: 0.0,
        power_count: 0,
    };
    assert_eq!(code_rate(&t), 0.5);
    assert_eq!(differential_rate(&t), 0.0);
    t.symbols_per_round = vec![16; 10];
    t.stop = 10;
    assert!((code_rate(&t) - 0.3).abs() < 1e-15);
    t.bits = vec![0; 6];
    t.truth = vec![0; 2];
    t.symbols_per_round = vec![2, 1];
    t.stop = 2;
    assert!((differential_rate(&t) - 0.5).abs() < 1e-15);
}

#[test]
fn hybrid_mixed_case_drops_symbols() {
    let cfg = tiny_r();
    let p = scripted_decoder(cfg, &[vec![40.0, 0.0, 0.0, 0.0], vec![0.0; 4]]);
    let block = BitGroupBlock::from_indices(&[0, 3], 2).unwrap();
    let t = run_session_hybrid(&block, &p, &awgn(1.0), 0.9, 0.5, 3, &mut NoiseSource::new(4)).unwrap();
    assert_eq!(t.kind, SessionKind::Hybrid);
    assert!(t.symbols_per_round[1..].iter().all(|&n| n < 2));
    assert!(differential_rate(&t) > 0.0);
}

#[test]
fn bad_thresholds_are_rejected() {
    let cfg = tiny_r();
    let p = CodecParameters::zeros(cfg).unwrap();
    let block = BitGroupBlock::from_indices(&[0, 1], 2).unwrap();
    let mut ns = NoiseSource::new(0);
    assert!(run_session_r(&block, &p, &awgn(0.0), 0.25, 3, &mut ns).is_err());
    assert!(run_session_r(&block, &p, &awgn(0.0), 1.0, 3, &mut ns).is_err());
    assert!(run_session_r(&block, &p, &awgn(0.0), 0.5, 4, &mut ns).is_err());
    assert!(run_session_t(&block, &p, &awgn(0.0), 1.0, 3, &mut ns).is_err());
    assert!(run_session_hybrid(&block, &p, &awgn(0.0), 1.0, 1.1, 3, &mut ns).is_err());
}

#[test]
fn transcript_log_round_trip() {
    let cfg = CodecConfig::tiny(Variant::R);
    let p = CodecParameters::init(cfg.clone(), 3).unwrap();
    let mut ns = NoiseSource::new(9);
    let records: Vec<TranscriptRecord> = (0..5)
        .map(|i| {
            let block = random_block(&cfg, &mut ns);
            let t = run_session_r(&block, &p, &awgn(2.0), 0.6, 3, &mut ns).unwrap();
            TranscriptRecord::from_transcript(i, &t)
        })
        .collect();
    let text = write_transcript_log(&records).unwrap();
    assert_eq!(parse_transcript_log(&text).unwrap(), records);
    assert!(parse_transcript_log("{\"schema_version\":2}").is_err());
    assert!(parse_transcript_log("not json").is_err());
}

/// Checks every structural invariant of one transcript.
fn check_invariants(t: &SessionTranscript) {
    let q = t.num_groups();
    assert_eq!(t.channel_uses(), t.group_stop.iter().sum::<usize>());
    assert_eq!(t.stop, *t.group_stop.iter().max().unwrap());
    for w in t.symbols_per_round.windows(2) {
        assert!(w[1] <= w[0]);
    }
    for (i, r) in t.rounds.iter().enumerate() {
        for g in 0..q {
            assert_eq!(r.active[g], r.round <= t.group_stop[g]);
            if !r.active[g] {
                assert_eq!(r.sent[g], 0.0);
            }
        }
        if i > 0 {
            for g in 0..q {
                assert!(t.rounds[i - 1].mask[g] || !r.mask[g], "mask unfroze");
            }
        }
    }
    if t.kind == SessionKind::T {
        assert!(t.symbols_per_round.iter().all(|&n| n == q));
        assert!(t.group_stop.iter().all(|&s| s == t.stop));
        assert_eq!(t.channel_uses(), q * t.stop);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn protocol_invariants_hold(seed in any::<u64>(), init in 0u64..4, eta in -2.0f64..8.0, gamma in 0.3f64..0.999) {
        let cfg = CodecConfig::tiny(Variant::R);
        let p = CodecParameters::init(cfg.clone(), init).unwrap();
        let mut ns = NoiseSource::new(seed);
        let block = random_block(&cfg, &mut ns);
        let chan = awgn(eta);
        let r = run_session_r(&block, &p, &chan, gamma, 3, &mut ns.clone()).unwrap();
        check_invariants(&r);
        let again = run_session_r(&block, &p, &chan, gamma, 3, &mut ns.clone()).unwrap();
        prop_assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        let t = run_session_t(&block, &p, &chan, gamma - 0.3, 3, &mut ns.clone()).unwrap();
        check_invariants(&t);
        let h = run_session_hybrid(&block, &p, &chan, gamma, gamma - 0.3, 3, &mut ns.clone()).unwrap();
        check_invariants(&h);
    }

    #[test]
    fn hybrid_limits_match_pure_variants(seed in any::<u64>(), eta in -2.0f64..8.0, gamma in 0.3f64..0.99) {
        let cfg = CodecConfig::tiny(Variant::R);
        let p = CodecParameters::init(cfg.clone(), 7).unwrap();
        let mut ns = NoiseSource::new(seed);
        let block = random_block(&cfg, &mut ns);
        let chan = ChannelConfig::awgn(eta, FeedbackSnr::Db(10.0));
        let mut t = run_session_t(&block, &p, &chan, 0.5, 3, &mut ns.clone()).unwrap();
        let h = run_session_hybrid(&block, &p, &chan, 1.0, 0.5, 3, &mut ns.clone()).unwrap();
        t.kind = SessionKind::Hybrid;
        prop_assert_eq!(t, h);
        let mut r = run_session_r(&block, &p, &chan, gamma, 3, &mut ns.clone()).unwrap();
        let h = run_session_hybrid(&block, &p, &chan, gamma, 1.0, 3, &mut ns.clone()).unwrap();
        r.kind = SessionKind::Hybrid;
        prop_assert_eq!(r, h);
    }

    #[test]
    fn noiseless_transmitter_stop_is_error_free(seed in any::<u64>(), eta in -4.0f64..6.0) {
        let cfg = CodecConfig::tiny(Variant::T);
        let p = CodecParameters::init(cfg.clone(), 2).unwrap();
        let mut ns = NoiseSource::new(seed);
        let block = random_block(&cfg, &mut ns);
        let t = run_session_t(&block, &p, &awgn(eta), 0.0, 3, &mut ns).unwrap();
        if t.termination == Termination::Transmitter {
            prop_assert!(!t.is_error());
            prop_assert_eq!(t.estimate_bits(), block.bits().to_vec());
        }
    }
}

#[test]
fn knowledge_rows_of_frozen_groups_stay_fixed_in_sessions() {
    // rebuild the encoder knowledge from a recorded transcript and check the
    // frozen row never changes
    let cfg = tiny_r();
    let p = scripted_decoder(cfg.clone(), &[vec![40.0, 0.0, 0.0, 0.0], vec![0.0; 4]]);
    let block = BitGroupBlock::from_indices(&[0, 2], 2).unwrap();
    let t = run_session_r(&block, &p, &awgn(1.0), 0.9, 3, &mut NoiseSource::new(4)).unwrap();
    let masks: Vec<DecodeMask> = t
        .rounds
        .iter()
        .map(|r| DecodeMask::from_flags(r.mask.clone(), r.round))
        .collect();
    let sent: Vec<Vec<f64>> = t.rounds.iter().map(|r| r.sent.clone()).collect();
    let fb: Vec<Vec<f64>> = t.rounds.iter().map(|r| r.feedback_symbols.clone()).collect();
    let rows: Vec<Mat> = (1..=3)
        .map(|tau| build_encoder_knowledge(&block, &sent[..tau - 1], &fb[..tau - 1], tau, &masks, Variant::R, 3).unwrap())
        .collect();
    assert_eq!(rows[0].row(0), rows[1].row(0));
    assert_eq!(rows[1].row(0), rows[2].row(0));
    assert_ne!(rows[1].row(1), rows[2].row(1));
}
