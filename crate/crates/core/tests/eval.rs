use vlf_core::channel::{ChannelConfig, FeedbackSnr};
use vlf_core::eval::*;
use vlf_core::net::{CodecConfig, CodecParameters, Variant};
use vlf_core::protocol::{code_rate, SessionKind};

fn point(kind: SessionKind, gamma: f64, gamma_t: f64, tau_max: usize) -> OperatingPoint {
    OperatingPoint {
        kind,
        chan: ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless),
        gamma,
        gamma_t,
        tau_max,
    }
}

fn tiny(variant: Variant, seed: u64) -> CodecParameters {
    CodecParameters::init(CodecConfig::tiny(variant), seed).unwrap()
}

#[test]
fn uniform_decoder_bler_matches_closed_form() {
    // zero model: uniform beliefs, timeout, argmax ties to pattern 0, so
    // the block is right only when every group carries pattern 0
    let cfg = CodecConfig::tiny(Variant::R);
    let p = CodecParameters::zeros(cfg.clone()).unwrap();
    let oracle = 1.0 - 2f64.powi(-((cfg.bits_per_group * cfg.groups) as i32));
    let r = evaluate_operating_point(&p, &point(SessionKind::R, 0.9, 0.0, cfg.tau_max), 4000, 7).unwrap();
    assert!(r.bler_lo <= oracle && oracle <= r.bler_hi, "{oracle} not in [{}, {}]", r.bler_lo, r.bler_hi);
    assert_eq!(r.terminations.tau_max_forced, 4000);
}

#[test]
fn results_do_not_depend_on_batching() {
    let p = tiny(Variant::R, 3);
    let op = point(SessionKind::R, 0.6, 0.0, 3);
    let whole = run_sessions(&p, &op, 11, 0, 300, true).unwrap();
    let mut parts = run_sessions(&p, &op, 11, 0, 100, true).unwrap();
    parts.extend(run_sessions(&p, &op, 11, 100, 200, true).unwrap());
    assert_eq!(whole.len(), parts.len());
    for (a, b) in whole.iter().zip(&parts) {
        assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
    }
}

#[test]
fn same_seed_same_result() {
    let p = tiny(Variant::T, 5);
    let op = point(SessionKind::T, 0.0, 0.0, 3);
    let a = evaluate_operating_point(&p, &op, 500, 9).unwrap();
    let b = evaluate_operating_point(&p, &op, 500, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn t_rate_identity() {
    let p = tiny(Variant::T, 5);
    let cfg = &p.config;
    let op = point(SessionKind::T, 0.0, 0.0, 3);
    let ts = run_sessions(&p, &op, 2, 0, 400, false).unwrap();
    let m = cfg.bits_per_group as f64;
    for t in &ts {
        assert!((code_rate(t) - m / t.stop as f64).abs() < 1e-12);
    }
    let r = summarize(&op, &ts).unwrap();
    let oracle = m * ts.iter().map(|t| 1.0 / t.stop as f64).sum::<f64>() / ts.len() as f64;
    assert!((r.mean_rate - oracle).abs() < 1e-12);
}

#[test]
fn disjoint_seeds_give_overlapping_intervals() {
    let p = tiny(Variant::R, 3);
    let op = point(SessionKind::R, 0.6, 0.0, 3);
    let a = evaluate_operating_point(&p, &op, 2000, 100).unwrap();
    let b = evaluate_operating_point(&p, &op, 2000, 200).unwrap();
    if !intervals_overlap(&a, &b) {
        eprintln!("flag: intervals do not overlap: {a:?} vs {b:?}");
    }
}

#[test]
fn zero_sessions_rejected() {
    let p = tiny(Variant::R, 3);
    assert!(evaluate_operating_point(&p, &point(SessionKind::R, 0.6, 0.0, 3), 0, 1).is_err());
}

#[test]
fn gamma_sweep_has_one_row_per_value() {
    let p = tiny(Variant::R, 3);
    let gammas: Vec<f64> = (3..=7).map(|k| 1.0 - 10f64.powi(-k)).collect();
    let rows = sweep(&p, &point(SessionKind::R, 0.9, 0.0, 3), &SweepAxis::Threshold(gammas.clone()), 50, 4).unwrap();
    assert_eq!(rows.len(), 5);
    for (r, g) in rows.iter().zip(&gammas) {
        assert_eq!(r.threshold, *g);
    }
    let rows = sweep(&p, &point(SessionKind::R, 0.9, 0.0, 3), &SweepAxis::EtaF(vec![-1.0, 0.0, 1.0]), 50, 4).unwrap();
    assert_eq!(rows.iter().map(|r| r.eta_f_db).collect::<Vec<_>>(), vec![-1.0, 0.0, 1.0]);
    assert!(sweep(&p, &point(SessionKind::R, 0.9, 0.0, 3), &SweepAxis::Threshold(vec![]), 50, 4).is_err());
}

#[test]
fn empty_results_csv_is_header_only() {
    let mut buf = Vec::new();
    write_results_csv(&[], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("# schema_version=1"));
    assert_eq!(
        lines[1],
        "variant,eta_f_db,eta_b_db,threshold,n_sessions,bler,bler_lo,bler_hi,mean_rate,mean_tau,mean_power"
    );
    assert!(parse_results_csv(text.as_bytes()).unwrap().is_empty());
}

#[test]
fn results_csv_round_trips_at_nine_digits() {
    let p = tiny(Variant::R, 3);
    let mut op = point(SessionKind::R, 0.6, 0.0, 3);
    let a = evaluate_operating_point(&p, &op, 200, 1).unwrap();
    op.chan.eta_b = FeedbackSnr::Db(7.5);
    let b = evaluate_operating_point(&p, &op, 200, 2).unwrap();
    let mut buf = Vec::new();
    write_results_csv(&[a.clone(), b.clone()], &mut buf).unwrap();
    let rows = parse_results_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].eta_b_db, f64::INFINITY);
    assert_eq!(rows[1].eta_b_db, 7.5);
    for (row, r) in rows.iter().zip([&a, &b]) {
        let want = ResultRow::from(r);
        assert_eq!(row.variant, "R");
        assert_eq!(row.n_sessions, want.n_sessions);
        for (x, y) in [
            (row.bler, want.bler),
            (row.bler_lo, want.bler_lo),
            (row.bler_hi, want.bler_hi),
            (row.mean_rate, want.mean_rate),
            (row.mean_tau, want.mean_tau),
            (row.mean_power, want.mean_power),
            (row.threshold, want.threshold),
        ] {
            assert!((x - y).abs() <= 5e-9 * y.abs(), "{x} vs {y}");
        }
    }
}

#[test]
fn fixed_seed_csvs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny(Variant::T, 8);
    let op = point(SessionKind::T, 0.0, 0.0, 3);
    for name in ["a.csv", "b.csv"] {
        let r = evaluate_operating_point(&p, &op, 300, 42).unwrap();
        emit_results(&[r], &dir.path().join(name)).unwrap();
    }
    assert_eq!(
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn results_csv_rejects_bad_input() {
    assert!(parse_results_csv("variant\n".as_bytes()).is_err());
    assert!(parse_results_csv("# schema_version=2 table=operating_points\n".as_bytes()).is_err());
    assert!(parse_results_csv("# schema_version=1 table=dynamics\n".as_bytes()).is_err());
    let bad = "# schema_version=1 table=operating_points\nvariant,eta_f_db\nR,1\n";
    assert!(parse_results_csv(bad.as_bytes()).is_err());
}

#[test]
fn zero_model_dynamics_has_no_separation() {
    let p = CodecParameters::zeros(CodecConfig::tiny(Variant::R)).unwrap();
    let chan = ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless);
    let d = dynamics_experiment(&p, &chan, 40, &[1, 3], 5).unwrap();
    assert_eq!(d.separation, vec![0.0, 0.0]);
}

#[test]
fn dynamics_is_exhaustive_over_patterns() {
    let p = tiny(Variant::R, 6);
    let chan = ChannelConfig::awgn(1.0, FeedbackSnr::Db(10.0));
    let trials = 45;
    let d = dynamics_experiment(&p, &chan, trials, &[1, 2, 3], 5).unwrap();
    assert_eq!(d.trials, trials);
    assert_eq!(d.samples.len(), 3);
    for per_round in &d.samples {
        assert_eq!(per_round.len(), p.config.num_patterns());
        for s in per_round {
            assert_eq!(s.len(), trials);
        }
    }
    // an initialized model does tell patterns apart in round 1
    assert!(d.separation[0] > 0.0);

    let mut buf = Vec::new();
    write_dynamics_csv(&d, &mut buf).unwrap();
    let (n, rows) = parse_dynamics_csv(buf.as_slice()).unwrap();
    assert_eq!(n, trials);
    assert_eq!(rows.len(), 3 * p.config.num_patterns() * trials);
    let first = &rows[0];
    assert_eq!((first.round, first.pattern_index), (1, 0));
    assert!((first.sample_value - d.samples[0][0][0]).abs() <= 5e-9 * first.sample_value.abs().max(1e-300));
}

#[test]
fn dynamics_rejects_bad_rounds() {
    let p = tiny(Variant::R, 6);
    let chan = ChannelConfig::awgn(1.0, FeedbackSnr::Noiseless);
    assert!(dynamics_experiment(&p, &chan, 4, &[], 1).is_err());
    assert!(dynamics_experiment(&p, &chan, 4, &[0], 1).is_err());
    assert!(dynamics_experiment(&p, &chan, 4, &[4], 1).is_err());
    assert!(dynamics_experiment(&p, &chan, 0, &[1], 1).is_err());
}
