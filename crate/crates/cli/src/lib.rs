//! Command-line runner: `vlf <verb> [flags]`.
//!
//! Every run writes `manifest.toml` into the output directory first. The
//! manifest is a complete config file; `vlf --config <out>/manifest.toml`
//! repeats the run.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use vlf_core::channel::{ChannelConfig, FadingTrajectory, FeedbackSnr};
use vlf_core::eval::{
    emit_dynamics, emit_results, run_sessions, summarize, sweep, OperatingPoint, OperatingPointResult, SweepAxis,
};
use vlf_core::net::checkpoint::{load_checkpoint, save_checkpoint};
use vlf_core::net::{CodecConfig, CodecParameters};
use vlf_core::protocol::{write_transcript_log, TranscriptRecord};
use vlf_core::training::{gradient_check, train_phase1, train_phase2, TrainHooks, TrainLogRecord};

pub use config::{parse_config, FeedbackSetting, Overrides, RunConfig, Verb};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("gate failed: {0}")]
    Gate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Gate(_) => 4,
        }
    }

    fn from_core(verb: Verb, e: vlf_core::Error) -> Self {
        match e {
            vlf_core::Error::Config(msg) => CliError::Config(format!("{verb}: {msg}")),
            other => CliError::Runtime(format!("{verb}: {other}")),
        }
    }
}

pub fn code_version() -> String {
    format!("vlf-cli {}", env!("CARGO_PKG_VERSION"))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// What a run produced, for callers and tests.
#[derive(Debug, Default)]
pub struct RunReport {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let manifest = out.join("manifest.toml");
    write_file(&manifest, cfg.manifest()?)?;
    let mut report = match cfg.verb {
        Verb::Train => run_train(cfg),
        Verb::Eval => run_eval(cfg),
        Verb::Sweep => run_sweep(cfg),
        Verb::Dynamics => run_dynamics(cfg),
        Verb::Gradcheck => run_gradcheck(cfg),
    }?;
    report.artifacts.insert(0, manifest);
    Ok(report)
}

fn load_trajectory(cfg: &RunConfig) -> Result<Option<Arc<FadingTrajectory>>, CliError> {
    cfg.paths
        .trajectory
        .as_ref()
        .map(|p| FadingTrajectory::load(p).map(Arc::new))
        .transpose()
        .map_err(|e| CliError::from_core(cfg.verb, e))
}

fn load_model(cfg: &RunConfig) -> Result<CodecParameters, CliError> {
    let path = cfg.paths.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config(format!("missing required key `paths.checkpoint` for verb {}", cfg.verb))
    })?;
    load_checkpoint(path)
        .map(|(p, _)| p)
        .map_err(|e| CliError::from_core(cfg.verb, e))
}

fn channel(cfg: &RunConfig) -> Result<ChannelConfig, CliError> {
    let eta_b = cfg
        .eval
        .eta_b_db
        .db()
        .map_or(FeedbackSnr::Noiseless, FeedbackSnr::Db);
    let mut chan = ChannelConfig::awgn(cfg.eval.eta_f_db, eta_b);
    if let Some(traj) = load_trajectory(cfg)? {
        chan = chan.with_fading(traj);
    }
    Ok(chan)
}

fn operating_point(cfg: &RunConfig, params: &CodecParameters) -> Result<OperatingPoint, CliError> {
    let tau_max = cfg.eval.tau_max.unwrap_or(params.config.tau_max);
    if tau_max > params.config.tau_max {
        return Err(CliError::Config(format!(
            "eval.tau_max {tau_max} exceeds the model's tau_max {}",
            params.config.tau_max
        )));
    }
    Ok(OperatingPoint {
        kind: cfg.eval.variant,
        chan: channel(cfg)?,
        gamma: cfg.eval.gamma,
        gamma_t: cfg.eval.gamma_t,
        tau_max,
    })
}

fn describe(r: &OperatingPointResult) -> String {
    format!(
        "{} eta_f={} dB threshold={} sessions={} bler={:.3e} [{:.3e}, {:.3e}] rate={:.4} tau={:.3} power={:.4}",
        r.variant, r.eta_f_db, r.threshold, r.n_sessions, r.bler, r.bler_lo, r.bler_hi, r.mean_rate, r.mean_tau, r.mean_power
    )
}

fn run_train(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let out = &cfg.paths.out_dir;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let periodic = out.join("checkpoint.ckpt");
    let mut progress = |r: &TrainLogRecord| {
        eprintln!(
            "step {:>6}  loss {:.5}  lr {:.3e}  eta_f {:.2}  |g| {:.3}",
            r.step, r.loss, r.lr, r.eta_f_db, r.grad_norm
        )
    };
    let mut hooks = TrainHooks {
        fading: load_trajectory(cfg)?,
        log: Some(&mut log),
        checkpoint: Some(periodic.clone()),
        progress: Some(&mut progress),
    };
    let params = match &cfg.paths.checkpoint {
        Some(path) => {
            let (p, _) = load_checkpoint(path).map_err(|e| CliError::from_core(cfg.verb, e))?;
            train_phase2(p, &cfg.train, &mut hooks)
        }
        None => train_phase1(&cfg.train, &mut hooks),
    }
    .map_err(|e| CliError::from_core(cfg.verb, e))?;
    drop(hooks);
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let model = cfg.paths.checkpoint_out.clone().unwrap_or_else(|| out.join("model.ckpt"));
    let extra = json!({ "manifest": cfg.manifest()?, "code_version": code_version() });
    save_checkpoint(&model, &params, &extra).map_err(|e| CliError::from_core(cfg.verb, e))?;
    let mut artifacts = vec![log_path, model.clone()];
    if periodic.exists() {
        artifacts.push(periodic);
    }
    Ok(RunReport {
        artifacts,
        summary: format!("trained {} steps; model written to {}", cfg.train.steps, model.display()),
    })
}

fn run_eval(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let params = load_model(cfg)?;
    let point = operating_point(cfg, &params)?;
    let err = |e| CliError::from_core(cfg.verb, e);
    let transcripts = run_sessions(&params, &point, cfg.seed, 0, cfg.eval.sessions, false).map_err(err)?;
    let result = summarize(&point, &transcripts).map_err(err)?;
    let records: Vec<TranscriptRecord> = transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| TranscriptRecord::from_transcript(i as u64, t))
        .collect();
    let out = &cfg.paths.out_dir;
    let csv = out.join("results.csv");
    let log = out.join("transcripts.jsonl");
    emit_results(std::slice::from_ref(&result), &csv).map_err(err)?;
    write_file(&log, write_transcript_log(&records).map_err(err)?)?;
    Ok(RunReport {
        artifacts: vec![csv, log],
        summary: describe(&result),
    })
}

fn run_sweep(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let params = load_model(cfg)?;
    let point = operating_point(cfg, &params)?;
    let axis = if cfg.eval.sweep_gamma.is_empty() {
        SweepAxis::EtaF(cfg.eval.sweep_eta_f.clone())
    } else {
        SweepAxis::Threshold(cfg.eval.sweep_gamma.clone())
    };
    let err = |e| CliError::from_core(cfg.verb, e);
    let rows = sweep(&params, &point, &axis, cfg.eval.sessions, cfg.seed).map_err(err)?;
    let csv = cfg.paths.out_dir.join("sweep.csv");
    emit_results(&rows, &csv).map_err(err)?;
    Ok(RunReport {
        artifacts: vec![csv],
        summary: rows.iter().map(describe).collect::<Vec<_>>().join("\n"),
    })
}

fn run_dynamics(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let params = load_model(cfg)?;
    let chan = channel(cfg)?;
    let err = |e| CliError::from_core(cfg.verb, e);
    let d = vlf_core::eval::dynamics_experiment(&params, &chan, cfg.dynamics.trials, &cfg.dynamics.rounds, cfg.seed)
        .map_err(err)?;
    let out = &cfg.paths.out_dir;
    let csv = out.join("dynamics.csv");
    emit_dynamics(&d, &csv).map_err(err)?;
    let summary_path = out.join("dynamics.json");
    let summary = json!({
        "trials": d.trials,
        "rounds": d.rounds,
        "eta_f_db": d.eta_f_db,
        "separation": d.separation,
        "mean_power": d.mean_power,
        "densities": d.densities,
    });
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    let text = d
        .rounds
        .iter()
        .zip(&d.separation)
        .map(|(r, s)| format!("round {r}: separation {s:.4e}"))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(RunReport {
        artifacts: vec![csv, summary_path],
        summary: text,
    })
}

fn run_gradcheck(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let g = &cfg.gradcheck;
    let err = |e| CliError::from_core(cfg.verb, e);
    let mut worst = 0.0f64;
    let mut reports = Vec::with_capacity(g.draws);
    for draw in 0..g.draws {
        let seed = vlf_core::channel::derive_seed(cfg.seed, draw as u64);
        let params = CodecParameters::init(CodecConfig::tiny(g.variant), seed).map_err(err)?;
        let r = gradient_check(&params, g.batch, seed).map_err(err)?;
        eprintln!("draw {draw}: max relative error {:.3e}", r.max_rel_error);
        worst = worst.max(r.max_rel_error);
        reports.push(r);
    }
    let path = cfg.paths.out_dir.join("gradcheck.json");
    let body = json!({ "variant": g.variant, "tolerance": g.tolerance, "max_rel_error": worst, "draws": reports });
    write_file(
        &path,
        serde_json::to_string_pretty(&body).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    let summary = format!("gradcheck max relative error {worst:.3e} (tolerance {:.0e})", g.tolerance);
    if !(worst < g.tolerance) {
        return Err(CliError::Gate(summary));
    }
    Ok(RunReport {
        artifacts: vec![path],
        summary,
    })
}

/// Reads the config file (if any), resolves, runs and prints the outcome.
/// Returns the process exit code.
pub fn main_with(config_path: Option<&Path>, flags: &Overrides) -> i32 {
    let outcome = (|| {
        let text = match config_path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let env_out = std::env::var_os(config::OUT_DIR_ENV).map(PathBuf::from);
        let cfg = parse_config(&text, flags, env_out)?;
        run(&cfg)
    })();
    match outcome {
        Ok(report) => {
            println!("{}", report.summary);
            for a in &report.artifacts {
                println!("wrote {}", a.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
