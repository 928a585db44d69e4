//! Run configuration: a TOML file, preset defaults and command-line
//! overrides resolved into one [`RunConfig`].
//!
//! Precedence, highest first: flags, `VLF_OUT_DIR` (output directory only),
//! file values, preset values, built-in defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use vlf_core::net::Variant;
use vlf_core::protocol::SessionKind;
use vlf_core::training::TrainConfig;

use crate::CliError;

pub const OUT_DIR_ENV: &str = "VLF_OUT_DIR";
pub const DEFAULT_PRESET: &str = "paper-R";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Train,
    Eval,
    Sweep,
    Dynamics,
    Gradcheck,
}

impl std::fmt::Display for Verb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verb::Train => "train",
            Verb::Eval => "eval",
            Verb::Sweep => "sweep",
            Verb::Dynamics => "dynamics",
            Verb::Gradcheck => "gradcheck",
        })
    }
}

/// Feedback SNR: a number in dB or the string `"noiseless"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeedbackSetting {
    Db(f64),
    Word(Noiseless),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noiseless {
    Noiseless,
}

impl FeedbackSetting {
    pub fn from_db(db: Option<f64>) -> Self {
        db.map_or(FeedbackSetting::Word(Noiseless::Noiseless), FeedbackSetting::Db)
    }

    pub fn db(self) -> Option<f64> {
        match self {
            FeedbackSetting::Db(v) => Some(v),
            FeedbackSetting::Word(_) => None,
        }
    }

    pub fn parse_flag(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("noiseless") {
            return Ok(FeedbackSetting::Word(Noiseless::Noiseless));
        }
        s.parse::<f64>()
            .map(FeedbackSetting::Db)
            .map_err(|_| format!("expected a number in dB or 'noiseless', got '{s}'"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Input checkpoint (eval, sweep, dynamics; fine-tuning for train).
    pub checkpoint: Option<PathBuf>,
    /// Where train writes the final model; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint_out: Option<PathBuf>,
    /// Fading trajectory file; AWGN when absent.
    pub trajectory: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub variant: SessionKind,
    pub eta_f_db: f64,
    pub eta_b_db: FeedbackSetting,
    pub gamma: f64,
    pub gamma_t: f64,
    /// Defaults to the model's `tau_max`.
    pub tau_max: Option<usize>,
    pub sessions: usize,
    /// Sweep axes; exactly one must be non-empty for `sweep`.
    pub sweep_gamma: Vec<f64>,
    pub sweep_eta_f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSettings {
    pub trials: usize,
    pub rounds: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    pub variant: Variant,
    /// Independent parameter draws.
    pub draws: usize,
    pub batch: usize,
    pub tolerance: f64,
}

/// Fully resolved configuration. Serialized verbatim (plus `code_version`)
/// as the run manifest, which parses back to the same value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub verb: Verb,
    pub preset: String,
    pub seed: u64,
    pub paths: Paths,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub dynamics: DynamicsSettings,
    pub gradcheck: GradcheckSettings,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub verb: Option<Verb>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub eta_f_db: Option<f64>,
    pub eta_b_db: Option<FeedbackSetting>,
    pub gamma: Option<f64>,
    pub gamma_t: Option<f64>,
    pub sessions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    verb: Option<Verb>,
    preset: Option<String>,
    seed: Option<u64>,
    /// Present in manifests; informational.
    #[allow(dead_code)]
    code_version: Option<String>,
    paths: Option<RawPaths>,
    train: Option<toml::Table>,
    eval: Option<RawEval>,
    dynamics: Option<RawDynamics>,
    gradcheck: Option<RawGradcheck>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    checkpoint: Option<PathBuf>,
    checkpoint_out: Option<PathBuf>,
    trajectory: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    variant: Option<SessionKind>,
    eta_f_db: Option<f64>,
    eta_b_db: Option<FeedbackSetting>,
    gamma: Option<f64>,
    gamma_t: Option<f64>,
    tau_max: Option<usize>,
    sessions: Option<usize>,
    sweep_gamma: Option<Vec<f64>>,
    sweep_eta_f: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    trials: Option<usize>,
    rounds: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGradcheck {
    variant: Option<Variant>,
    draws: Option<usize>,
    batch: Option<usize>,
    tolerance: Option<f64>,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `text` (TOML; empty means all defaults), applies `flags` and
/// `env_out_dir`, and validates the result.
pub fn parse_config(text: &str, flags: &Overrides, env_out_dir: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| cfg_err(format!("config file: {}", e.message())))?;

    let verb = flags
        .verb
        .or(raw.verb)
        .ok_or_else(|| cfg_err("missing required key `verb` (give it on the command line or in the file)"))?;
    let preset = flags
        .preset
        .clone()
        .or(raw.preset)
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let base = TrainConfig::preset(&preset).map_err(|e| cfg_err(e.to_string()))?;

    let mut train = base.clone();
    if let Some(table) = raw.train {
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
        merge(&mut merged, table);
        train = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(format!("[train]: {}", e.message())))?;
    }
    let seed = flags.seed.or(raw.seed).unwrap_or(train.seed);
    train.seed = seed;

    let rp = raw.paths.unwrap_or_default();
    let paths = Paths {
        checkpoint: flags.checkpoint.clone().or(rp.checkpoint),
        checkpoint_out: rp.checkpoint_out,
        trajectory: rp.trajectory,
        out_dir: flags
            .out_dir
            .clone()
            .or(env_out_dir)
            .or(rp.out_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
    };

    let re = raw.eval.unwrap_or_default();
    let kind = match train.codec.variant {
        Variant::R => SessionKind::R,
        Variant::T => SessionKind::T,
    };
    let (def_gamma, def_gamma_t) = match train.codec.variant {
        Variant::R => (train.threshold[0], 0.0),
        Variant::T => (1.0 - 1e-3, train.threshold[0]),
    };
    let mut eval = EvalSettings {
        variant: re.variant.unwrap_or(kind),
        eta_f_db: re.eta_f_db.unwrap_or(train.eta_f_db[0]),
        eta_b_db: re.eta_b_db.unwrap_or(FeedbackSetting::from_db(train.eta_b_db)),
        gamma: re.gamma.unwrap_or(def_gamma),
        gamma_t: re.gamma_t.unwrap_or(def_gamma_t),
        tau_max: re.tau_max,
        sessions: re.sessions.unwrap_or(10_000),
        sweep_gamma: re.sweep_gamma.unwrap_or_default(),
        sweep_eta_f: re.sweep_eta_f.unwrap_or_default(),
    };

    // flag overrides reach both the evaluation point and the training target
    if let Some(v) = flags.eta_f_db {
        eval.eta_f_db = v;
        train.eta_f_db = [v, v];
    }
    if let Some(v) = flags.eta_b_db {
        eval.eta_b_db = v;
        train.eta_b_db = v.db();
    }
    if let Some(v) = flags.gamma {
        eval.gamma = v;
        if train.codec.variant == Variant::R {
            train.threshold = [v, v];
        }
    }
    if let Some(v) = flags.gamma_t {
        eval.gamma_t = v;
        if train.codec.variant == Variant::T {
            train.threshold = [v, v];
        }
    }
    if let Some(v) = flags.sessions {
        eval.sessions = v;
    }

    let rd = raw.dynamics.unwrap_or_default();
    let dynamics = DynamicsSettings {
        trials: rd.trials.unwrap_or(10_000),
        rounds: rd.rounds.unwrap_or_else(|| vec![1, 2, 3, 4, 6]),
    };
    let rg = raw.gradcheck.unwrap_or_default();
    let gradcheck = GradcheckSettings {
        variant: rg.variant.unwrap_or(Variant::R),
        draws: rg.draws.unwrap_or(5),
        batch: rg.batch.unwrap_or(4),
        tolerance: rg.tolerance.unwrap_or(1e-4),
    };

    let cfg = RunConfig {
        verb,
        preset,
        seed,
        paths,
        train,
        eval,
        dynamics,
        gradcheck,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed > i64::MAX as u64 {
            return Err(cfg_err(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        self.train.validate().map_err(|e| cfg_err(format!("[train]: {e}")))?;
        let e = &self.eval;
        let floor = 1.0 / self.train.codec.num_patterns() as f64;
        if !e.eta_f_db.is_finite() {
            return Err(cfg_err("eval.eta_f_db must be finite"));
        }
        if let FeedbackSetting::Db(v) = e.eta_b_db {
            if !v.is_finite() {
                return Err(cfg_err("eval.eta_b_db must be finite or \"noiseless\""));
            }
        }
        let gamma_ok = |g: f64| g > floor && g <= 1.0;
        match e.variant {
            SessionKind::R if !(gamma_ok(e.gamma) && e.gamma < 1.0) => {
                return Err(cfg_err(format!("eval.gamma must lie in ({floor}, 1), got {}", e.gamma)))
            }
            SessionKind::Hybrid if !gamma_ok(e.gamma) => {
                return Err(cfg_err(format!("eval.gamma must lie in ({floor}, 1], got {}", e.gamma)))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&e.gamma_t) {
            return Err(cfg_err(format!("eval.gamma_t must lie in [0, 1], got {}", e.gamma_t)));
        }
        if e.tau_max == Some(0) {
            return Err(cfg_err("eval.tau_max must be at least 1"));
        }
        if e.sessions == 0 {
            return Err(cfg_err("eval.sessions must be at least 1"));
        }
        for &g in &e.sweep_gamma {
            if !(gamma_ok(g) && (g < 1.0 || e.variant == SessionKind::Hybrid)) && e.variant != SessionKind::T {
                return Err(cfg_err(format!("eval.sweep_gamma value {g} outside ({floor}, 1)")));
            }
            if e.variant == SessionKind::T && !(0.0..=1.0).contains(&g) {
                return Err(cfg_err(format!("eval.sweep_gamma value {g} outside [0, 1]")));
            }
        }
        if e.sweep_eta_f.iter().any(|v| !v.is_finite()) {
            return Err(cfg_err("eval.sweep_eta_f values must be finite"));
        }
        if self.verb == Verb::Sweep && e.sweep_gamma.is_empty() == e.sweep_eta_f.is_empty() {
            return Err(cfg_err(
                "sweep needs exactly one of eval.sweep_gamma and eval.sweep_eta_f to be non-empty",
            ));
        }
        if self.dynamics.trials == 0 || self.dynamics.rounds.is_empty() || self.dynamics.rounds.contains(&0) {
            return Err(cfg_err("dynamics needs trials >= 1 and a non-empty list of rounds >= 1"));
        }
        let g = &self.gradcheck;
        if g.draws == 0 || g.batch < 2 || !(g.tolerance > 0.0) {
            return Err(cfg_err("gradcheck needs draws >= 1, batch >= 2 and tolerance > 0"));
        }
        if matches!(self.verb, Verb::Eval | Verb::Sweep | Verb::Dynamics) && self.paths.checkpoint.is_none() {
            return Err(cfg_err(format!(
                "missing required key `paths.checkpoint` for verb {} (or pass --checkpoint)",
                self.verb
            )));
        }
        Ok(())
    }

    /// The manifest: this config plus the code version, as TOML.
    pub fn manifest(&self) -> Result<String, CliError> {
        let mut table = toml::Table::try_from(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        table.insert("code_version".into(), toml::Value::String(crate::code_version()));
        toml::to_string(&table).map_err(|e| CliError::Runtime(e.to_string()))
    }
}
