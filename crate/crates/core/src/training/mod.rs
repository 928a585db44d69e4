//! Loss, curriculum, optimizer loop, power calibration and gradient checks.

mod gradcheck;
mod optim;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, ChannelConfig, FadingTrajectory, FeedbackSnr, NoiseSource};
use crate::error::{Error, Result};
use crate::message::{BeliefMatrix, BitGroupBlock};
use crate::net::checkpoint::save_checkpoint;
use crate::net::{CodecConfig, CodecParameters, PowerMode, PowerStats, Variant};
use crate::protocol::{rollout, EngineConfig, LossWindow, Rule, SessionKind, LOG_FLOOR};
use crate::tape::Tape;

pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_STEP};
pub use optim::{clip_global_norm, learning_rate, AdamW};

/// How the forward SNR enters the `tau_plus` capacity heuristic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrReading {
    /// `s = 10^(eta/10)`.
    #[default]
    Linear,
    /// `s = eta` taken literally in dB.
    Db,
}

/// `max(mu, floor(2m / log2(1 + s)))`.
///
/// A non-positive `s` (possible only with the dB reading at
/// `eta <= 0`) makes the capacity term unbounded; the result is then
/// capped at `tau_cap`.
pub fn compute_tau_plus(eta_f_db: f64, m: usize, mu: usize, reading: SnrReading, tau_cap: usize) -> usize {
    let s = match reading {
        SnrReading::Linear => 10f64.powf(eta_f_db / 10.0),
        SnrReading::Db => eta_f_db,
    };
    let cap = (1.0 + s).log2();
    let base = if cap > 0.0 {
        ((2 * m) as f64 / cap).floor().min(tau_cap as f64) as usize
    } else {
        tau_cap
    };
    mu.max(base)
}

/// `mu` by variant and threshold: 3 for T; for R 5, 6 or 7 as `gamma`
/// passes `1 - 1e-5` and `1 - 1e-6`.
pub fn mu_for(variant: Variant, gamma: f64) -> usize {
    match variant {
        Variant::T => 3,
        Variant::R if gamma <= 1.0 - 1e-5 => 5,
        Variant::R if gamma <= 1.0 - 1e-6 => 6,
        Variant::R => 7,
    }
}

/// Per-session inputs of the weighted loss.
#[derive(Clone, Debug)]
pub struct LossSession {
    /// `beliefs[t]` is the belief matrix after round `t + 1`.
    pub beliefs: Vec<BeliefMatrix>,
    pub truth: Vec<usize>,
    /// `tau*_q`.
    pub stops: Vec<usize>,
}

/// `-(1/B) sum_s sum_q sum_{tau = tau_plus}^{tau*_q} theta^(tau - c) log p`,
/// with `log` floored at `log(1e-12)`.
pub fn weighted_loss(sessions: &[LossSession], window: LossWindow) -> Result<f64> {
    if sessions.is_empty() {
        return Err(Error::internal("weighted loss of an empty batch"));
    }
    let mut total = 0.0;
    for s in sessions {
        for (q, (&j, &stop)) in s.truth.iter().zip(&s.stops).enumerate() {
            if stop > s.beliefs.len() {
                return Err(Error::internal("belief history shorter than a stopping time"));
            }
            for tau in window.tau_plus.max(1)..=stop {
                let p = s.beliefs[tau - 1].column(q)[j];
                total -= window.weight(tau) * p.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / sessions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub codec: CodecConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Exponential weight base `theta`.
    pub theta: f64,
    /// Exponential weight offset `c`.
    pub offset: f64,
    /// Overrides the `mu` schedule when set.
    pub mu: Option<usize>,
    /// Forward SNR range in dB, sampled uniformly per batch.
    pub eta_f_db: [f64; 2],
    /// Feedback SNR in dB; `None` is noiseless.
    pub eta_b_db: Option<f64>,
    /// Threshold range: `gamma` for R (sampled log-uniformly in `1 - gamma`),
    /// `gamma_t` for T (uniform).
    pub threshold: [f64; 2],
    pub phase: Phase,
    pub seed: u64,
    /// Leading fraction of steps run with every group to `tau_max`.
    pub fixed_horizon_fraction: f64,
    pub tau_plus_reading: SnrReading,
    pub grad_clip: Option<f64>,
    pub power_momentum: f64,
    /// Batches averaged when calibrating the inference power statistics.
    pub calibration_batches: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    fn base(codec: CodecConfig, batch_size: usize, steps: usize) -> Self {
        let (theta, offset, threshold) = match codec.variant {
            Variant::R => (10.0, 9.0, [1.0 - 1e-3, 1.0 - 1e-3]),
            Variant::T => (10f64.powf(0.25), 16.0, [0.0, 0.0]),
        };
        Self {
            codec,
            batch_size,
            steps,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            theta,
            offset,
            mu: None,
            eta_f_db: [2.0, 2.0],
            eta_b_db: None,
            threshold,
            phase: Phase::Finetune,
            seed: 1,
            fixed_horizon_fraction: 0.1,
            tau_plus_reading: SnrReading::Linear,
            grad_clip: None,
            power_momentum: 0.05,
            calibration_batches: 16,
            checkpoint_every: 0,
            log_every: 10,
        }
    }

    /// Full-scale batch: B = 8192 (R) / 2048 (T).
    pub fn paper(variant: Variant) -> Self {
        let b = match variant {
            Variant::R => 8192,
            Variant::T => 2048,
        };
        Self::base(CodecConfig::desk(variant), b, 20_000)
    }

    /// Desk-scale shrink: B = 256, d = 32. The small batch needs a larger
    /// step size with clipping, and for R a flatter loss weight.
    pub fn desk(variant: Variant) -> Self {
        let steps = match variant {
            Variant::R => 4500,
            Variant::T => 1500,
        };
        let mut cfg = Self::base(CodecConfig::desk(variant), 256, steps);
        cfg.learning_rate = 5e-3;
        cfg.grad_clip = Some(5.0);
        if variant == Variant::R {
            cfg.theta = 2.0;
        }
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-R" => Ok(Self::paper(Variant::R)),
            "paper-T" => Ok(Self::paper(Variant::T)),
            "desk-R" => Ok(Self::desk(Variant::R)),
            "desk-T" => Ok(Self::desk(Variant::T)),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected paper-R, paper-T, desk-R or desk-T)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let bad = |msg: String| Err(Error::config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.theta > 0.0) || !self.offset.is_finite() {
            return bad("theta must be positive and offset finite".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative".into());
        }
        if !(self.eta_f_db[0] <= self.eta_f_db[1]) || self.eta_f_db.iter().any(|v| !v.is_finite()) {
            return bad(format!("eta_f_db range {:?} is not an ordered finite pair", self.eta_f_db));
        }
        if let Some(b) = self.eta_b_db {
            if !b.is_finite() {
                return bad("eta_b_db must be finite (omit for noiseless feedback)".into());
            }
        }
        if !(self.threshold[0] <= self.threshold[1]) {
            return bad(format!("threshold range {:?} is not ordered", self.threshold));
        }
        match self.codec.variant {
            Variant::R => {
                for &g in &self.threshold {
                    crate::message::validate_threshold(g, self.codec.bits_per_group)?;
                }
            }
            Variant::T => {
                if self.threshold.iter().any(|g| !(0.0..1.0).contains(g)) {
                    return bad(format!("transmitter threshold range {:?} must lie in [0, 1)", self.threshold));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.fixed_horizon_fraction) {
            return bad("fixed_horizon_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.power_momentum) {
            return bad("power_momentum must lie in [0, 1]".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if self.mu == Some(0) {
            return bad("mu must be at least 1".into());
        }
        Ok(())
    }

    fn feedback(&self) -> FeedbackSnr {
        match self.eta_b_db {
            None => FeedbackSnr::Noiseless,
            Some(db) => FeedbackSnr::Db(db),
        }
    }

    fn mu_at(&self, threshold: f64) -> usize {
        self.mu.unwrap_or_else(|| mu_for(self.codec.variant, threshold))
    }

    /// `tau_plus` at an operating point.
    pub fn tau_plus(&self, eta_f_db: f64, threshold: f64) -> usize {
        compute_tau_plus(
            eta_f_db,
            self.codec.bits_per_group,
            self.mu_at(threshold),
            self.tau_plus_reading,
            self.codec.tau_max,
        )
        .min(self.codec.tau_max)
    }

    /// Centre of the curriculum, used for calibration and the stored
    /// decoding start round.
    pub fn target(&self) -> (f64, f64) {
        let eta = 0.5 * (self.eta_f_db[0] + self.eta_f_db[1]);
        let th = match self.codec.variant {
            Variant::R => {
                let u = 0.5 * (-(1.0 - self.threshold[0]).log10() - (1.0 - self.threshold[1]).log10());
                1.0 - 10f64.powf(-u)
            }
            Variant::T => 0.5 * (self.threshold[0] + self.threshold[1]),
        };
        (eta, th)
    }
}

/// Curriculum draw for one step: `(eta_f_db, threshold)`.
pub fn sample_curriculum(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xC0FF_EE00, step as u64));
    let [lo, hi] = cfg.eta_f_db;
    let eta = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let [a, b] = cfg.threshold;
    let th = match cfg.codec.variant {
        Variant::R => {
            let (ua, ub) = (-(1.0 - a).log10(), -(1.0 - b).log10());
            if ub > ua {
                1.0 - 10f64.powf(-rng.random_range(ua..=ub))
            } else {
                a
            }
        }
        Variant::T => {
            if b > a {
                rng.random_range(a..=b)
            } else {
                a
            }
        }
    };
    (eta, th)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub eta_f_db: f64,
    pub threshold: f64,
    pub fixed_horizon: bool,
    pub grad_norm: f64,
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub fading: Option<Arc<FadingTrajectory>>,
    /// Receives one JSON line every `log_every` steps.
    pub log: Option<&'a mut dyn Write>,
    /// Periodic and last-good checkpoint path.
    pub checkpoint: Option<PathBuf>,
    /// Called with every log record (progress reporting).
    pub progress: Option<&'a mut dyn FnMut(&TrainLogRecord)>,
}

fn random_blocks(cfg: &CodecConfig, noises: &mut [NoiseSource]) -> Result<Vec<BitGroupBlock>> {
    noises
        .iter_mut()
        .map(|ns| BitGroupBlock::new(ns.bits(cfg.num_bits()), cfg.groups))
        .collect()
}

fn batch_noises(seed: u64, step: usize, batch: usize) -> Vec<NoiseSource> {
    let base = derive_seed(seed, step as u64);
    (0..batch).map(|s| NoiseSource::for_worker(base, s as u64)).collect()
}

/// Rule used at a training step.
fn step_rule(cfg: &TrainConfig, fixed: bool, threshold: f64, tau_plus: usize) -> Rule {
    let kind = match cfg.codec.variant {
        Variant::R => SessionKind::R,
        Variant::T => SessionKind::T,
    };
    if fixed {
        return Rule::fixed_horizon(kind);
    }
    match cfg.codec.variant {
        Variant::R => Rule::receiver(threshold).with_first_decode_round(tau_plus),
        Variant::T => Rule::transmitter(threshold),
    }
}

/// Weighted loss and gradients of one batch.
pub fn loss_and_gradients(
    params: &CodecParameters,
    chan: &ChannelConfig,
    rule: Rule,
    window: LossWindow,
    blocks: &[BitGroupBlock],
    noises: &mut [NoiseSource],
) -> Result<(f64, Vec<Option<crate::tape::Mat>>, Vec<Option<crate::tape::BatchStats>>)> {
    let tape = Tape::new();
    let engine = EngineConfig {
        rule,
        tau_max: params.config.tau_max,
        power: PowerMode::Train,
        record: false,
        loss: Some(window),
    };
    let out = rollout(&tape, params, chan, &engine, blocks, noises)?;
    let Some(loss) = out.loss else {
        return Ok((0.0, vec![None; params.len()], out.power_stats));
    };
    let value = loss.value()[[0, 0]];
    let grads = tape.backward(&loss, params.len());
    Ok((value, grads, out.power_stats))
}

/// Optimizes `params` under `cfg`. Phase differences live entirely in the
/// configured ranges; see [`train_phase1`] and [`train_phase2`].
pub fn train(mut params: CodecParameters, cfg: &TrainConfig, hooks: &mut TrainHooks<'_>) -> Result<CodecParameters> {
    cfg.validate()?;
    if params.config != cfg.codec {
        return Err(Error::config("parameter shapes do not match the training configuration"));
    }
    let mut opt = AdamW::new(&params.layout.shapes, cfg.weight_decay);
    let fixed_steps = (cfg.fixed_horizon_fraction * cfg.steps as f64).round() as usize;
    let mut last_good = params.clone();

    for step in 0..cfg.steps {
        let (eta, threshold) = sample_curriculum(cfg, step);
        let tau_plus = cfg.tau_plus(eta, threshold);
        let window = LossWindow {
            tau_plus,
            theta: cfg.theta,
            offset: cfg.offset,
        };
        let fixed = step < fixed_steps;
        let rule = step_rule(cfg, fixed, threshold, tau_plus);
        let mut chan = ChannelConfig::awgn(eta, cfg.feedback());
        if let Some(f) = &hooks.fading {
            chan = chan.with_fading(Arc::clone(f));
        }
        let mut noises = batch_noises(cfg.seed, step, cfg.batch_size);
        let blocks = random_blocks(&cfg.codec, &mut noises)?;
        let (loss, mut grads, stats) = loss_and_gradients(&params, &chan, rule, window, &blocks, &mut noises)?;
        let finite_grads = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !loss.is_finite() || !finite_grads {
            if let Some(path) = &hooks.checkpoint {
                save_checkpoint(path, &last_good, &serde_json::json!({"step": step, "diverged": true}))?;
            }
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let lr = learning_rate(cfg.learning_rate, step, cfg.steps);
        last_good = params.clone();
        opt.step(&mut params.arrays, &grads, lr);
        for (round, s) in stats.into_iter().enumerate() {
            if let Some(s) = s {
                params.power.update(round + 1, s, cfg.power_momentum);
            }
        }

        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            let rec = TrainLogRecord {
                step,
                loss,
                lr,
                eta_f_db: eta,
                threshold,
                fixed_horizon: fixed,
                grad_norm,
            };
            if let Some(w) = hooks.log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("training log", e))?;
            }
            if let Some(f) = hooks.progress.as_mut() {
                f(&rec);
            }
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &hooks.checkpoint {
                save_checkpoint(path, &params, &serde_json::json!({"step": step + 1}))?;
            }
        }
    }

    let (eta, threshold) = cfg.target();
    if cfg.codec.variant == Variant::R {
        params.first_decode_round = cfg.tau_plus(eta, threshold);
    }
    let mut chan = ChannelConfig::awgn(eta, cfg.feedback());
    if let Some(f) = &hooks.fading {
        chan = chan.with_fading(Arc::clone(f));
    }
    let rule = step_rule(cfg, false, threshold, params.first_decode_round);
    calibrate_power(&mut params, &chan, rule, cfg.batch_size, cfg.calibration_batches, cfg.seed)?;
    Ok(params)
}

/// Phase I: fresh parameters trained under the configured curriculum.
pub fn train_phase1(cfg: &TrainConfig, hooks: &mut TrainHooks<'_>) -> Result<CodecParameters> {
    let params = CodecParameters::init(cfg.codec.clone(), cfg.seed)?;
    train(params, cfg, hooks)
}

/// Phase II: continues from `params` at one fixed operating point (the
/// ranges of `cfg` are collapsed to their lower ends).
pub fn train_phase2(params: CodecParameters, cfg: &TrainConfig, hooks: &mut TrainHooks<'_>) -> Result<CodecParameters> {
    let mut fixed = cfg.clone();
    fixed.phase = Phase::Finetune;
    fixed.eta_f_db = [cfg.eta_f_db[0]; 2];
    fixed.threshold = [cfg.threshold[0]; 2];
    train(params, &fixed, hooks)
}

/// Sets the inference power statistics to the average training-mode batch
/// statistics of `batches` rollouts at one operating point.
pub fn calibrate_power(
    params: &mut CodecParameters,
    chan: &ChannelConfig,
    rule: Rule,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<()> {
    let rounds = params.config.tau_max;
    let mut mean = vec![0.0; rounds];
    let mut var = vec![0.0; rounds];
    let mut weight = vec![0.0; rounds];
    for b in 0..batches {
        let mut noises = batch_noises(seed ^ 0xCA11_B8A7, b, batch_size.max(2));
        let blocks = random_blocks(&params.config, &mut noises)?;
        let tape = Tape::inference();
        let engine = EngineConfig {
            rule,
            tau_max: rounds,
            power: PowerMode::Train,
            record: false,
            loss: None,
        };
        let out = rollout(&tape, params, chan, &engine, &blocks, &mut noises)?;
        for (r, s) in out.power_stats.iter().enumerate() {
            if let Some(s) = s {
                let w = s.count as f64;
                mean[r] += w * s.mean;
                var[r] += w * (s.std * s.std + s.mean * s.mean);
                weight[r] += w;
            }
        }
    }
    let mut power = PowerStats::identity(rounds);
    for r in 0..rounds {
        if weight[r] > 0.0 {
            let m = mean[r] / weight[r];
            let v = (var[r] / weight[r] - m * m).max(0.0);
            power.mean[r] = m;
            power.std[r] = v.sqrt().max(crate::tape::STD_FLOOR);
        } else {
            power.mean[r] = params.power.mean[r];
            power.std[r] = params.power.std[r];
        }
    }
    power.calibrated = true;
    params.power = power;
    Ok(())
}
