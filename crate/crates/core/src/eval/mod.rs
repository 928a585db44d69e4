//! Monte-Carlo evaluation: operating points, sweeps and the
//! encoding-dynamics experiment.

mod csvio;
mod dynamics;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::channel::{ChannelConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::message::BitGroupBlock;
use crate::net::{CodecParameters, PowerMode};
use crate::protocol::{rollout, EngineConfig, Rule, SessionKind, SessionTranscript, Termination};
use crate::tape::Tape;

pub use csvio::{
    emit_dynamics, emit_results, parse_dynamics_csv, parse_results_csv, write_dynamics_csv, write_results_csv,
    CSV_SCHEMA_VERSION, DynamicsRow, ResultRow,
};
pub use dynamics::{dynamics_experiment, kernel_density, separation_statistic, silverman_bandwidth, DynamicsResult, Density};

/// Sessions evaluated per batched rollout.
const EVAL_BATCH: usize = 256;

/// Protocol and thresholds of one operating point.
#[derive(Clone, Debug)]
pub struct OperatingPoint {
    pub kind: SessionKind,
    pub chan: ChannelConfig,
    /// `gamma` for R and hybrid (hybrid: 1 disables), unused for T.
    pub gamma: f64,
    /// `gamma_t` for T and hybrid (hybrid: 1 disables), unused for R.
    pub gamma_t: f64,
    pub tau_max: usize,
}

impl OperatingPoint {
    /// The threshold reported in result tables.
    pub fn threshold(&self) -> f64 {
        match self.kind {
            SessionKind::T => self.gamma_t,
            _ => self.gamma,
        }
    }

    pub fn rule(&self, params: &CodecParameters) -> Rule {
        let rule = match self.kind {
            SessionKind::R => Rule::receiver(self.gamma),
            SessionKind::T => Rule::transmitter(self.gamma_t),
            SessionKind::Hybrid => Rule::hybrid(self.gamma, self.gamma_t),
        };
        rule.with_first_decode_round(params.first_decode_round)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationCounts {
    pub threshold: usize,
    pub transmitter: usize,
    pub tau_max_forced: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointResult {
    pub variant: SessionKind,
    pub eta_f_db: f64,
    /// `None` for a noiseless feedback link.
    pub eta_b_db: Option<f64>,
    pub threshold: f64,
    pub n_sessions: usize,
    pub errors: usize,
    pub bler: f64,
    /// 95% Clopper-Pearson interval.
    pub bler_lo: f64,
    pub bler_hi: f64,
    pub mean_rate: f64,
    pub mean_tau: f64,
    pub mean_channel_uses: f64,
    /// Mean square of every transmitted symbol.
    pub mean_power: f64,
    pub terminations: TerminationCounts,
}

/// Exact binomial interval at confidence `1 - alpha`.
pub fn clopper_pearson(errors: usize, n: usize, alpha: f64) -> (f64, f64) {
    let k = errors as f64;
    let nf = n as f64;
    let lo = if errors == 0 {
        0.0
    } else {
        Beta::new(k, nf - k + 1.0).expect("valid shape").inverse_cdf(alpha / 2.0)
    };
    let hi = if errors == n {
        1.0
    } else {
        Beta::new(k + 1.0, nf - k).expect("valid shape").inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Runs sessions `first..first + count` of an evaluation seeded by `seed`.
///
/// Session `i` uses `NoiseSource::for_worker(seed, i)`, drawing its message
/// from the auxiliary stream first; results do not depend on batching.
pub fn run_sessions(
    params: &CodecParameters,
    point: &OperatingPoint,
    seed: u64,
    first: usize,
    count: usize,
    record: bool,
) -> Result<Vec<SessionTranscript>> {
    let cfg = &params.config;
    let engine = EngineConfig {
        rule: point.rule(params),
        tau_max: point.tau_max,
        power: PowerMode::Infer,
        record,
        loss: None,
    };
    let mut out = Vec::with_capacity(count);
    let mut start = first;
    while start < first + count {
        let end = (start + EVAL_BATCH).min(first + count);
        let mut noises: Vec<NoiseSource> = (start..end).map(|i| NoiseSource::for_worker(seed, i as u64)).collect();
        let blocks = noises
            .iter_mut()
            .map(|ns| BitGroupBlock::new(ns.bits(cfg.num_bits()), cfg.groups))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::inference();
        out.extend(rollout(&tape, params, &point.chan, &engine, &blocks, &mut noises)?.transcripts);
        start = end;
    }
    Ok(out)
}

/// Aggregates transcripts into an operating-point summary.
pub fn summarize(point: &OperatingPoint, transcripts: &[SessionTranscript]) -> Result<OperatingPointResult> {
    let n = transcripts.len();
    if n == 0 {
        return Err(Error::config("an operating point needs at least one session"));
    }
    let errors = transcripts.iter().filter(|t| t.is_error()).count();
    let (bler_lo, bler_hi) = clopper_pearson(errors, n, 0.05);
    let mut terminations = TerminationCounts::default();
    for t in transcripts {
        match t.termination {
            Termination::Threshold => terminations.threshold += 1,
            Termination::Transmitter => terminations.transmitter += 1,
            Termination::TauMaxForced => terminations.tau_max_forced += 1,
        }
    }
    let nf = n as f64;
    let power_sum: f64 = transcripts.iter().map(|t| t.power_sum).sum();
    let power_count: usize = transcripts.iter().map(|t| t.power_count).sum();
    Ok(OperatingPointResult {
        variant: point.kind,
        eta_f_db: point.chan.eta_f_db,
        eta_b_db: point.chan.eta_b.as_db(),
        threshold: point.threshold(),
        n_sessions: n,
        errors,
        bler: errors as f64 / nf,
        bler_lo,
        bler_hi,
        mean_rate: transcripts.iter().map(crate::protocol::code_rate).sum::<f64>() / nf,
        mean_tau: transcripts.iter().map(|t| t.stop as f64).sum::<f64>() / nf,
        mean_channel_uses: transcripts.iter().map(|t| t.channel_uses() as f64).sum::<f64>() / nf,
        mean_power: power_sum / power_count.max(1) as f64,
        terminations,
    })
}

/// `n` independent sessions with fresh uniform messages.
pub fn evaluate_operating_point(
    params: &CodecParameters,
    point: &OperatingPoint,
    n: usize,
    seed: u64,
) -> Result<OperatingPointResult> {
    if n == 0 {
        return Err(Error::config("session count must be at least 1"));
    }
    let transcripts = run_sessions(params, point, seed, 0, n, false)?;
    summarize(point, &transcripts)
}

/// Sweep axis.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    /// Thresholds (`gamma` for R/hybrid, `gamma_t` for T).
    Threshold(Vec<f64>),
    /// Forward SNRs in dB.
    EtaF(Vec<f64>),
}

/// Evaluates every point of `axis` around `base`, point `i` seeded with
/// `derive_seed(seed, i)`.
pub fn sweep(
    params: &CodecParameters,
    base: &OperatingPoint,
    axis: &SweepAxis,
    n: usize,
    seed: u64,
) -> Result<Vec<OperatingPointResult>> {
    let values = match axis {
        SweepAxis::Threshold(v) | SweepAxis::EtaF(v) => v,
    };
    if values.is_empty() {
        return Err(Error::config("sweep axis is empty"));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut point = base.clone();
            match axis {
                SweepAxis::Threshold(_) => match point.kind {
                    SessionKind::T => point.gamma_t = v,
                    _ => point.gamma = v,
                },
                SweepAxis::EtaF(_) => point.chan.eta_f_db = v,
            }
            evaluate_operating_point(params, &point, n, crate::channel::derive_seed(seed, i as u64))
        })
        .collect()
}

/// Whether two results' BLER intervals overlap.
pub fn intervals_overlap(a: &OperatingPointResult, b: &OperatingPointResult) -> bool {
    a.bler_lo <= b.bler_hi && b.bler_lo <= a.bler_hi
}
