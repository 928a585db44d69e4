use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::message::BitGroupBlock;
use crate::net::{CodecParameters, PowerMode, Variant};
use crate::protocol::{rollout, EngineConfig, Rule, SessionKind};
use crate::tape::Tape;

/// Trials per batched rollout (each trial contributes `2^m` sessions).
const TRIAL_BATCH: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Density {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    /// `values[pattern][k]`: density of pattern `pattern` at `grid[k]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsResult {
    pub trials: usize,
    pub rounds: Vec<usize>,
    pub eta_f_db: f64,
    /// `samples[r][j]`: first-group symbols in round `rounds[r]` when the
    /// first group carries pattern `j`, one per trial.
    pub samples: Vec<Vec<Vec<f64>>>,
    pub separation: Vec<f64>,
    pub densities: Vec<Density>,
    /// Mean square of every transmitted symbol over all sessions.
    pub mean_power: f64,
    pub power_count: usize,
}

/// Between-pattern variance of the per-pattern means over the pooled
/// within-pattern variance. Zero when every pattern gives the same
/// constant, infinite when patterns differ but each is constant.
pub fn separation_statistic(groups: &[Vec<f64>]) -> f64 {
    let means: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len().max(1) as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let between = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / means.len() as f64;
    let within = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len().max(1) as f64)
        .sum::<f64>()
        / groups.len() as f64;
    if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        between / within
    }
}

/// Silverman's rule of thumb: `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round()) as usize];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

/// Gaussian kernel density of each group on a shared grid, with one
/// bandwidth from the pooled samples.
pub fn kernel_density(groups: &[Vec<f64>], points: usize) -> Density {
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let h = silverman_bandwidth(&pooled);
    let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let grid: Vec<f64> = (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1).max(1) as f64)
        .collect();
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let values = groups
        .iter()
        .map(|g| {
            grid.iter()
                .map(|&x| g.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm / g.len() as f64)
                .collect()
        })
        .collect();
    Density {
        bandwidth: h,
        grid,
        values,
    }
}

/// Per trial: one noise realization and one draw of groups `2..Q`, with
/// the first group enumerated over all `2^m` patterns. Records the first
/// group's transmitted symbol in each requested round. Sessions run to a
/// fixed horizon so every round has a sample.
pub fn dynamics_experiment(
    params: &CodecParameters,
    chan: &ChannelConfig,
    trials: usize,
    rounds: &[usize],
    seed: u64,
) -> Result<DynamicsResult> {
    let cfg = &params.config;
    if trials == 0 {
        return Err(Error::config("dynamics experiment needs at least one trial"));
    }
    if rounds.is_empty() || rounds.iter().any(|&r| r == 0 || r > cfg.tau_max) {
        return Err(Error::config(format!("rounds must be a non-empty subset of 1..={}", cfg.tau_max)));
    }
    let patterns = cfg.num_patterns();
    let horizon = *rounds.iter().max().expect("non-empty");
    let kind = match cfg.variant {
        Variant::R => SessionKind::R,
        Variant::T => SessionKind::T,
    };
    let engine = EngineConfig {
        rule: Rule::fixed_horizon(kind),
        tau_max: horizon,
        power: PowerMode::Infer,
        record: true,
        loss: None,
    };
    let mut samples = vec![vec![Vec::with_capacity(trials); patterns]; rounds.len()];
    let (mut power_sum, mut power_count) = (0.0, 0);
    let mut start = 0;
    while start < trials {
        let end = (start + TRIAL_BATCH).min(trials);
        let mut blocks = Vec::with_capacity((end - start) * patterns);
        let mut noises = Vec::with_capacity((end - start) * patterns);
        for t in start..end {
            let mut ns = NoiseSource::for_worker(seed, t as u64);
            let base = BitGroupBlock::new(ns.bits(cfg.num_bits()), cfg.groups)?;
            for j in 0..patterns {
                let mut idx = base.pattern_indices().to_vec();
                idx[0] = j;
                blocks.push(BitGroupBlock::from_indices(&idx, cfg.bits_per_group)?);
                noises.push(ns.clone());
            }
        }
        let out = rollout(&Tape::inference(), params, chan, &engine, &blocks, &mut noises)?;
        for (s, t) in out.transcripts.iter().enumerate() {
            power_sum += t.power_sum;
            power_count += t.power_count;
            let j = s % patterns;
            for (ri, &r) in rounds.iter().enumerate() {
                samples[ri][j].push(t.rounds[r - 1].sent[0]);
            }
        }
        start = end;
    }
    let separation = samples.iter().map(|g| separation_statistic(g)).collect();
    let densities = samples.iter().map(|g| kernel_density(g, 128)).collect();
    Ok(DynamicsResult {
        trials,
        rounds: rounds.to_vec(),
        eta_f_db: chan.eta_f_db,
        samples,
        separation,
        densities,
        mean_power: power_sum / power_count.max(1) as f64,
        power_count,
    })
}
