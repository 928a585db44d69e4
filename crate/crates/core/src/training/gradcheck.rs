use serde::Serialize;

use super::loss_and_gradients;
use crate::channel::{ChannelConfig, FeedbackSnr, NoiseSource};
use crate::error::{Error, Result};
use crate::message::BitGroupBlock;
use crate::net::{CodecParameters, Variant};
use crate::protocol::{LossWindow, Rule, SessionKind};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter array.
    pub per_group: Vec<(String, f64)>,
    pub scalars_checked: usize,
    pub loss: f64,
}

/// Compares the analytic gradient of the weighted loss against central
/// finite differences for every scalar parameter.
///
/// The batch runs to a fixed horizon (no termination gates) with
/// training-mode power normalization, AWGN at 0 dB and 10 dB feedback, so
/// every differentiable path is exercised. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(params: &CodecParameters, batch: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = &params.config;
    if cfg.groups > 2 || cfg.bits_per_group > 2 || cfg.tau_max > 3 || cfg.width > 8 {
        return Err(Error::config("gradient check needs Q <= 2, m <= 2, tau_max <= 3, d <= 8"));
    }
    if batch < 2 {
        return Err(Error::config("gradient check needs a batch of at least 2"));
    }
    let chan = ChannelConfig::awgn(0.0, FeedbackSnr::Db(10.0));
    let kind = match cfg.variant {
        Variant::R => SessionKind::R,
        Variant::T => SessionKind::T,
    };
    let rule = Rule::fixed_horizon(kind);
    let window = LossWindow {
        tau_plus: 1,
        theta: 2.0,
        offset: cfg.tau_max as f64,
    };
    let mut noises: Vec<NoiseSource> = (0..batch).map(|s| NoiseSource::for_worker(seed, s as u64)).collect();
    let blocks: Vec<BitGroupBlock> = noises
        .iter_mut()
        .map(|ns| BitGroupBlock::new(ns.bits(cfg.num_bits()), cfg.groups))
        .collect::<Result<_>>()?;

    let eval = |p: &CodecParameters| -> Result<f64> {
        let mut ns = noises.clone();
        Ok(loss_and_gradients(p, &chan, rule, window, &blocks, &mut ns)?.0)
    };
    let (loss, grads, _) = loss_and_gradients(params, &chan, rule, window, &blocks, &mut noises.clone())?;

    let mut probe = params.clone();
    let mut per_group = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut scalars = 0;
    for i in 0..params.len() {
        let mut worst = 0.0f64;
        for idx in 0..params.arrays[i].len() {
            let (r, c) = (idx / params.arrays[i].ncols(), idx % params.arrays[i].ncols());
            let orig = params.arrays[i][[r, c]];
            probe.arrays[i][[r, c]] = orig + GRADCHECK_STEP;
            let up = eval(&probe)?;
            probe.arrays[i][[r, c]] = orig - GRADCHECK_STEP;
            let down = eval(&probe)?;
            probe.arrays[i][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[[r, c]]);
            let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
            scalars += 1;
        }
        max_rel = max_rel.max(worst);
        per_group.push((params.layout.names[i].clone(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_group,
        scalars_checked: scalars,
        loss,
    })
}
