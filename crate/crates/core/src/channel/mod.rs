//! Forward and feedback links: AWGN, feedback power scaling and fading.

mod fading;
mod noise;

use std::sync::Arc;

pub use fading::{
    equalize_fading, jakes_trajectory, pack_symbols, parse_fading_trajectory, sample_fading_window,
    unpack_symbols, FadingTrajectory, FadingWindow, MIN_GAIN_MAGNITUDE,
};
pub use noise::{derive_seed, NoiseSource, Stream};
pub(crate) use fading::equalized_noise;

use crate::error::{Error, Result};

/// Noise variance for an SNR given in dB: `10^(-eta/10)`.
pub fn snr_to_sigma2(eta_db: f64) -> f64 {
    10f64.powf(-eta_db / 10.0)
}

/// SNR in dB for a noise variance.
pub fn sigma2_to_snr(sigma2: f64) -> f64 {
    10.0 * (1.0 / sigma2).log10()
}

/// Scale applied to received symbols before feedback: `sqrt(1 / (1 + sigma_b^2))`.
pub fn feedback_symbol_scale(sigma2_b: f64) -> f64 {
    (1.0 / (1.0 + sigma2_b)).sqrt()
}

/// Scale applied to the belief matrix before feedback: `2^m / sqrt(2^m - 1)`.
pub fn belief_scale(bits_per_group: usize) -> f64 {
    let p = (1u64 << bits_per_group) as f64;
    p / (p - 1.0).sqrt()
}

/// `y = x + w` with `w ~ N(0, sigma2)` i.i.d., drawn from the forward stream.
pub fn awgn_transmit(x: &[f64], sigma2: f64, noise: &mut NoiseSource) -> Vec<f64> {
    let sd = sigma2.max(0.0).sqrt();
    x.iter()
        .map(|&xi| xi + sd * noise.gaussian(Stream::Forward))
        .collect()
}

/// Scaled received symbols `C_s * y` sent back over the feedback link.
pub fn scale_feedback_symbols(y: &[f64], sigma2_b: f64) -> Vec<f64> {
    let cs = feedback_symbol_scale(sigma2_b);
    y.iter().map(|v| cs * v).collect()
}

/// Adds i.i.d. `N(0, sigma2_b)` noise to a feedback payload of any shape
/// (flattened row-major), drawing from `stream`.
pub fn feedback_channel(
    payload: &[f64],
    sigma2_b: f64,
    noise: &mut NoiseSource,
    stream: Stream,
) -> Vec<f64> {
    let sd = sigma2_b.max(0.0).sqrt();
    payload
        .iter()
        .map(|&v| v + sd * noise.gaussian(stream))
        .collect()
}

/// Feedback-link quality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeedbackSnr {
    Noiseless,
    Db(f64),
}

impl FeedbackSnr {
    pub fn sigma2(self) -> f64 {
        match self {
            FeedbackSnr::Noiseless => 0.0,
            FeedbackSnr::Db(db) => snr_to_sigma2(db),
        }
    }

    /// `None` for a noiseless link.
    pub fn as_db(self) -> Option<f64> {
        match self {
            FeedbackSnr::Noiseless => None,
            FeedbackSnr::Db(db) => Some(db),
        }
    }
}

/// Forward/feedback link configuration.
///
/// Fading, when present, applies to the forward link only; the receiver
/// equalizes with perfect CSI. Fading on the feedback link is not modeled.
#[derive(Clone, Debug)]
pub struct ChannelConfig {
    pub eta_f_db: f64,
    pub eta_b: FeedbackSnr,
    pub fading: Option<Arc<FadingTrajectory>>,
}

impl ChannelConfig {
    pub fn awgn(eta_f_db: f64, eta_b: FeedbackSnr) -> Self {
        Self {
            eta_f_db,
            eta_b,
            fading: None,
        }
    }

    pub fn with_fading(mut self, trajectory: Arc<FadingTrajectory>) -> Self {
        self.fading = Some(trajectory);
        self
    }

    pub fn sigma2_f(&self) -> f64 {
        snr_to_sigma2(self.eta_f_db)
    }

    pub fn sigma2_b(&self) -> f64 {
        self.eta_b.sigma2()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta_f_db.is_finite() {
            return Err(Error::config("forward SNR must be finite"));
        }
        if let FeedbackSnr::Db(db) = self.eta_b {
            if !db.is_finite() {
                return Err(Error::config("feedback SNR must be finite or noiseless"));
            }
        }
        Ok(())
    }
}
