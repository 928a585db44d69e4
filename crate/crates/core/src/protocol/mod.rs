//! The interactive round loop.
//!
//! Receiver-driven (R), transmitter-driven (T) and hybrid sessions all run
//! through one batched engine, [`rollout`]. Sessions in a batch are stacked
//! row-wise (`Q` rows each) and every session owns its own [`NoiseSource`],
//! so a session's transcript does not depend on what else is in the batch
//! except through training-mode power normalization.
//!
//! Per round `tau`:
//!
//! 1. the encoder emits one symbol per undecoded group, power normalized;
//! 2. forward channel (AWGN, or fading with perfect-CSI equalization);
//! 3. the decoder updates the beliefs of undecoded groups; frozen groups keep
//!    theirs;
//! 4. receiver check: groups whose largest belief reaches `gamma` freeze
//!    (from round `first_decode_round` on);
//! 5. feedback of the scaled received symbols (and, when the transmitter
//!    checks termination, of the scaled beliefs); decoded indices and the
//!    stop signal travel on an error-free side channel;
//! 6. transmitter check over the groups still undecoded;
//! 7. at `tau_max` whatever is left is decided by argmax.
//!
//! A round's (symbol, feedback) pair enters a group's encoder knowledge only
//! if the group is still undecoded after that round, so frozen rows stop
//! changing.

mod transcript;

use crate::channel::equalized_noise;
use crate::channel::{belief_scale, feedback_symbol_scale, ChannelConfig, FadingWindow, NoiseSource, Stream};
use crate::error::{Error, Result};
use crate::message::{argmax, max_entry, validate_threshold, BitGroupBlock};
use crate::net::{
    antipodal_bits, decoder_knowledge, encoder_knowledge, normalize_power, CodecParameters, Network, PowerMode, Side,
};
use crate::tape::{BatchStats, Mat, Tape, Var};

pub use transcript::{
    code_rate, differential_rate, parse_transcript_log, write_transcript_log, RoundRecord, SessionKind,
    SessionTranscript, Termination, TranscriptRecord, TRANSCRIPT_SCHEMA_VERSION,
};

/// Termination rules of a rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rule {
    pub kind: SessionKind,
    /// Receiver threshold `gamma`; `None` disables receiver freezing.
    pub receiver: Option<f64>,
    /// Transmitter confidence threshold `gamma_t`; `None` disables the
    /// transmitter check. `Some(0.0)` checks correctness only.
    pub transmitter: Option<f64>,
    /// Receiver freezing is attempted only from this round on.
    pub first_decode_round: usize,
}

impl Rule {
    pub fn receiver(gamma: f64) -> Self {
        Self {
            kind: SessionKind::R,
            receiver: Some(gamma),
            transmitter: None,
            first_decode_round: 1,
        }
    }

    pub fn transmitter(gamma_t: f64) -> Self {
        Self {
            kind: SessionKind::T,
            receiver: None,
            transmitter: Some(gamma_t),
            first_decode_round: 1,
        }
    }

    /// `gamma >= 1` disables the receiver side and `gamma_t >= 1` the
    /// transmitter side (the two degenerate limits).
    pub fn hybrid(gamma: f64, gamma_t: f64) -> Self {
        Self {
            kind: SessionKind::Hybrid,
            receiver: (gamma < 1.0).then_some(gamma),
            transmitter: (gamma_t < 1.0).then_some(gamma_t),
            first_decode_round: 1,
        }
    }

    /// Every group runs to `tau_max`.
    pub fn fixed_horizon(kind: SessionKind) -> Self {
        Self {
            kind,
            receiver: None,
            transmitter: None,
            first_decode_round: 1,
        }
    }

    pub fn with_first_decode_round(mut self, round: usize) -> Self {
        self.first_decode_round = round.max(1);
        self
    }
}

/// Loss weighting `theta^(tau - c)` over rounds `tau >= tau_plus`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWindow {
    pub tau_plus: usize,
    pub theta: f64,
    pub offset: f64,
}

impl LossWindow {
    pub fn weight(&self, tau: usize) -> f64 {
        self.theta.powf(tau as f64 - self.offset)
    }
}

/// Log-probability floor of the loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub rule: Rule,
    pub tau_max: usize,
    pub power: PowerMode,
    pub record: bool,
    pub loss: Option<LossWindow>,
}

pub struct RolloutOutput {
    pub transcripts: Vec<SessionTranscript>,
    /// Batch-mean weighted cross-entropy, when requested.
    pub loss: Option<Var>,
    /// Training-mode batch statistics per round (`None` where the stored
    /// statistics were used or the round did not run).
    pub power_stats: Vec<Option<BatchStats>>,
}

fn check_setup(params: &CodecParameters, chan: &ChannelConfig, rule: &Rule, tau_max: usize) -> Result<()> {
    let cfg = &params.config;
    chan.validate()?;
    if tau_max == 0 || tau_max > cfg.tau_max {
        return Err(Error::config(format!("tau_max {tau_max} must lie in 1..={}", cfg.tau_max)));
    }
    if let Some(g) = rule.receiver {
        validate_threshold(g, cfg.bits_per_group)?;
    }
    if let Some(gt) = rule.transmitter {
        if !(0.0..1.0).contains(&gt) {
            return Err(Error::config(format!("transmitter threshold {gt} must lie in [0, 1)")));
        }
    }
    if let Some(traj) = &chan.fading {
        if traj.subcarrier_count() < cfg.groups.div_ceil(2) {
            return Err(Error::config(format!(
                "fading trajectory has {} subcarriers, {} groups need {}",
                traj.subcarrier_count(),
                cfg.groups,
                cfg.groups.div_ceil(2)
            )));
        }
    }
    Ok(())
}

/// Runs a batch of sessions on `tape`.
///
/// `noises[s]` drives session `s` and is advanced in place.
pub fn rollout(
    tape: &Tape,
    params: &CodecParameters,
    chan: &ChannelConfig,
    engine: &EngineConfig,
    blocks: &[BitGroupBlock],
    noises: &mut [NoiseSource],
) -> Result<RolloutOutput> {
    let cfg = &params.config;
    let rule = engine.rule;
    let tau_max = engine.tau_max;
    check_setup(params, chan, &rule, tau_max)?;
    if blocks.is_empty() || blocks.len() != noises.len() {
        return Err(Error::internal("need one noise source per block and at least one block"));
    }
    let q = cfg.groups;
    let m = cfg.bits_per_group;
    let p = cfg.num_patterns();
    if blocks.iter().any(|b| b.num_groups() != q || b.bits_per_group() != m) {
        return Err(Error::config(format!("blocks must have Q = {q} groups of m = {m} bits")));
    }
    let batch = blocks.len();
    let n = batch * q;
    let truth: Vec<usize> = blocks.iter().flat_map(|b| b.pattern_indices().iter().copied()).collect();

    let net = Network::new(tape, params);
    let sigma2_f = chan.sigma2_f();
    let sigma2_b = chan.sigma2_b();
    let sd_f = sigma2_f.sqrt();
    let sd_b = sigma2_b.sqrt();
    let cs = feedback_symbol_scale(sigma2_b);
    let cb = belief_scale(m);

    let windows: Option<Vec<FadingWindow>> = chan.fading.as_ref().map(|traj| {
        noises
            .iter_mut()
            .map(|ns| crate::channel::sample_fading_window(traj, tau_max, ns))
            .collect()
    });

    let bits = tape.constant(antipodal_bits(blocks));
    let mut sent: Vec<Var> = Vec::with_capacity(tau_max);
    let mut feedback: Vec<Var> = Vec::with_capacity(tau_max);
    let mut received: Vec<Var> = Vec::with_capacity(tau_max);
    let mut prev = tape.constant(Mat::from_elem((n, p), 1.0 / p as f64));
    let mut active = vec![true; n];

    let mut group_stop = vec![0usize; n];
    let mut estimate = vec![0usize; n];
    let mut stop = vec![0usize; batch];
    let mut cause: Vec<Option<Termination>> = vec![None; batch];
    let mut symbols: Vec<Vec<usize>> = vec![Vec::new(); batch];
    let mut records: Vec<Vec<RoundRecord>> = vec![Vec::new(); batch];
    let mut power_sum = vec![0.0; batch];
    let mut power_count = vec![0usize; batch];
    let mut power_stats = vec![None; tau_max];
    let mut loss_terms: Vec<Var> = Vec::new();
    let mut loss_const = 0.0;

    for tau in 1..=tau_max {
        if !active.iter().any(|&a| a) {
            break;
        }
        for (s, count) in symbols.iter_mut().enumerate() {
            if cause[s].is_none() {
                count.push(active[s * q..(s + 1) * q].iter().filter(|&&a| a).count());
            }
        }

        // encoder
        let ek = encoder_knowledge(tape, &bits, &sent, &feedback, cfg.tau_max);
        let h = net.feature_extract(Side::Encoder, &ek, tau);
        let (agg, _) = net.attention_aggregate(Side::Encoder, &h, &active);
        let raw = net.encode_head(&agg);
        let (x, stats) = normalize_power(tape, &raw, &active, tau, engine.power, &params.power);
        power_stats[tau - 1] = stats;

        // forward channel
        let mut w = Mat::zeros((n, 1));
        for (s, ns) in noises.iter_mut().enumerate() {
            let draws = match &windows {
                None => ns.gaussians(Stream::Forward, q).into_iter().map(|g| sd_f * g).collect(),
                Some(win) => equalized_noise(&win[s][tau - 1], q, sigma2_f, ns),
            };
            for (g, v) in draws.into_iter().enumerate() {
                if active[s * q + g] {
                    w[[s * q + g, 0]] = v;
                }
            }
        }
        let y = tape.add_const(&x, &w);
        received.push(y.clone());

        // decoder
        let dk = decoder_knowledge(tape, &received, &prev, cfg.tau_max);
        let hd = net.feature_extract(Side::Decoder, &dk, tau);
        let (aggd, _) = net.attention_aggregate(Side::Decoder, &hd, &active);
        let logits = net.decode_logits(&aggd);
        let probs = tape.softmax(&logits);
        let keep_new = Mat::from_shape_fn((n, p), |(r, _)| if active[r] { 1.0 } else { 0.0 });
        let keep_old = keep_new.mapv(|v| 1.0 - v);
        let cur = tape.add(&tape.mul_const(&probs, keep_new), &tape.mul_const(&prev, keep_old));

        if let Some(lw) = engine.loss {
            if tau >= lw.tau_plus {
                let logp = tape.log_softmax(&logits);
                let weight = lw.weight(tau);
                let floor = LOG_FLOOR.ln();
                let mut wm = Mat::zeros((n, p));
                for r in (0..n).filter(|&r| active[r]) {
                    let j = truth[r];
                    if logp.value()[[r, j]] < floor {
                        loss_const += weight * floor;
                    } else {
                        wm[[r, j]] = weight;
                    }
                }
                loss_terms.push(tape.weighted_sum(&logp, wm));
            }
        }

        // receiver check
        let beliefs = cur.value();
        let mut after = active.clone();
        if let Some(gamma) = rule.receiver {
            if tau >= rule.first_decode_round {
                for r in (0..n).filter(|&r| active[r]) {
                    let row = beliefs.row(r);
                    let row = row.as_slice().expect("row-major");
                    if max_entry(row) >= gamma {
                        after[r] = false;
                        group_stop[r] = tau;
                        estimate[r] = argmax(row);
                    }
                }
            }
        }

        // feedback
        let mut fb_noise = Mat::zeros((n, 1));
        for (s, ns) in noises.iter_mut().enumerate() {
            for (g, v) in ns.gaussians(Stream::FeedbackSymbols, q).into_iter().enumerate() {
                fb_noise[[s * q + g, 0]] = sd_b * v;
            }
        }
        let keep = Mat::from_shape_fn((n, 1), |(r, _)| if after[r] { 1.0 } else { 0.0 });
        let fb = tape.mul_const(&tape.add_const(&tape.scale(&y, cs), &fb_noise), keep.clone());

        let mut belief_fb: Vec<Option<Vec<f64>>> = vec![None; batch];
        if let Some(gamma_t) = rule.transmitter {
            for (s, ns) in noises.iter_mut().enumerate() {
                let rows = s * q..(s + 1) * q;
                let noisy: Vec<f64> = ns
                    .gaussians(Stream::FeedbackBeliefs, q * p)
                    .into_iter()
                    .zip(beliefs.slice(ndarray::s![rows.clone(), ..]).iter())
                    .map(|(g, &b)| cb * b + sd_b * g)
                    .collect();
                let remaining: Vec<usize> = rows.clone().filter(|&r| after[r]).collect();
                let confirmed = !remaining.is_empty()
                    && remaining.iter().all(|&r| {
                        let col = &noisy[(r - s * q) * p..(r - s * q + 1) * p];
                        argmax(col) == truth[r] && (gamma_t <= 0.0 || max_entry(col) / cb >= gamma_t)
                    });
                if confirmed {
                    for &r in &remaining {
                        after[r] = false;
                        group_stop[r] = tau;
                        estimate[r] = argmax(beliefs.row(r).as_slice().expect("row-major"));
                    }
                    cause[s] = Some(Termination::Transmitter);
                    stop[s] = tau;
                }
                belief_fb[s] = Some(noisy);
            }
        }

        // timeout
        if tau == tau_max {
            for s in 0..batch {
                let rows = s * q..(s + 1) * q;
                if rows.clone().any(|r| after[r]) {
                    for r in rows {
                        if !after[r] {
                            continue;
                        }
                        after[r] = false;
                        group_stop[r] = tau;
                        estimate[r] = argmax(beliefs.row(r).as_slice().expect("row-major"));
                    }
                    cause[s] = Some(Termination::TauMaxForced);
                    stop[s] = tau;
                }
            }
        }

        for s in 0..batch {
            let rows = s * q..(s + 1) * q;
            if !rows.clone().any(|r| active[r]) {
                continue;
            }
            for r in rows.clone().filter(|&r| active[r]) {
                let v = x.value()[[r, 0]];
                power_sum[s] += v * v;
                power_count[s] += 1;
            }
            if cause[s].is_none() && !rows.clone().any(|r| after[r]) {
                cause[s] = Some(Termination::Threshold);
                stop[s] = tau;
            }
            if engine.record {
                let col = |v: &Var| rows.clone().map(|r| v.value()[[r, 0]]).collect::<Vec<f64>>();
                records[s].push(RoundRecord {
                    round: tau,
                    active: active[rows.clone()].to_vec(),
                    sent: col(&x),
                    received: col(&y),
                    feedback_symbols: col(&fb),
                    feedback_beliefs: belief_fb[s].take(),
                    beliefs: beliefs.slice(ndarray::s![rows.clone(), ..]).iter().copied().collect(),
                    mask: after[rows.clone()].to_vec(),
                });
            }
        }

        sent.push(tape.mul_const(&x, keep));
        feedback.push(fb);
        prev = cur;
        active = after;
    }

    let loss = (!loss_terms.is_empty()).then(|| {
        let mut total = loss_terms[0].clone();
        for t in &loss_terms[1..] {
            total = tape.add(&total, t);
        }
        let total = tape.add_const(&total, &Mat::from_elem((1, 1), loss_const));
        tape.scale(&total, -1.0 / batch as f64)
    });

    let transcripts = (0..batch)
        .map(|s| {
            let rows = s * q..(s + 1) * q;
            SessionTranscript {
                kind: rule.kind,
                seed: noises[s].seed(),
                bits_per_group: m,
                bits: blocks[s].bits().to_vec(),
                truth: truth[rows.clone()].to_vec(),
                rounds: std::mem::take(&mut records[s]),
                symbols_per_round: std::mem::take(&mut symbols[s]),
                group_stop: group_stop[rows.clone()].to_vec(),
                stop: stop[s],
                estimate: estimate[rows].to_vec(),
                termination: cause[s].expect("every session terminates by tau_max"),
                power_sum: power_sum[s],
                power_count: power_count[s],
            }
        })
        .collect();

    Ok(RolloutOutput {
        transcripts,
        loss,
        power_stats,
    })
}

fn single(
    block: &BitGroupBlock,
    params: &CodecParameters,
    chan: &ChannelConfig,
    rule: Rule,
    tau_max: usize,
    noise: &mut NoiseSource,
) -> Result<SessionTranscript> {
    let tape = Tape::inference();
    let engine = EngineConfig {
        rule,
        tau_max,
        power: PowerMode::Infer,
        record: true,
        loss: None,
    };
    let mut out = rollout(&tape, params, chan, &engine, std::slice::from_ref(block), std::slice::from_mut(noise))?;
    Ok(out.transcripts.pop().expect("one session"))
}

/// Receiver-driven session: groups freeze once their largest belief
/// reaches `gamma` (from `params.first_decode_round` on).
pub fn run_session_r(
    block: &BitGroupBlock,
    params: &CodecParameters,
    chan: &ChannelConfig,
    gamma: f64,
    tau_max: usize,
    noise: &mut NoiseSource,
) -> Result<SessionTranscript> {
    let rule = Rule::receiver(gamma).with_first_decode_round(params.first_decode_round);
    single(block, params, chan, rule, tau_max, noise)
}

/// Transmitter-driven session: all `Q` groups transmit every round until the
/// fed-back beliefs confirm the message with confidence `gamma_t`.
pub fn run_session_t(
    block: &BitGroupBlock,
    params: &CodecParameters,
    chan: &ChannelConfig,
    gamma_t: f64,
    tau_max: usize,
    noise: &mut NoiseSource,
) -> Result<SessionTranscript> {
    single(block, params, chan, Rule::transmitter(gamma_t), tau_max, noise)
}

/// Hybrid session. `gamma = 1` disables receiver freezing (the pure-T
/// limit) and `gamma_t = 1` disables the transmitter check (the pure-R
/// limit).
pub fn run_session_hybrid(
    block: &BitGroupBlock,
    params: &CodecParameters,
    chan: &ChannelConfig,
    gamma: f64,
    gamma_t: f64,
    tau_max: usize,
    noise: &mut NoiseSource,
) -> Result<SessionTranscript> {
    let floor = 1.0 / params.config.num_patterns() as f64;
    if !(gamma > floor && gamma <= 1.0) {
        return Err(Error::config(format!("hybrid threshold {gamma} must lie in ({floor}, 1]")));
    }
    if !(0.0..=1.0).contains(&gamma_t) {
        return Err(Error::config(format!("hybrid transmitter threshold {gamma_t} must lie in [0, 1]")));
    }
    let rule = Rule::hybrid(gamma, gamma_t).with_first_decode_round(params.first_decode_round);
    single(block, params, chan, rule, tau_max, noise)
}
