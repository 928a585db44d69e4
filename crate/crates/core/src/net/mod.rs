//! The shared encoder/decoder networks.
//!
//! Both sides follow the same pattern, applied row-wise with one row per
//! bit group and weights shared across groups:
//!
//! 1. a knowledge vector per group (fixed width, zero padded to `tau_max`);
//! 2. a variable-depth feature extractor (shallow ReLU stack up to round
//!    `tau_vd`, deep stack afterwards) plus a learned per-group position;
//! 3. single-head masked self-attention across the groups of a session,
//!    with a residual connection;
//! 4. a two-layer GeLU head (encoder: one parity symbol per group; decoder:
//!    followed by a linear map to `2^m` logits).

pub mod checkpoint;
mod params;

use std::rc::Rc;

use ndarray::Axis;

pub use params::{CodecConfig, CodecParameters, Layout, PowerStats, SideLayout, Variant};

use crate::error::{Error, Result};
use crate::message::{BeliefMatrix, BitGroupBlock, DecodeMask};
use crate::tape::{BatchStats, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Parameters bound to a tape for one forward pass.
pub struct Network<'a> {
    tape: &'a Tape,
    params: &'a CodecParameters,
    vars: Vec<Var>,
}

impl<'a> Network<'a> {
    pub fn new(tape: &'a Tape, params: &'a CodecParameters) -> Self {
        let vars = params.bind(tape);
        Self { tape, params, vars }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn params(&self) -> &'a CodecParameters {
        self.params
    }

    fn side(&self, side: Side) -> &SideLayout {
        match side {
            Side::Encoder => &self.params.layout.encoder,
            Side::Decoder => &self.params.layout.decoder,
        }
    }

    fn linear(&self, x: &Var, (w, b): (usize, usize)) -> Var {
        let t = self.tape;
        t.add_bias(&t.matmul(x, &self.vars[w]), &self.vars[b])
    }

    /// Latent matrix (`rows x d`) for a knowledge matrix at round `tau`.
    ///
    /// Hidden layers use ReLU; the last layer of each stack is linear.
    pub fn feature_extract(&self, side: Side, knowledge: &Var, tau: usize) -> Var {
        let layout = self.side(side);
        let stack = if tau <= self.params.config.tau_vd {
            &layout.shallow
        } else {
            &layout.deep
        };
        let mut h = knowledge.clone();
        for (l, &layer) in stack.iter().enumerate() {
            h = self.linear(&h, layer);
            if l + 1 < stack.len() {
                h = self.tape.relu(&h);
            }
        }
        self.tape.add_block_rows(&h, &self.vars[layout.pos])
    }

    /// Masked self-attention over the groups of each session plus the
    /// residual latent. `active[r]` marks rows whose check node still
    /// receives; every row of a session stays visible as a source.
    ///
    /// Returns the aggregated latents and the coefficients `rho`, laid out
    /// as in [`Tape::attention`].
    pub fn attention_aggregate(&self, side: Side, latents: &Var, active: &[bool]) -> (Var, Rc<Vec<f64>>) {
        let layout = self.side(side);
        let t = self.tape;
        let q = t.matmul(latents, &self.vars[layout.wq]);
        let k = t.matmul(latents, &self.vars[layout.wk]);
        let v = t.matmul(latents, &self.vars[layout.wv]);
        let scale = 1.0 / (self.params.config.width as f64).sqrt();
        let (mixed, rho) = t.attention(&q, &k, &v, active, self.params.config.groups, scale);
        (t.add(latents, &mixed), rho)
    }

    fn head(&self, side: Side, aggregated: &Var) -> Var {
        let layout = self.side(side);
        let h = self.tape.gelu(&self.linear(aggregated, layout.head[0]));
        self.linear(&h, layout.head[1])
    }

    /// One raw (unnormalized) parity symbol per row.
    pub fn encode_head(&self, aggregated: &Var) -> Var {
        self.head(Side::Encoder, aggregated)
    }

    /// Pattern logits per row; the extra linear layer follows the GeLU head.
    pub fn decode_logits(&self, aggregated: &Var) -> Var {
        let h = self.head(Side::Decoder, aggregated);
        let out = self.params.layout.decoder.out.expect("decoder has an output layer");
        self.linear(&h, out)
    }

    /// Belief columns (row-wise softmax of [`Network::decode_logits`]).
    pub fn decode_head(&self, aggregated: &Var) -> Var {
        self.tape.softmax(&self.decode_logits(aggregated))
    }
}

/// Belief matrix of one session from a `Q x 2^m` probability block.
pub fn belief_matrix(probs: &Mat) -> Result<BeliefMatrix> {
    let patterns = probs.ncols();
    BeliefMatrix::from_flat(probs.iter().copied().collect(), patterns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PowerMode {
    /// Current-batch statistics over the active symbols.
    Train,
    /// Stored per-round statistics.
    Infer,
}

/// Power normalization of the raw parity symbols of round `round`
/// (1-based). Inactive rows output 0.
///
/// In training mode the active symbols are standardized with their own
/// batch statistics, which are returned so the caller can update the
/// running averages; fewer than two active symbols fall back to the stored
/// statistics.
pub fn normalize_power(
    tape: &Tape,
    raw: &Var,
    active: &[bool],
    round: usize,
    mode: PowerMode,
    stats: &PowerStats,
) -> (Var, Option<BatchStats>) {
    let count = active.iter().filter(|&&a| a).count();
    if mode == PowerMode::Train && count >= 2 {
        let (out, batch) = tape.standardize(raw, active);
        return (out, Some(batch));
    }
    let mean = stats.mean[round - 1];
    let std = stats.std[round - 1];
    let shifted = tape.add_const(raw, &Mat::from_elem((raw.rows(), 1), -mean));
    let gain = Mat::from_shape_fn((raw.rows(), 1), |(r, _)| if active[r] { 1.0 / std } else { 0.0 });
    (tape.mul_const(&shifted, gain), None)
}

impl PowerStats {
    /// Exponential moving average update for round `round` (1-based).
    pub fn update(&mut self, round: usize, batch: BatchStats, momentum: f64) {
        let i = round - 1;
        self.mean[i] = (1.0 - momentum) * self.mean[i] + momentum * batch.mean;
        self.std[i] = (1.0 - momentum) * self.std[i] + momentum * batch.std;
    }
}

/// Bits mapped to `+-1` (0 -> -1), one row per group, sessions stacked.
pub fn antipodal_bits(blocks: &[BitGroupBlock]) -> Mat {
    let m = blocks[0].bits_per_group();
    let q = blocks[0].num_groups();
    let mut out = Mat::zeros((blocks.len() * q, m));
    for (s, block) in blocks.iter().enumerate() {
        for (g, bits) in block.groups().enumerate() {
            for (c, &b) in bits.iter().enumerate() {
                out[[s * q + g, c]] = if b == 1 { 1.0 } else { -1.0 };
            }
        }
    }
    out
}

/// Encoder knowledge: `[bits | sent x^(1..tau-1) | feedback y~^(1..tau-1)]`,
/// each history zero padded to `tau_max - 1` slots. Slots must already be
/// masked (frozen groups carry 0 in rounds they did not append).
pub fn encoder_knowledge(tape: &Tape, bits: &Var, sent: &[Var], feedback: &[Var], tau_max: usize) -> Var {
    let rows = bits.rows();
    let zero = tape.constant(Mat::zeros((rows, 1)));
    let mut parts = Vec::with_capacity(1 + 2 * (tau_max - 1));
    parts.push(bits.clone());
    for history in [sent, feedback] {
        for k in 0..tau_max - 1 {
            parts.push(history.get(k).cloned().unwrap_or_else(|| zero.clone()));
        }
    }
    tape.concat_cols(&parts)
}

/// Decoder knowledge: `[received y^(1..tau) | previous beliefs]`, received
/// history zero padded to `tau_max` slots.
pub fn decoder_knowledge(tape: &Tape, received: &[Var], prev_beliefs: &Var, tau_max: usize) -> Var {
    let rows = prev_beliefs.rows();
    let zero = tape.constant(Mat::zeros((rows, 1)));
    let mut parts = Vec::with_capacity(tau_max + 1);
    for k in 0..tau_max {
        parts.push(received.get(k).cloned().unwrap_or_else(|| zero.clone()));
    }
    parts.push(prev_beliefs.clone());
    tape.concat_cols(&parts)
}

/// Encoder knowledge of a single session at round `tau` from plain
/// histories.
///
/// `sent[k]` and `feedback[k]` hold the per-group values of round `k + 1`;
/// `masks[k]` is the decode mask after round `k + 1`. Variant R appends a
/// round's pair only for groups still undecoded after that round; variant T
/// appends for every group.
pub fn build_encoder_knowledge(
    block: &BitGroupBlock,
    sent: &[Vec<f64>],
    feedback: &[Vec<f64>],
    tau: usize,
    masks: &[DecodeMask],
    variant: Variant,
    tau_max: usize,
) -> Result<Mat> {
    if tau == 0 || tau > tau_max {
        return Err(Error::internal(format!("round {tau} outside 1..={tau_max}")));
    }
    let q = block.num_groups();
    if sent.len() != tau - 1 || feedback.len() != tau - 1 {
        return Err(Error::internal(format!(
            "round {tau} needs {} history slots, got {} sent and {} feedback",
            tau - 1,
            sent.len(),
            feedback.len()
        )));
    }
    if sent.iter().chain(feedback).any(|h| h.len() != q) {
        return Err(Error::internal("history slot length differs from Q"));
    }
    if variant == Variant::R && masks.len() < tau - 1 {
        return Err(Error::internal("variant R needs the mask after every past round"));
    }
    let tape = Tape::inference();
    let keep = |k: usize, g: usize| variant == Variant::T || masks[k].is_active(g);
    let slot = |hist: &[Vec<f64>], k: usize| {
        tape.constant(Mat::from_shape_fn((q, 1), |(g, _)| if keep(k, g) { hist[k][g] } else { 0.0 }))
    };
    let sent_slots: Vec<Var> = (0..tau - 1).map(|k| slot(sent, k)).collect();
    let fb_slots: Vec<Var> = (0..tau - 1).map(|k| slot(feedback, k)).collect();
    let bits = tape.constant(antipodal_bits(std::slice::from_ref(block)));
    Ok(encoder_knowledge(&tape, &bits, &sent_slots, &fb_slots, tau_max).value().clone())
}

/// Attention coefficients of one session as a `Q x Q` matrix indexed
/// `[receiver][source]`.
pub fn coefficient_matrix(rho: &[f64], groups: usize, session: usize) -> Mat {
    let start = session * groups * groups;
    Mat::from_shape_vec((groups, groups), rho[start..start + groups * groups].to_vec()).expect("square block")
}

/// Sum over rows of a matrix, as a vector (used in tests and diagnostics).
pub fn column_sums(m: &Mat) -> Vec<f64> {
    m.sum_axis(Axis(0)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::partition_bits;

    fn tiny() -> CodecParameters {
        CodecParameters::init(CodecConfig::tiny(Variant::R), 3).unwrap()
    }

    #[test]
    fn round_one_knowledge_has_only_bits() {
        let block = partition_bits(&[1, 0, 0, 1], 2).unwrap();
        let k = build_encoder_knowledge(&block, &[], &[], 1, &[], Variant::R, 3).unwrap();
        assert_eq!(k.dim(), (2, 2 + 4));
        assert_eq!(k.row(0).to_vec(), vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(k.row(1).to_vec(), vec![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_row_is_unchanged_after_freezing() {
        let block = partition_bits(&[1, 0, 0, 1], 2).unwrap();
        let sent = vec![vec![0.5, -0.5], vec![0.7, 0.2]];
        let fb = vec![vec![0.4, -0.1], vec![0.9, 0.3]];
        // group 0 decoded after round 1
        let masks = vec![DecodeMask::from_flags(vec![false, true], 1), DecodeMask::from_flags(vec![false, true], 2)];
        let k2 = build_encoder_knowledge(&block, &sent[..1], &fb[..1], 2, &masks, Variant::R, 3).unwrap();
        let k3 = build_encoder_knowledge(&block, &sent, &fb, 3, &masks, Variant::R, 3).unwrap();
        let k1 = build_encoder_knowledge(&block, &[], &[], 1, &masks, Variant::R, 3).unwrap();
        assert_eq!(k2.row(0), k1.row(0));
        assert_eq!(k3.row(0), k1.row(0));
        assert_eq!(k3.row(1).to_vec(), vec![-1.0, 1.0, -0.5, 0.2, -0.1, 0.3]);
    }

    #[test]
    fn variant_t_fills_every_slot() {
        let block = partition_bits(&[1, 1, 0, 0], 2).unwrap();
        let sent = vec![vec![0.5, -0.5], vec![0.7, 0.2]];
        let fb = vec![vec![0.4, -0.1], vec![0.9, 0.3]];
        let masks = vec![DecodeMask::from_flags(vec![false, false], 1); 2];
        let k = build_encoder_knowledge(&block, &sent, &fb, 3, &masks, Variant::T, 4).unwrap();
        // count filled (sent, feedback) pairs per row, by construction
        for row in k.rows() {
            let m = 2;
            let slots = 3;
            let filled = (0..slots).filter(|&s| row[m + s] != 0.0 && row[m + slots + s] != 0.0).count();
            assert_eq!(filled, 2);
        }
    }

    #[test]
    fn knowledge_rejects_inconsistent_history() {
        let block = partition_bits(&[1, 1, 0, 0], 2).unwrap();
        assert!(build_encoder_knowledge(&block, &[vec![0.0; 2]], &[], 2, &[], Variant::T, 3).is_err());
    }

    #[test]
    fn stack_switch_is_observable() {
        let p = tiny();
        let tape = Tape::inference();
        let net = Network::new(&tape, &p);
        let k = tape.constant(Mat::from_shape_fn((2, p.config.encoder_input_width()), |(r, c)| (r + c) as f64 * 0.1));
        let vd = p.config.tau_vd;
        let a = net.feature_extract(Side::Encoder, &k, vd);
        let b = net.feature_extract(Side::Encoder, &k, vd + 1);
        assert_eq!(a.value().dim(), (2, p.config.width));
        assert_ne!(a.value(), b.value());
    }

    #[test]
    fn zero_weights_give_positional_embedding() {
        let mut p = CodecParameters::zeros(CodecConfig::tiny(Variant::R)).unwrap();
        let pos = Mat::from_shape_fn((2, 8), |(r, c)| (r * 8 + c) as f64);
        *p.get_mut("encoder.position").unwrap() = pos.clone();
        let tape = Tape::inference();
        let net = Network::new(&tape, &p);
        let k = tape.constant(Mat::zeros((4, p.config.encoder_input_width())));
        let h = net.feature_extract(Side::Encoder, &k, 1);
        for r in 0..4 {
            assert_eq!(h.value().row(r), pos.row(r % 2));
        }
    }

    #[test]
    fn attention_singleton_and_identical_rows() {
        let mut cfg = CodecConfig::tiny(Variant::R);
        cfg.groups = 1;
        let p = CodecParameters::init(cfg, 1).unwrap();
        let tape = Tape::inference();
        let net = Network::new(&tape, &p);
        let h = tape.constant(Mat::from_elem((1, 8), 0.3));
        let (_, rho) = net.attention_aggregate(Side::Encoder, &h, &[true]);
        assert_eq!(rho[0], 1.0);

        let mut cfg = CodecConfig::tiny(Variant::R);
        cfg.groups = 4;
        let p = CodecParameters::init(cfg, 1).unwrap();
        let net = Network::new(&tape, &p);
        let h = tape.constant(Mat::from_elem((4, 8), 0.7));
        let (_, rho) = net.attention_aggregate(Side::Decoder, &h, &[true; 4]);
        for w in rho.iter() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        // a frozen receiver still leaves every source visible to the others
        let (_, rho) = net.attention_aggregate(Side::Decoder, &h, &[true, false, true, true]);
        let m = coefficient_matrix(&rho, 4, 0);
        assert!(m.row(1).iter().all(|&w| w == 0.0));
        for j in [0, 2, 3] {
            assert!((m.row(j).sum() - 1.0).abs() < 1e-6);
            assert!((m[[j, 1]] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_groups_permutes_symbols_without_positions() {
        let mut cfg = CodecConfig::tiny(Variant::R);
        cfg.groups = 4;
        let mut p = CodecParameters::init(cfg, 9).unwrap();
        for side in ["encoder", "decoder"] {
            p.get_mut(&format!("{side}.position")).unwrap().fill(0.0);
        }
        let perm = [2, 0, 3, 1];
        let k = Mat::from_shape_fn((4, p.config.encoder_input_width()), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let kp = Mat::from_shape_fn(k.dim(), |(r, c)| k[[perm[r], c]]);
        let tape = Tape::inference();
        let net = Network::new(&tape, &p);
        let symbols = |k: Mat| {
            let h = net.feature_extract(Side::Encoder, &tape.constant(k), 1);
            let (agg, _) = net.attention_aggregate(Side::Encoder, &h, &[true; 4]);
            net.encode_head(&agg).value().clone()
        };
        let x = symbols(k);
        let xp = symbols(kp);
        for r in 0..4 {
            assert!((xp[[r, 0]] - x[[perm[r], 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_with_zero_weights() {
        let p = CodecParameters::zeros(CodecConfig::tiny(Variant::R)).unwrap();
        let tape = Tape::inference();
        let net = Network::new(&tape, &p);
        let agg = tape.constant(Mat::from_elem((2, 8), 1.3));
        let x = net.encode_head(&agg);
        assert_eq!(x.value().dim(), (2, 1));
        assert!(x.value().iter().all(|&v| v == 0.0));
        let probs = net.decode_head(&agg);
        assert!(probs.value().iter().all(|&v| v == 0.25));
        assert!(belief_matrix(probs.value()).is_ok());
    }

    #[test]
    fn decode_head_is_shift_invariant_and_normalized() {
        let p = tiny();
        let tape = Tape::inference();
        let logits = tape.constant(Mat::from_shape_fn((3, 4), |(r, c)| (r as f64 - c as f64) * 1.7));
        let shifted = tape.add_const(&logits, &Mat::from_elem((3, 4), 12.5));
        let a = tape.softmax(&logits);
        let b = tape.softmax(&shifted);
        for (x, y) in a.value().iter().zip(b.value().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        for row in a.value().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let _ = p;
    }

    #[test]
    fn encode_head_is_deterministic() {
        let p = tiny();
        let run = || {
            let tape = Tape::inference();
            let net = Network::new(&tape, &p);
            let agg = tape.constant(Mat::from_shape_fn((2, 8), |(r, c)| ((r * 8 + c) as f64).sin()));
            net.encode_head(&agg).value().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn power_normalization_modes() {
        let tape = Tape::inference();
        let raw = tape.constant(Mat::from_shape_vec((6, 1), vec![1.0, 2.0, 4.0, -3.0, 0.5, 9.0]).unwrap());
        let stats = PowerStats::identity(3);
        let (out, _) = normalize_power(&tape, &raw, &[true; 6], 1, PowerMode::Infer, &stats);
        assert_eq!(out.value(), raw.value());

        let active = [true, true, false, true, false, true];
        let (out, batch) = normalize_power(&tape, &raw, &active, 2, PowerMode::Train, &stats);
        let batch = batch.unwrap();
        // oracle: statistics over the active subset only
        let sub = [1.0, 2.0, -3.0, 9.0];
        let mean = sub.iter().sum::<f64>() / 4.0;
        let std = (sub.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        assert!((batch.mean - mean).abs() < 1e-12 && (batch.std - std).abs() < 1e-12);
        let vals: Vec<f64> = out.value().iter().zip(&active).filter(|(_, &a)| a).map(|(v, _)| *v).collect();
        let m2 = vals.iter().sum::<f64>() / 4.0;
        let v2 = vals.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / 4.0;
        assert!(m2.abs() < 1e-6 && (v2 - 1.0).abs() < 1e-6);
        assert_eq!(out.value()[[2, 0]], 0.0);

        let flat = tape.constant(Mat::from_elem((4, 1), 2.0));
        let (out, batch) = normalize_power(&tape, &flat, &[true; 4], 1, PowerMode::Train, &stats);
        assert_eq!(batch.unwrap().std, crate::tape::STD_FLOOR);
        assert!(out.value().iter().all(|v| v.is_finite()));
    }
}
