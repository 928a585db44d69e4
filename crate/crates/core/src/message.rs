//! Bit groups, belief matrices and decode masks.
//!
//! A K-bit message is split into `Q` groups of `m` bits. Each group is also
//! viewed as a pattern index in `[0, 2^m)` using big-endian bit order (the
//! first bit of the group is the most significant). The same convention is
//! used by the encoder input, the decoder output and the loss.

use crate::error::{Error, Result};

/// Tolerance on the column sums of a [`BeliefMatrix`].
pub const BELIEF_SUM_TOL: f64 = 1e-6;

/// Converts `m` bits (big-endian) to a pattern index.
pub fn group_to_index(group: &[u8]) -> usize {
    group
        .iter()
        .fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1))
}

/// Converts a pattern index back to `m` bits (big-endian).
pub fn index_to_group(index: usize, m: usize) -> Vec<u8> {
    (0..m).map(|i| ((index >> (m - 1 - i)) & 1) as u8).collect()
}

/// A message split into `Q` equal-size groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitGroupBlock {
    bits: Vec<u8>,
    groups: usize,
    bits_per_group: usize,
    indices: Vec<usize>,
}

/// Splits `bits` into `groups` equal-size groups.
pub fn partition_bits(bits: &[u8], groups: usize) -> Result<BitGroupBlock> {
    BitGroupBlock::new(bits.to_vec(), groups)
}

impl BitGroupBlock {
    pub fn new(bits: Vec<u8>, groups: usize) -> Result<Self> {
        if groups == 0 || bits.is_empty() {
            return Err(Error::config("a block needs at least one bit and one group"));
        }
        if bits.len() % groups != 0 {
            return Err(Error::config(format!(
                "K = {} bits cannot be split into Q = {} equal groups",
                bits.len(),
                groups
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::config(format!("bit {pos} is not 0 or 1")));
        }
        let bits_per_group = bits.len() / groups;
        if bits_per_group > 16 {
            return Err(Error::config(format!(
                "m = {bits_per_group} bits per group gives an unmanageable pattern space"
            )));
        }
        let indices = bits.chunks(bits_per_group).map(group_to_index).collect();
        Ok(Self {
            bits,
            groups,
            bits_per_group,
            indices,
        })
    }

    /// Builds a block from per-group pattern indices.
    pub fn from_indices(indices: &[usize], bits_per_group: usize) -> Result<Self> {
        let patterns = 1usize << bits_per_group;
        if let Some(&bad) = indices.iter().find(|&&j| j >= patterns) {
            return Err(Error::config(format!(
                "pattern index {bad} out of range for m = {bits_per_group}"
            )));
        }
        let bits = indices
            .iter()
            .flat_map(|&j| index_to_group(j, bits_per_group))
            .collect();
        Self::new(bits, indices.len())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn num_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups
    }

    pub fn bits_per_group(&self) -> usize {
        self.bits_per_group
    }

    pub fn num_patterns(&self) -> usize {
        1 << self.bits_per_group
    }

    pub fn group(&self, q: usize) -> &[u8] {
        let m = self.bits_per_group;
        &self.bits[q * m..(q + 1) * m]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks(self.bits_per_group)
    }

    pub fn pattern_indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-group probability distributions over the `2^m` patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefMatrix {
    patterns: usize,
    probs: Vec<f64>,
}

impl BeliefMatrix {
    /// Validates and wraps `columns`; each must be a probability vector.
    ///
    /// Columns that are negative or do not sum to one within
    /// [`BELIEF_SUM_TOL`] are rejected, never renormalized.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let patterns = columns.first().map(Vec::len).unwrap_or(0);
        if patterns < 2 || !patterns.is_power_of_two() {
            return Err(Error::config(format!(
                "belief columns need a power-of-two length >= 2, got {patterns}"
            )));
        }
        let mut probs = Vec::with_capacity(columns.len() * patterns);
        for (q, col) in columns.iter().enumerate() {
            if col.len() != patterns {
                return Err(Error::config(format!(
                    "belief column {q} has length {} instead of {patterns}",
                    col.len()
                )));
            }
            probs.extend_from_slice(col);
        }
        Self::from_flat(probs, patterns)
    }

    /// Wraps a row-major `Q x 2^m` buffer (column `q` of the matrix is row `q`).
    pub fn from_flat(probs: Vec<f64>, patterns: usize) -> Result<Self> {
        if patterns == 0 || probs.len() % patterns != 0 || probs.is_empty() {
            return Err(Error::config("belief buffer is not a whole number of columns"));
        }
        for (q, col) in probs.chunks(patterns).enumerate() {
            if col.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::config(format!("belief column {q} has a negative or non-finite entry")));
            }
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > BELIEF_SUM_TOL {
                return Err(Error::config(format!(
                    "belief column {q} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self { patterns, probs })
    }

    /// Uniform prior over all patterns.
    pub fn uniform(groups: usize, patterns: usize) -> Self {
        Self {
            patterns,
            probs: vec![1.0 / patterns as f64; groups * patterns],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.probs.len() / self.patterns
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns
    }

    pub fn column(&self, q: usize) -> &[f64] {
        &self.probs[q * self.patterns..(q + 1) * self.patterns]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.patterns)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }

    /// `max_j p_q[j]` for every column.
    pub fn max_beliefs(&self) -> Vec<f64> {
        self.columns().map(max_entry).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

pub fn max_entry(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-column argmax pattern indices.
pub fn hard_decision_indices(beliefs: &BeliefMatrix) -> Vec<usize> {
    beliefs.columns().map(argmax).collect()
}

/// Per-column argmax, expanded to bits and concatenated in group order.
pub fn hard_decision(beliefs: &BeliefMatrix) -> Vec<u8> {
    let m = beliefs.num_patterns().trailing_zeros() as usize;
    beliefs
        .columns()
        .flat_map(|col| index_to_group(argmax(col), m))
        .collect()
}

/// Which groups are still undecoded, and in which round.
///
/// `flags[q] == true` means group `q` is still undecoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeMask {
    flags: Vec<bool>,
    round: usize,
}

impl DecodeMask {
    /// All groups undecoded, before the first round.
    pub fn new(groups: usize) -> Self {
        Self {
            flags: vec![true; groups],
            round: 0,
        }
    }

    pub fn from_flags(flags: Vec<bool>, round: usize) -> Self {
        Self { flags, round }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_active(&self, q: usize) -> bool {
        self.flags[q]
    }

    pub fn active_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn all_decoded(&self) -> bool {
        self.flags.iter().all(|&f| !f)
    }
}

/// Checks that `gamma` is a usable decoding threshold for `m`-bit groups.
pub fn validate_threshold(gamma: f64, bits_per_group: usize) -> Result<()> {
    let floor = 1.0 / (1u64 << bits_per_group) as f64;
    if !(gamma > floor && gamma < 1.0) {
        return Err(Error::config(format!(
            "threshold {gamma} must lie in ({floor}, 1) for m = {bits_per_group}"
        )));
    }
    Ok(())
}

/// Freezes every group whose largest belief reached `gamma`.
///
/// Already-decoded groups stay decoded whatever the new beliefs say.
pub fn update_mask(prev: &DecodeMask, beliefs: &BeliefMatrix, gamma: f64) -> Result<DecodeMask> {
    let m = beliefs.num_patterns().trailing_zeros() as usize;
    validate_threshold(gamma, m)?;
    if prev.flags.len() != beliefs.num_groups() {
        return Err(Error::internal("mask and belief matrix disagree on Q"));
    }
    let flags = prev
        .flags
        .iter()
        .zip(beliefs.columns())
        .map(|(&active, col)| active && max_entry(col) < gamma)
        .collect();
    Ok(DecodeMask {
        flags,
        round: prev.round + 1,
    })
}
