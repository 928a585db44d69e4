use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which protocol produced a transcript.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionKind {
    R,
    T,
    Hybrid,
}

impl std::fmt::Display for SessionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SessionKind::R => "R",
            SessionKind::T => "T",
            SessionKind::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every group crossed the receiver threshold.
    Threshold,
    /// The transmitter confirmed the receiver's estimate.
    Transmitter,
    /// `tau_max` was reached with groups still undecoded.
    TauMaxForced,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Threshold => "threshold",
            Termination::Transmitter => "transmitter",
            Termination::TauMaxForced => "tau_max_forced",
        })
    }
}

/// Everything that happened in one round of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Groups transmitting in this round.
    pub active: Vec<bool>,
    /// Normalized parity symbols (0 for silent groups).
    pub sent: Vec<f64>,
    /// Equalized received symbols (0 for silent groups).
    pub received: Vec<f64>,
    /// Noisy scaled symbol feedback, one slot per group.
    pub feedback_symbols: Vec<f64>,
    /// Noisy scaled belief feedback, row-major `Q x 2^m`, when the
    /// transmitter checks termination.
    pub feedback_beliefs: Option<Vec<f64>>,
    /// Decoder beliefs after the round, row-major `Q x 2^m`.
    pub beliefs: Vec<f64>,
    /// Undecoded flags after the round's termination checks.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub kind: SessionKind,
    pub seed: u64,
    pub bits_per_group: usize,
    pub bits: Vec<u8>,
    pub truth: Vec<usize>,
    /// Per-round records; empty when recording was disabled.
    pub rounds: Vec<RoundRecord>,
    /// `n^(tau)`, symbols sent in each round.
    pub symbols_per_round: Vec<usize>,
    /// `tau*_q`.
    pub group_stop: Vec<usize>,
    /// `tau*`.
    pub stop: usize,
    /// Final pattern-index estimate.
    pub estimate: Vec<usize>,
    pub termination: Termination,
    /// Sum of squared transmitted symbols and their count.
    pub power_sum: f64,
    pub power_count: usize,
}

impl SessionTranscript {
    pub fn num_groups(&self) -> usize {
        self.truth.len()
    }

    pub fn num_bits(&self) -> usize {
        self.bits.len()
    }

    /// `N_total`.
    pub fn channel_uses(&self) -> usize {
        self.symbols_per_round.iter().sum()
    }

    pub fn is_error(&self) -> bool {
        self.estimate != self.truth
    }

    pub fn estimate_bits(&self) -> Vec<u8> {
        self.estimate
            .iter()
            .flat_map(|&j| crate::message::index_to_group(j, self.bits_per_group))
            .collect()
    }
}

/// `K / N_total`.
pub fn code_rate(t: &SessionTranscript) -> f64 {
    t.num_bits() as f64 / t.channel_uses() as f64
}

/// `K / sum(n) - K / (tau* Q)`: the rate gained by receiver-side freezing.
pub fn differential_rate(t: &SessionTranscript) -> f64 {
    let k = t.num_bits() as f64;
    k / t.channel_uses() as f64 - k / (t.stop * t.num_groups()) as f64
}

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// One line of the transcript log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub schema_version: u32,
    pub session: u64,
    pub variant: SessionKind,
    pub seed: u64,
    pub tau_star: usize,
    pub channel_uses: usize,
    pub rate: f64,
    pub error: bool,
    pub termination: Termination,
}

impl TranscriptRecord {
    pub fn from_transcript(session: u64, t: &SessionTranscript) -> Self {
        Self {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            session,
            variant: t.kind,
            seed: t.seed,
            tau_star: t.stop,
            channel_uses: t.channel_uses(),
            rate: code_rate(t),
            error: t.is_error(),
            termination: t.termination,
        }
    }
}

/// Line-delimited JSON, one record per session.
pub fn write_transcript_log<'a>(records: impl IntoIterator<Item = &'a TranscriptRecord>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_transcript_log(text: &str) -> Result<Vec<TranscriptRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: TranscriptRecord =
                serde_json::from_str(l).map_err(|e| Error::parse("transcript log", format!("line {}: {e}", i + 1)))?;
            if r.schema_version != TRANSCRIPT_SCHEMA_VERSION {
                return Err(Error::parse(
                    "transcript log",
                    format!("line {}: unsupported schema version {}", i + 1, r.schema_version),
                ));
            }
            Ok(r)
        })
        .collect()
}
