//! CSV export of evaluation results.
//!
//! Both tables start with a comment line `# schema_version=1 table=<name>`
//! (the dynamics table adds `trials=<n>`), followed by a fixed header row.
//! Floats are written with 9 significant digits; a noiseless feedback link
//! is written as `eta_b_db = inf`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DynamicsResult, OperatingPointResult};
use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;

const RESULTS_HEADER: [&str; 11] = [
    "variant",
    "eta_f_db",
    "eta_b_db",
    "threshold",
    "n_sessions",
    "bler",
    "bler_lo",
    "bler_hi",
    "mean_rate",
    "mean_tau",
    "mean_power",
];
const DYNAMICS_HEADER: [&str; 3] = ["round", "pattern_index", "sample_value"];

/// One row of the operating-point table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub eta_f_db: f64,
    pub eta_b_db: f64,
    pub threshold: f64,
    pub n_sessions: usize,
    pub bler: f64,
    pub bler_lo: f64,
    pub bler_hi: f64,
    pub mean_rate: f64,
    pub mean_tau: f64,
    pub mean_power: f64,
}

impl From<&OperatingPointResult> for ResultRow {
    fn from(r: &OperatingPointResult) -> Self {
        ResultRow {
            variant: r.variant.to_string(),
            eta_f_db: r.eta_f_db,
            eta_b_db: r.eta_b_db.unwrap_or(f64::INFINITY),
            threshold: r.threshold,
            n_sessions: r.n_sessions,
            bler: r.bler,
            bler_lo: r.bler_lo,
            bler_hi: r.bler_hi,
            mean_rate: r.mean_rate,
            mean_tau: r.mean_tau,
            mean_power: r.mean_power,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub round: usize,
    pub pattern_index: usize,
    pub sample_value: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_results_csv<W: Write>(results: &[OperatingPointResult], mut out: W) -> Result<()> {
    writeln!(out, "# schema_version={CSV_SCHEMA_VERSION} table=operating_points").map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        let row = ResultRow::from(r);
        w.write_record([
            row.variant,
            fmt(row.eta_f_db),
            fmt(row.eta_b_db),
            fmt(row.threshold),
            row.n_sessions.to_string(),
            fmt(row.bler),
            fmt(row.bler_lo),
            fmt(row.bler_hi),
            fmt(row.mean_rate),
            fmt(row.mean_tau),
            fmt(row.mean_power),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn emit_results(results: &[OperatingPointResult], path: &Path) -> Result<()> {
    write_results_csv(results, std::io::BufWriter::new(create(path)?))
}

pub fn write_dynamics_csv<W: Write>(result: &DynamicsResult, mut out: W) -> Result<()> {
    writeln!(
        out,
        "# schema_version={CSV_SCHEMA_VERSION} table=dynamics trials={}",
        result.trials
    )
    .map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DYNAMICS_HEADER)?;
    for (ri, round) in result.rounds.iter().enumerate() {
        for (j, samples) in result.samples[ri].iter().enumerate() {
            for &v in samples {
                w.write_record([round.to_string(), j.to_string(), fmt(v)])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn emit_dynamics(result: &DynamicsResult, path: &Path) -> Result<()> {
    write_dynamics_csv(result, std::io::BufWriter::new(create(path)?))
}

/// Splits off and checks the schema comment, returning its `key=value` pairs.
fn read_preamble<R: Read>(input: R, what: &'static str, table: &str) -> Result<(Vec<(String, String)>, String)> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::parse(what, e.to_string()))?;
    let body = first
        .trim_end()
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(what, "missing schema comment line"))?;
    let pairs: Vec<(String, String)> = body
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(what, format!("malformed schema field {kv:?}")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    match get("schema_version") {
        Some(v) if v == CSV_SCHEMA_VERSION.to_string() => {}
        Some(v) => return Err(Error::parse(what, format!("unsupported schema_version {v}"))),
        None => return Err(Error::parse(what, "schema comment lacks schema_version")),
    }
    if get("table") != Some(table) {
        return Err(Error::parse(what, format!("expected table={table}")));
    }
    let mut rest = String::new();
    reader
        .read_to_string(&mut rest)
        .map_err(|e| Error::parse(what, e.to_string()))?;
    Ok((pairs, rest))
}

fn check_header(got: &csv::StringRecord, want: &[&str], what: &'static str) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::parse(what, format!("header {:?} != {:?}", got, want)));
    }
    Ok(())
}

fn finite_or_inf(v: f64, col: &str, what: &'static str) -> Result<f64> {
    if v.is_nan() {
        return Err(Error::parse(what, format!("{col} is NaN")));
    }
    Ok(v)
}

pub fn parse_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    const WHAT: &str = "results csv";
    let (_, body) = read_preamble(input, WHAT, "operating_points")?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    check_header(rdr.headers()?, &RESULTS_HEADER, WHAT)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ResultRow>() {
        let row = rec.map_err(|e| Error::parse(WHAT, e.to_string()))?;
        for (col, v) in [
            ("eta_f_db", row.eta_f_db),
            ("eta_b_db", row.eta_b_db),
            ("threshold", row.threshold),
            ("bler", row.bler),
            ("bler_lo", row.bler_lo),
            ("bler_hi", row.bler_hi),
            ("mean_rate", row.mean_rate),
            ("mean_tau", row.mean_tau),
            ("mean_power", row.mean_power),
        ] {
            finite_or_inf(v, col, WHAT)?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Returns the trial count from the schema comment and the rows.
pub fn parse_dynamics_csv<R: Read>(input: R) -> Result<(usize, Vec<DynamicsRow>)> {
    const WHAT: &str = "dynamics csv";
    let (pairs, body) = read_preamble(input, WHAT, "dynamics")?;
    let trials = pairs
        .iter()
        .find(|(k, _)| k == "trials")
        .ok_or_else(|| Error::parse(WHAT, "schema comment lacks trials"))?
        .1
        .parse::<usize>()
        .map_err(|e| Error::parse(WHAT, format!("trials: {e}")))?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    check_header(rdr.headers()?, &DYNAMICS_HEADER, WHAT)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<DynamicsRow>() {
        let row = rec.map_err(|e| Error::parse(WHAT, e.to_string()))?;
        if !row.sample_value.is_finite() {
            return Err(Error::parse(WHAT, "sample_value must be finite"));
        }
        rows.push(row);
    }
    Ok((trials, rows))
}
