//! Frequency-selective fading on the forward link with perfect-CSI
//! equalization at the receiver.
//!
//! Real parity symbols are packed in pairs onto subcarriers: `(x[2k],
//! x[2k+1])` become the real and imaginary parts of subcarrier `k`, with a
//! zero pad when the symbol count is odd.
//!
//! Trajectory file format (plain text):
//!
//! ```text
//! #slots=<n> subcarriers=<k>
//! # optional free-text provenance lines
//! re,im re,im ...      <- one line per slot, k pairs
//! ```

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;

use super::noise::{NoiseSource, Stream};
use crate::error::{Error, Result};

/// Gains smaller than this in magnitude are rejected at load time.
pub const MIN_GAIN_MAGNITUDE: f64 = 1e-6;

/// A time-indexed sequence of per-subcarrier complex gains.
#[derive(Clone, Debug, PartialEq)]
pub struct FadingTrajectory {
    gains: Vec<Complex64>,
    slots: usize,
    subcarriers: usize,
    /// Free-text provenance (carrier, speed, delay spread, generator).
    pub metadata: String,
}

impl FadingTrajectory {
    pub fn new(gains: Vec<Complex64>, slots: usize, subcarriers: usize, metadata: String) -> Result<Self> {
        if slots == 0 || subcarriers == 0 || gains.len() != slots * subcarriers {
            return Err(Error::config(format!(
                "trajectory of {} gains does not match {slots} slots x {subcarriers} subcarriers",
                gains.len()
            )));
        }
        if let Some(i) = gains.iter().position(|h| !(h.norm() >= MIN_GAIN_MAGNITUDE)) {
            return Err(Error::config(format!(
                "slot {} subcarrier {} has gain magnitude below {MIN_GAIN_MAGNITUDE}",
                i / subcarriers,
                i % subcarriers
            )));
        }
        Ok(Self {
            gains,
            slots,
            subcarriers,
            metadata,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn subcarrier_count(&self) -> usize {
        self.subcarriers
    }

    pub fn slot(&self, t: usize) -> &[Complex64] {
        &self.gains[t * self.subcarriers..(t + 1) * self.subcarriers]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_fading_trajectory(&text)
    }

    /// Serializes in the trajectory file format; `parse_fading_trajectory`
    /// reads it back bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("#slots={} subcarriers={}\n", self.slots, self.subcarriers);
        for line in self.metadata.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        for t in 0..self.slots {
            let row: Vec<String> = self
                .slot(t)
                .iter()
                .map(|h| format!("{:?},{:?}", h.re, h.im))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let body = line
        .strip_prefix("#slots=")
        .ok_or_else(|| Error::parse("trajectory header", "expected '#slots=<n> subcarriers=<k>'"))?;
    let (slots, rest) = body
        .split_once(' ')
        .ok_or_else(|| Error::parse("trajectory header", "missing subcarriers field"))?;
    let sub = rest
        .trim_end()
        .strip_prefix("subcarriers=")
        .ok_or_else(|| Error::parse("trajectory header", "missing subcarriers field"))?;
    let slots = slots
        .parse::<usize>()
        .map_err(|e| Error::parse("trajectory header", format!("slots: {e}")))?;
    let sub = sub
        .parse::<usize>()
        .map_err(|e| Error::parse("trajectory header", format!("subcarriers: {e}")))?;
    if slots == 0 || sub == 0 {
        return Err(Error::parse("trajectory header", "slots and subcarriers must be positive"));
    }
    Ok((slots, sub))
}

/// Parses the trajectory text format. Errors name the offending line.
pub fn parse_fading_trajectory(text: &str) -> Result<FadingTrajectory> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse("trajectory", "empty file"))?;
    let (slots, subcarriers) = parse_header(header)?;
    // cap the preallocation; the count is checked against the data below
    let mut gains = Vec::with_capacity(slots.saturating_mul(subcarriers).min(1 << 20));
    let mut metadata = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        if let Some(comment) = line.strip_prefix('#') {
            if rows > 0 {
                return Err(Error::parse("trajectory", format!("line {lineno}: comment after data")));
            }
            metadata.push(comment.trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if rows == slots {
            return Err(Error::parse("trajectory", format!("line {lineno}: more than {slots} slots")));
        }
        let mut count = 0usize;
        for (k, field) in line.split_whitespace().enumerate() {
            let (re, im) = field.split_once(',').ok_or_else(|| {
                Error::parse("trajectory", format!("line {lineno}, subcarrier {k}: expected 're,im'"))
            })?;
            let parse = |s: &str| {
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::parse("trajectory", format!("line {lineno}, subcarrier {k}: bad number '{s}'"))
                })
            };
            let h = Complex64::new(parse(re)?, parse(im)?);
            if h.norm() < MIN_GAIN_MAGNITUDE {
                return Err(Error::parse(
                    "trajectory",
                    format!("line {lineno}, subcarrier {k}: gain magnitude {} below {MIN_GAIN_MAGNITUDE}", h.norm()),
                ));
            }
            gains.push(h);
            count += 1;
        }
        if count != subcarriers {
            return Err(Error::parse(
                "trajectory",
                format!("line {lineno}: {count} subcarriers, header says {subcarriers}"),
            ));
        }
        rows += 1;
    }
    if rows != slots {
        return Err(Error::parse("trajectory", format!("{rows} slots present, header says {slots}")));
    }
    FadingTrajectory::new(gains, slots, subcarriers, metadata.join("\n"))
}

/// `window[t][k]`: gain of subcarrier `k` in round `t + 1`.
pub type FadingWindow = Vec<Vec<Complex64>>;

/// `rounds` consecutive slots starting at a uniform random offset,
/// wrapping around the end of the trajectory.
pub fn sample_fading_window(traj: &FadingTrajectory, rounds: usize, noise: &mut NoiseSource) -> FadingWindow {
    let start = noise.uniform_index(traj.slot_count());
    (0..rounds)
        .map(|t| traj.slot((start + t) % traj.slot_count()).to_vec())
        .collect()
}

/// Packs real symbols in pairs onto subcarriers.
pub fn pack_symbols(x: &[f64]) -> Vec<Complex64> {
    x.chunks(2)
        .map(|c| Complex64::new(c[0], c.get(1).copied().unwrap_or(0.0)))
        .collect()
}

/// Inverse of [`pack_symbols`]; `count` drops the pad.
pub fn unpack_symbols(s: &[Complex64], count: usize) -> Vec<f64> {
    s.iter().flat_map(|c| [c.re, c.im]).take(count).collect()
}

/// Perfect-CSI zero-forcing: `y / h`, unpacked to `count` real symbols.
pub fn equalize_fading(y: &[Complex64], h: &[Complex64], count: usize) -> Vec<f64> {
    let eq: Vec<Complex64> = y.iter().zip(h).map(|(y, h)| y / h).collect();
    unpack_symbols(&eq, count)
}

/// Effective additive noise on `count` real symbols after equalization:
/// unpack of `n / h` with complex `n` of per-component variance `sigma2`.
///
/// Draws `2 * ceil(count / 2)` values from the forward stream.
pub(crate) fn equalized_noise(gains: &[Complex64], count: usize, sigma2: f64, noise: &mut NoiseSource) -> Vec<f64> {
    let sd = sigma2.max(0.0).sqrt();
    let carriers = count.div_ceil(2);
    let n: Vec<Complex64> = (0..carriers)
        .map(|k| {
            let re = noise.gaussian(Stream::Forward);
            let im = noise.gaussian(Stream::Forward);
            Complex64::new(sd * re, sd * im) / gains[k]
        })
        .collect();
    unpack_symbols(&n, count)
}

/// Sum-of-sinusoids (Jakes-style) Rayleigh trajectory.
///
/// An approximation for self-contained experiments, not a CDL model: each
/// of `paths` scatterers has a random arrival angle, phase and delay, giving
/// time correlation through the normalized Doppler `doppler` (cycles per
/// slot) and frequency selectivity through `delay_spread` (in units of the
/// subcarrier period). Average power is one.
pub fn jakes_trajectory(
    slots: usize,
    subcarriers: usize,
    doppler: f64,
    delay_spread: f64,
    paths: usize,
    seed: u64,
) -> Result<FadingTrajectory> {
    if paths == 0 {
        return Err(Error::config("a Jakes trajectory needs at least one path"));
    }
    let mut rng = NoiseSource::new(seed);
    let uni = |rng: &mut NoiseSource| rng.uniform_index(1 << 30) as f64 / (1u64 << 30) as f64;
    let scatterers: Vec<(f64, f64, f64)> = (0..paths)
        .map(|_| {
            let angle = 2.0 * PI * uni(&mut rng);
            let phase = 2.0 * PI * uni(&mut rng);
            let delay = -delay_spread * (1.0 - uni(&mut rng)).ln();
            (angle, phase, delay)
        })
        .collect();
    let norm = 1.0 / (paths as f64).sqrt();
    let mut gains = Vec::with_capacity(slots * subcarriers);
    for t in 0..slots {
        for k in 0..subcarriers {
            let mut h = Complex64::new(0.0, 0.0);
            for &(angle, phase, delay) in &scatterers {
                let arg = 2.0 * PI * doppler * angle.cos() * t as f64 + phase - 2.0 * PI * k as f64 * delay;
                h += Complex64::from_polar(norm, arg);
            }
            if h.norm() < MIN_GAIN_MAGNITUDE {
                h = Complex64::from_polar(MIN_GAIN_MAGNITUDE, h.arg());
            }
            gains.push(h);
        }
    }
    let meta = format!(
        "synthetic sum-of-sinusoids Rayleigh (approximation): doppler={doppler} delay_spread={delay_spread} paths={paths} seed={seed}"
    );
    FadingTrajectory::new(gains, slots, subcarriers, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_channel_returns_symbols() {
        let x = [0.3, -1.1, 0.8, 2.0, -0.5];
        let h = vec![Complex64::new(1.0, 0.0); 3];
        let y: Vec<Complex64> = pack_symbols(&x).iter().zip(&h).map(|(s, h)| s * h).collect();
        assert_eq!(equalize_fading(&y, &h, x.len()), x.to_vec());
    }

    #[test]
    fn pack_round_trip() {
        let x = [1.0, 2.0];
        let s = pack_symbols(&x);
        assert_eq!(s, vec![Complex64::new(1.0, 2.0)]);
        assert_eq!(unpack_symbols(&s, 2), x.to_vec());
        assert_eq!(pack_symbols(&[3.0]), vec![Complex64::new(3.0, 0.0)]);
    }

    #[test]
    fn equalized_noise_variance() {
        let mut noise = NoiseSource::new(4);
        let h = vec![Complex64::new(0.5, 0.0); 50_000];
        let n = equalized_noise(&h, 100_000, 1.0, &mut noise);
        let var = n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
        assert!((var - 4.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn header_and_rows() {
        let text = "#slots=2 subcarriers=2\n# carrier 3.5 GHz\n1,0 0.5,-0.5\n0.1,0.2 -1,1e-3\n";
        let t = parse_fading_trajectory(text).unwrap();
        assert_eq!(t.slot_count(), 2);
        assert_eq!(t.subcarrier_count(), 2);
        assert_eq!(t.slot(1)[1], Complex64::new(-1.0, 1e-3));
        assert_eq!(t.metadata, "carrier 3.5 GHz");
        assert_eq!(parse_fading_trajectory(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_zero_gain_and_names_line() {
        let text = "#slots=2 subcarriers=1\n1,0\n0,0\n";
        let err = parse_fading_trajectory(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "slots=1 subcarriers=1\n1,0\n",
            "#slots=1 subcarriers=2\n1,0\n",
            "#slots=2 subcarriers=1\n1,0\n",
            "#slots=1 subcarriers=1\n1;0\n",
            "#slots=1 subcarriers=1\nnan,0\n",
            "#slots=1 subcarriers=1\n1,0\n1,0\n",
        ] {
            assert!(parse_fading_trajectory(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn window_is_consecutive_and_reproducible() {
        let traj = jakes_trajectory(1000, 8, 0.01, 0.1, 16, 3).unwrap();
        let w1 = sample_fading_window(&traj, 10, &mut NoiseSource::new(9));
        let w2 = sample_fading_window(&traj, 10, &mut NoiseSource::new(9));
        assert_eq!(w1, w2);
        assert_eq!(w1.len(), 10);
        let start = (0..1000).find(|&t| traj.slot(t) == w1[0].as_slice()).unwrap();
        for (i, slot) in w1.iter().enumerate() {
            assert_eq!(slot.as_slice(), traj.slot((start + i) % 1000));
        }
    }

    #[test]
    fn window_wraps_around() {
        let gains: Vec<Complex64> = (0..3).map(|t| Complex64::new(1.0 + t as f64, 0.0)).collect();
        let traj = FadingTrajectory::new(gains, 3, 1, String::new()).unwrap();
        let w = sample_fading_window(&traj, 7, &mut NoiseSource::new(1));
        let first = w[0][0].re as usize - 1;
        for (i, slot) in w.iter().enumerate() {
            assert_eq!(slot[0].re as usize - 1, (first + i) % 3);
        }
    }

    #[test]
    fn jakes_has_unit_power() {
        let traj = jakes_trajectory(4000, 4, 0.05, 0.2, 32, 12).unwrap();
        let p: f64 = (0..4000).flat_map(|t| traj.slot(t).iter().map(|h| h.norm_sqr()).collect::<Vec<_>>()).sum::<f64>() / 16000.0;
        assert!((p - 1.0).abs() < 0.2, "power {p}");
    }
}
