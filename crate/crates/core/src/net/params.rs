use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

/// Which termination family a parameter set was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Receiver-driven per-group termination.
    #[serde(rename = "R")]
    R,
    /// Transmitter-driven global termination.
    #[serde(rename = "T")]
    T,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::R => "R",
            Variant::T => "T",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(Variant::R),
            "T" | "t" => Ok(Variant::T),
            other => Err(Error::config(format!("unknown variant '{other}' (expected R or T)"))),
        }
    }
}

/// Shape hyperparameters of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// `m`, bits per group.
    pub bits_per_group: usize,
    /// `Q`, number of groups.
    pub groups: usize,
    /// Maximum number of rounds; knowledge vectors are padded to this length.
    pub tau_max: usize,
    /// Last round served by the shallow feature extractor.
    pub tau_vd: usize,
    /// Latent width `d`.
    pub width: usize,
    pub shallow_depth: usize,
    pub deep_depth: usize,
    pub variant: Variant,
}

impl CodecConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            bits_per_group: 3,
            groups: 16,
            tau_max: match variant {
                Variant::R => 10,
                Variant::T => 20,
            },
            tau_vd: 3,
            width: 32,
            shallow_depth: 2,
            deep_depth: 4,
            variant,
        }
    }

    /// The gradient-check configuration: Q=2, m=2, tau_max=3, d=8.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            bits_per_group: 2,
            groups: 2,
            tau_max: 3,
            tau_vd: 1,
            width: 8,
            shallow_depth: 2,
            deep_depth: 4,
            variant,
        }
    }

    pub fn num_patterns(&self) -> usize {
        1 << self.bits_per_group
    }

    pub fn num_bits(&self) -> usize {
        self.bits_per_group * self.groups
    }

    /// Encoder knowledge width: `m` bits, then `tau_max - 1` sent-symbol
    /// slots, then `tau_max - 1` feedback slots.
    pub fn encoder_input_width(&self) -> usize {
        self.bits_per_group + 2 * (self.tau_max - 1)
    }

    /// Decoder knowledge width: `tau_max` received-symbol slots, then the
    /// previous belief column.
    pub fn decoder_input_width(&self) -> usize {
        self.tau_max + self.num_patterns()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(msg.to_string()));
        if self.bits_per_group == 0 || self.bits_per_group > 10 {
            return bad("bits per group must be in 1..=10");
        }
        if self.groups == 0 {
            return bad("group count must be positive");
        }
        if self.tau_max == 0 {
            return bad("tau_max must be at least 1");
        }
        if self.width == 0 || self.shallow_depth == 0 || self.deep_depth == 0 {
            return bad("network width and depths must be positive");
        }
        Ok(())
    }
}

/// Parameter indices of one side (encoder or decoder).
#[derive(Clone, Debug)]
pub struct SideLayout {
    pub shallow: Vec<(usize, usize)>,
    pub deep: Vec<(usize, usize)>,
    pub pos: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub head: [(usize, usize); 2],
    pub out: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: SideLayout,
    pub decoder: SideLayout,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(cfg: &CodecConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: (usize, usize)| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let d = cfg.width;
        let mut side = |prefix: &str, input: usize, head_out: usize, out: Option<usize>| {
            let mut stack = |tag: &str, depth: usize| {
                (0..depth)
                    .map(|l| {
                        let fan_in = if l == 0 { input } else { d };
                        let w = add(format!("{prefix}.fe_{tag}.{l}.weight"), (fan_in, d));
                        let b = add(format!("{prefix}.fe_{tag}.{l}.bias"), (1, d));
                        (w, b)
                    })
                    .collect::<Vec<_>>()
            };
            let shallow = stack("shallow", cfg.shallow_depth);
            let deep = stack("deep", cfg.deep_depth);
            let pos = add(format!("{prefix}.position"), (cfg.groups, d));
            let wq = add(format!("{prefix}.attn.query"), (d, d));
            let wk = add(format!("{prefix}.attn.key"), (d, d));
            let wv = add(format!("{prefix}.attn.value"), (d, d));
            let h0 = (add(format!("{prefix}.head.0.weight"), (d, d)), add(format!("{prefix}.head.0.bias"), (1, d)));
            let h1 = (
                add(format!("{prefix}.head.1.weight"), (d, head_out)),
                add(format!("{prefix}.head.1.bias"), (1, head_out)),
            );
            let out = out.map(|o| (add(format!("{prefix}.out.weight"), (d, o)), add(format!("{prefix}.out.bias"), (1, o))));
            SideLayout {
                shallow,
                deep,
                pos,
                wq,
                wk,
                wv,
                head: [h0, h1],
                out,
            }
        };
        let encoder = side("encoder", cfg.encoder_input_width(), 1, None);
        let decoder = side("decoder", cfg.decoder_input_width(), d, Some(cfg.num_patterns()));
        Self {
            encoder,
            decoder,
            names,
            shapes,
        }
    }
}

/// Per-round power-normalization statistics used at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Whether `mean`/`std` were set by an explicit calibration pass.
    pub calibrated: bool,
}

impl PowerStats {
    pub fn identity(rounds: usize) -> Self {
        Self {
            mean: vec![0.0; rounds],
            std: vec![1.0; rounds],
            calibrated: false,
        }
    }
}

/// Every learnable array of the encoder/decoder pair, shared across groups.
#[derive(Clone, Debug)]
pub struct CodecParameters {
    pub config: CodecConfig,
    pub layout: Layout,
    pub arrays: Vec<Mat>,
    pub power: PowerStats,
    /// Earliest round at which receiver-side threshold decoding may freeze a
    /// group (1 for untrained models; trained models store their loss
    /// window start).
    pub first_decode_round: usize,
}

impl CodecParameters {
    /// Xavier-uniform weights, biases uniform in `+-1/sqrt(fan_in)`, small
    /// positional embeddings.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = |bias: &str| {
            let weight = format!("{}weight", bias.trim_end_matches("bias"));
            layout.names.iter().position(|n| *n == weight).map_or(1, |i| layout.shapes[i].0)
        };
        let arrays = layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, &(r, c))| {
                if name.ends_with("bias") {
                    let a = 1.0 / (fan_in(name) as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("valid range");
                    Mat::from_shape_simple_fn((r, c), || u.sample(&mut rng))
                } else if name.ends_with("position") {
                    let u = Uniform::new_inclusive(-0.1, 0.1).expect("valid range");
                    Mat::from_shape_simple_fn((r, c), || u.sample(&mut rng))
                } else {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("valid range");
                    Mat::from_shape_simple_fn((r, c), || u.sample(&mut rng))
                }
            })
            .collect();
        let power = PowerStats::identity(config.tau_max);
        Ok(Self {
            config,
            layout,
            arrays,
            power,
            first_decode_round: 1,
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let arrays = layout.shapes.iter().map(|&s| Mat::zeros(s)).collect();
        let power = PowerStats::identity(config.tau_max);
        Ok(Self {
            config,
            layout,
            arrays,
            power,
            first_decode_round: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Mat::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.arrays[i])
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Places every array on `tape` as a parameter leaf.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.arrays
            .iter()
            .enumerate()
            .map(|(i, a)| tape.param(i, a))
            .collect()
    }
}
