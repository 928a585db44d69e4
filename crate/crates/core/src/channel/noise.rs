use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent random streams owned by one [`NoiseSource`].
///
/// Each stream advances only when it is drawn from, so two protocols that
/// consume different subsets of streams still see identical forward noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Forward-link noise `w`.
    Forward = 0,
    /// Feedback noise on the scaled received symbols.
    FeedbackSymbols = 1,
    /// Feedback noise on the scaled belief matrix.
    FeedbackBeliefs = 2,
    /// Everything else: fading window offsets, message bits.
    Aux = 3,
}

const STREAMS: usize = 4;

/// Deterministic Gaussian noise generator.
///
/// Identical seeds and draw sequences give identical outputs. Instances are
/// meant to be owned by a single worker; derive per-worker sources with
/// [`NoiseSource::for_worker`].
#[derive(Clone, Debug)]
pub struct NoiseSource {
    seed: u64,
    streams: [ChaCha8Rng; STREAMS],
    drawn: [u64; STREAMS],
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        let streams = std::array::from_fn(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        });
        Self {
            seed,
            streams,
            drawn: [0; STREAMS],
        }
    }

    /// Source for worker `index` under `master` seed.
    pub fn for_worker(master: u64, index: u64) -> Self {
        Self::new(derive_seed(master, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of values drawn so far from `stream`.
    pub fn position(&self, stream: Stream) -> u64 {
        self.drawn[stream as usize]
    }

    /// One standard normal draw.
    pub fn gaussian(&mut self, stream: Stream) -> f64 {
        self.drawn[stream as usize] += 1;
        self.streams[stream as usize].sample(StandardNormal)
    }

    /// `n` standard normal draws.
    pub fn gaussians(&mut self, stream: Stream, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian(stream)).collect()
    }

    /// Uniform integer in `[0, n)` from the auxiliary stream.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.drawn[Stream::Aux as usize] += 1;
        self.streams[Stream::Aux as usize].random_range(0..n)
    }

    /// `n` fair bits from the auxiliary stream.
    pub fn bits(&mut self, n: usize) -> Vec<u8> {
        self.drawn[Stream::Aux as usize] += n as u64;
        let rng = &mut self.streams[Stream::Aux as usize];
        (0..n).map(|_| rng.random::<bool>() as u8).collect()
    }
}

/// SplitMix64-style mixing of a master seed and an index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
