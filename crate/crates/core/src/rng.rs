//! Keyed random streams.
//!
//! Every stochastic quantity in a run is drawn from a stream identified by
//! `(seed, tag, step, index)`. The stream is a ChaCha8 generator seeded from a
//! hash of the key, so the value of e.g. the Langevin noise of particle `j` at
//! step `k` never depends on evaluation order or on how many other draws were
//! made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Data generation (training and test inputs, label noise of the dataset).
pub const TAG_DATA: &str = "data";
/// Particle initialization.
pub const TAG_INIT: &str = "init";
/// Langevin noise of the particle update.
pub const TAG_MFLD: &str = "mfld";
/// Fresh label noise of the label-noise procedure.
pub const TAG_LABEL_NOISE: &str = "label-noise";
/// Monte-Carlo pairs of the population alignment estimate.
pub const TAG_ALIGN_MC: &str = "align-mc";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn fmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3)
    })
}

/// Identifier of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub tag: &'static str,
    pub step: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, tag: &'static str, step: u64, index: u64) -> Self {
        Self {
            seed,
            tag,
            step,
            index,
        }
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut h = fmix(self.seed);
        h = fmix(h ^ fnv1a(self.tag));
        h = fmix(h ^ self.step);
        h = fmix(h ^ self.index.rotate_left(32));
        let mut out = [0u8; 32];
        for (k, chunk) in out.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&fmix(h ^ (k as u64)).to_le_bytes());
        }
        out
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed_bytes())
    }
}

/// Shorthand for `StreamKey::new(..).rng()`.
pub fn stream(seed: u64, tag: &'static str, step: u64, index: u64) -> ChaCha8Rng {
    StreamKey::new(seed, tag, step, index).rng()
}
