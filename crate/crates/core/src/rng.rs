//! Seedable random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used everywhere a reproducible stream is needed.
pub type RngStream = ChaCha8Rng;

/// A 64-bit seed. The same seed always yields a bit-identical stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn stream(self) -> RngStream {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// An independent stream for the `index`-th unit of work derived from
    /// this seed. Used to split Monte Carlo runs into chunks whose results
    /// do not depend on how the chunks are scheduled.
    pub fn substream(self, index: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(index);
        rng
    }

    /// Derives a child seed by mixing in `salt` (splitmix64 finalizer).
    pub fn derive(self, salt: u64) -> RngSeed {
        let mut z = self.0 ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// Largest value returned by [`unit`]: 1 - 2^-53.
pub const UNIT_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Uniform draw from [0, 1) with 53 bits of precision.
#[inline]
pub fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Uniform angle in [0, 2π).
#[inline]
pub fn angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let theta = std::f64::consts::TAU * unit(rng);
    // TAU * UNIT_MAX rounds to TAU.
    if theta >= std::f64::consts::TAU {
        0.0
    } else {
        theta
    }
}
