//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream so that runs are
//! reproducible from a single seed. Independent sub-streams are derived by
//! `(seed, stream id)` pairs rather than by sharing one generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

pub type SeedStream = ChaCha8Rng;

/// Stream `id` of the generator family keyed by `seed`.
pub fn seed_stream(seed: u64, id: u64) -> SeedStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Derives a fresh independent stream from the next output of `parent`.
pub fn fork(parent: &mut SeedStream, id: u64) -> SeedStream {
    seed_stream(parent.gen::<u64>(), id)
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: T, hi: T) -> T {
    let u: f64 = rng.gen();
    lo + (hi - lo) * T::of(u)
}
