//! Seeded random number helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type FtnRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> FtnRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal draw by the Box-Muller transform (cosine branch).
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 - U lies in (0, 1], keeping the logarithm finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
