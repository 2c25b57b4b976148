//! Seeded randomness used by weight initialisation, Gumbel noise and the
//! random baseline policy.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::Matrix;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; derives independent stream seeds from `(seed, salt)`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in the open interval (0, 1).
pub fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel(0, 1) via `-ln(-ln u)`.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    -libm::log(-libm::log(open_unit(rng)))
}

pub fn gumbel_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| gumbel(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1 = open_unit(rng);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| normal(rng) * std).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}
