//! Parameter initialization helpers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Xavier/Glorot uniform draw for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-a..a)).collect()
}

/// Zero-mean normal draw.
pub fn normal<R: Rng>(rng: &mut R, std: f64, len: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..len).map(|_| dist.sample(rng)).collect()
}
