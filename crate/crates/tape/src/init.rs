//! Parameter initializers. All of them draw from a caller-supplied RNG so
//! that building the same network from the same seed is bit-reproducible.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let d = Uniform::new(lo, hi);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let d = Normal::new(mean, std).expect("normal: std must be finite and positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

/// He-uniform: U(-√(6/fan_in), √(6/fan_in)).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}

/// Glorot-uniform: U(-√(6/(fan_in+fan_out)), √(6/(fan_in+fan_out))).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}
