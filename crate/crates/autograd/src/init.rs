//! Seeded weight initializers. Every draw goes through the caller's RNG so a
//! fixed seed rebuilds bit-identical models.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::Arr;

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::from_elem(IxDyn(shape), 1.0)
}

pub fn full(shape: &[usize], v: f64) -> Arr {
    Arr::from_elem(IxDyn(shape), v)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let dist = Uniform::new(lo, hi).expect("invalid uniform range");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He initialization for layers feeding a SiLU/ReLU-family nonlinearity.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Xavier initialization for attention projections and plain linears.
pub fn xavier_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    normal(rng, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
}
