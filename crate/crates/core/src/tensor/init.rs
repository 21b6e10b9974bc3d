//! Parameter initialization. Kaiming-uniform for conv weights, zeros for
//! biases, everything seedable through the caller's RNG.

use rand::Rng;

use super::{Element, Tensor};

/// Kaiming-uniform draw: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<E: Element>(
    dims: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let values = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(dims, values).expect("dims/values length agree by construction")
}

pub fn zeros_param<E: Element>(dims: &[usize]) -> Tensor<E> {
    let n: usize = dims.iter().product();
    Tensor::param(dims, vec![E::zero(); n]).expect("dims/values length agree by construction")
}
