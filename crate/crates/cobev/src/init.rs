//! Parameter initialization helpers.

use rand::Rng;

use crate::{Real, Tensor};

/// Kaiming-style uniform draw on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub(crate) fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as Real).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, data).expect("consistent by construction")
}

/// Zero-initialized learnable tensor (biases, offset heads).
pub(crate) fn zeros_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("consistent by construction")
}

/// Learnable tensor filled with one value (residual gates, norm gains).
pub(crate) fn const_param(shape: &[usize], value: Real) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![value; n]).expect("consistent by construction")
}

/// Learnable matrix with ones on the leading diagonal, zero elsewhere.
pub(crate) fn eye_param(rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows.min(cols) {
        data[r * cols + r] = 1.0;
    }
    Tensor::param(&[rows, cols], data).expect("consistent by construction")
}
