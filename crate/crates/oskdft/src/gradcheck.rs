//! Central-finite-difference verification of analytic gradients.
//!
//! Used by the per-module unit tests and by the gradient acceptance suite:
//! every hand-written backward pass in this crate is checked against
//! [`fd_grad`] on tiny models at double precision.

use crate::error::Result;
use crate::store::ParameterStore;
use ndarray::{ArrayD, IxDyn};

/// Default central-difference step for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, symmetric in both arguments.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max elementwise [`rel_err`] between two gradient arrays.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Numerical gradient of `loss` w.r.t. the named store entry, by central
/// differences with step `h`. The entry is restored bit-exactly afterwards.
pub fn fd_grad<F>(store: &mut ParameterStore, name: &str, h: f64, mut loss: F) -> Result<ArrayD<f64>>
where
    F: FnMut(&ParameterStore) -> f64,
{
    let shape = store.get(name)?.shape().to_vec();
    let original = store.get(name)?.clone();
    let mut grad = ArrayD::zeros(IxDyn(&shape));
    let n = original.len();
    for flat in 0..n {
        let idx = flat_to_index(flat, &shape);
        let base = original[IxDyn(&idx)];
        store.get_mut(name)?[IxDyn(&idx)] = base + h;
        let lp = loss(store);
        store.get_mut(name)?[IxDyn(&idx)] = base - h;
        let lm = loss(store);
        store.get_mut(name)?[IxDyn(&idx)] = base;
        grad[IxDyn(&idx)] = (lp - lm) / (2.0 * h);
    }
    store.insert(name, original);
    Ok(grad)
}

fn flat_to_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (i, d) in shape.iter().enumerate().rev() {
        idx[i] = flat % d;
        flat /= d;
    }
    idx
}
