//! Small dense-layer primitives with explicit backward passes.
//!
//! Everything operates on per-utterance 2-D arrays `(frames, channels)`;
//! batching is a caller-side loop. All backward functions return gradients
//! as fresh arrays; accumulation into a store is the caller's concern.

use ndarray::{Array1, Array2, ArrayView1, Axis};

pub const LN_EPS: f64 = 1e-5;

/// Saved activations for one layer-norm application.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm: each row is normalized over its channels, then
/// scaled by `g` and shifted by `b`.
pub fn ln_forward(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * is;
        }
    }
    let y = &xhat * &g.insert_axis(Axis(0)) + &b.insert_axis(Axis(0));
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`ln_forward`]. Returns `(dx, dg, db)`.
pub fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    for i in 0..t {
        let mut m1 = 0.0; // mean of dxhat
        let mut m2 = 0.0; // mean of dxhat * xhat
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            m1 += dxh;
            m2 += dxh * cache.xhat[[i, j]];
            dg[j] += dy[[i, j]] * cache.xhat[[i, j]];
            db[j] += dy[[i, j]];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.inv_std[i] * (dxh - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    (dx, dg, db)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of row-wise softmax: given outputs `p` and upstream `dp`,
/// returns the gradient w.r.t. the logits.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let (t, d) = p.dim();
    let mut ds = Array2::zeros((t, d));
    for i in 0..t {
        let mut dot = 0.0;
        for j in 0..d {
            dot += dp[[i, j]] * p[[i, j]];
        }
        for j in 0..d {
            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
        }
    }
    ds
}

/// Stable log-softmax of a single logit vector.
pub fn log_softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.map(|v| v - lse)
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.map(|v| v.max(0.0))
}

/// Backward of ReLU given the cached pre-activation.
pub fn relu_backward(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, p| {
        if *p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}
