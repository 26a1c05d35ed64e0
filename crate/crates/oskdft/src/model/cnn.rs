//! Strided 1-D convolutional front-end turning raw samples into frames.
//!
//! Each layer uses kernel size == stride, so every input sample feeds exactly
//! one output frame and the frame count is the floor-division of the sample
//! count by the stride product. Per layer: conv → layer norm (over channels)
//! → ReLU.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::linalg::{ln_backward, ln_forward, relu, relu_backward, LnCache};
use crate::model::names;
use crate::store::{GradStore, ParameterStore};
use ndarray::{Array2, ArrayView1};

/// Saved activations for one front-end layer.
#[derive(Debug, Clone)]
pub struct CnnLayerCache {
    /// Layer input, (t_in, c_in).
    pub x: Array2<f64>,
    /// Convolution output before layer norm, (t_out, c_out).
    pub conv: Array2<f64>,
    pub ln: LnCache,
    /// Layer-norm output (the ReLU pre-activation).
    pub pre_relu: Array2<f64>,
}

/// Saved activations for the whole front-end.
#[derive(Debug, Clone)]
pub struct CnnCache {
    pub layers: Vec<CnnLayerCache>,
}

/// Frame count produced from `samples` input samples.
pub fn frame_count(samples: usize, cfg: &ModelConfig) -> usize {
    cfg.cnn_strides.iter().fold(samples, |acc, s| acc / s)
}

fn conv_layer_forward(
    x: &Array2<f64>,
    w: &ndarray::ArrayView3<f64>,
    b: ArrayView1<f64>,
) -> Array2<f64> {
    let (t_in, c_in) = x.dim();
    let (c_out, c_in_w, k) = w.dim();
    debug_assert_eq!(c_in, c_in_w);
    let t_out = t_in / k;
    let mut y = Array2::zeros((t_out, c_out));
    for t in 0..t_out {
        for o in 0..c_out {
            let mut acc = b[o];
            for c in 0..c_in {
                for j in 0..k {
                    acc += w[[o, c, j]] * x[[t * k + j, c]];
                }
            }
            y[[t, o]] = acc;
        }
    }
    y
}

/// Run the front-end on one utterance (1-D samples viewed as `(samples, sample_dim)`).
///
/// Errors if the input is shorter than the total stride product (zero frames).
pub fn cnn_forward(wave: ArrayView1<f64>, store: &ParameterStore, cfg: &ModelConfig) -> Result<(Array2<f64>, CnnCache)> {
    let total: usize = cfg.stride_product();
    if wave.len() < total {
        return Err(Error::Data(format!(
            "input too short: {} samples, need at least {total}",
            wave.len()
        )));
    }
    let mut x = wave
        .to_owned()
        .into_shape_with_order((wave.len() / cfg.sample_dim, cfg.sample_dim))
        .map_err(|_| Error::shape("cnn input", "samples divisible by sample_dim", format!("{}", wave.len())))?;
    let mut layers = Vec::with_capacity(cfg.cnn_strides.len());
    for i in 1..=cfg.cnn_strides.len() {
        let w = store.arr3(&names::cnn(i, "conv.w"))?;
        let b = store.vec1(&names::cnn(i, "conv.b"))?;
        let conv = conv_layer_forward(&x, &w, b);
        let g = store.vec1(&names::cnn(i, "ln.g"))?;
        let bb = store.vec1(&names::cnn(i, "ln.b"))?;
        let (pre_relu, ln) = ln_forward(&conv, g, bb);
        let out = relu(&pre_relu);
        layers.push(CnnLayerCache {
            x: x.clone(),
            conv,
            ln,
            pre_relu,
        });
        x = out;
    }
    Ok((x, CnnCache { layers }))
}

/// Backward through the front-end, accumulating parameter gradients.
/// The gradient w.r.t. the raw input is not needed anywhere and is dropped.
pub fn cnn_backward(
    d_out: &Array2<f64>,
    cache: &CnnCache,
    store: &ParameterStore,
    cfg: &ModelConfig,
    grads: &mut GradStore,
) -> Result<()> {
    let mut dy = d_out.clone();
    for i in (1..=cfg.cnn_strides.len()).rev() {
        let lc = &cache.layers[i - 1];
        let d_pre = relu_backward(&dy, &lc.pre_relu);
        let g = store.vec1(&names::cnn(i, "ln.g"))?;
        let (d_conv, dg, db_ln) = ln_backward(&d_pre, &lc.ln, g);
        grads.add(&names::cnn(i, "ln.g"), dg.into_dyn());
        grads.add(&names::cnn(i, "ln.b"), db_ln.into_dyn());

        let w = store.arr3(&names::cnn(i, "conv.w"))?;
        let (c_out, c_in, k) = w.dim();
        let (t_out, _) = d_conv.dim();
        let mut dw = ndarray::Array3::<f64>::zeros((c_out, c_in, k));
        let mut db = ndarray::Array1::<f64>::zeros(c_out);
        let mut dx = Array2::<f64>::zeros(lc.x.dim());
        for t in 0..t_out {
            for o in 0..c_out {
                let d = d_conv[[t, o]];
                db[o] += d;
                for c in 0..c_in {
                    for j in 0..k {
                        dw[[o, c, j]] += d * lc.x[[t * k + j, c]];
                        dx[[t * k + j, c]] += d * w[[o, c, j]];
                    }
                }
            }
        }
        grads.add(&names::cnn(i, "conv.w"), dw.into_dyn());
        grads.add(&names::cnn(i, "conv.b"), db.into_dyn());
        dy = dx;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, max_rel_err, FD_STEP};
    use crate::model::build_random_store;
    use crate::rng::{rng_from, uniform_array};
    use crate::store::Role;
    use ndarray::Array1;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers_teacher: 2,
            n_layers_student: 1,
            n_heads: 2,
            ffn_mult: 2,
            adapter_rank: 2,
            cnn_strides: vec![2, 2, 2],
            sample_dim: 1,
            adapter_random_up: false,
        }
    }

    #[test]
    fn frame_count_is_floor_of_stride_product() {
        let cfg = tiny_cfg();
        assert_eq!(frame_count(16, &cfg), 2);
        assert_eq!(frame_count(17, &cfg), 2);
        assert_eq!(frame_count(23, &cfg), 2);
        assert_eq!(frame_count(24, &cfg), 3);
    }

    #[test]
    fn shape_matches_stride_arithmetic() {
        let cfg = tiny_cfg();
        let store = build_random_store(&cfg, None, Role::Student, 3).unwrap();
        let wave = Array1::linspace(0.0, 1.0, 16);
        let (out, _) = cnn_forward(wave.view(), &store, &cfg).unwrap();
        assert_eq!(out.dim(), (2, 8));
    }

    #[test]
    fn too_short_input_is_an_error() {
        let cfg = tiny_cfg();
        let store = build_random_store(&cfg, None, Role::Student, 3).unwrap();
        let wave = Array1::zeros(7);
        let err = cnn_forward(wave.view(), &store, &cfg).unwrap_err();
        assert!(err.to_string().contains("too short"));
    }

    #[test]
    fn zero_wave_zero_biases_gives_zero_output() {
        let cfg = tiny_cfg();
        let store = build_random_store(&cfg, None, Role::Student, 3).unwrap();
        // conv biases and ln offsets are zero-initialized by policy
        let wave = Array1::zeros(16);
        let (out, _) = cnn_forward(wave.view(), &store, &cfg).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = build_random_store(&cfg, None, Role::Student, 5).unwrap();
        let mut rng = rng_from(11, &[0]);
        let wave = uniform_array(&[16], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let weights = uniform_array(&[2, 8], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let loss = |s: &ParameterStore| {
            let (out, _) = cnn_forward(wave.view(), s, &cfg).unwrap();
            (&out * &weights).sum()
        };

        let (out, cache) = cnn_forward(wave.view(), &store, &cfg).unwrap();
        assert_eq!(out.dim(), (2, 8));
        let mut grads = GradStore::new();
        cnn_backward(&weights, &cache, &store, &cfg, &mut grads).unwrap();

        for name in [
            "cnn.1.conv.w",
            "cnn.1.conv.b",
            "cnn.2.conv.w",
            "cnn.2.ln.g",
            "cnn.3.conv.w",
            "cnn.3.ln.b",
        ] {
            let numeric = fd_grad(&mut store, name, FD_STEP, loss).unwrap();
            let analytic = grads.get(name).unwrap();
            let err = max_rel_err(analytic, &numeric);
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn trailing_samples_beyond_last_frame_are_ignored() {
        let cfg = tiny_cfg();
        let store = build_random_store(&cfg, None, Role::Student, 3).unwrap();
        let mut rng = rng_from(4, &[0]);
        let wave = uniform_array(&[19], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let (a, _) = cnn_forward(wave.view(), &store, &cfg).unwrap();
        let (b, _) = cnn_forward(wave.slice(ndarray::s![..16]), &store, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
