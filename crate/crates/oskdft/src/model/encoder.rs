//! Pre-norm transformer encoder layers with an optional parallel bottleneck
//! adapter, and the student's dual-path forward pass.
//!
//! Layer structure (pre-norm both sub-blocks):
//!   x' = x + Attention(LN1(x))
//!   y  = x' + FFN(LN2(x'))                      (plain path)
//!   y' = x' + FFN(LN2(x')) + ReLU(x'·W_down)·W_up   (adapter path)
//!
//! The adapter reads x' — the attention-block output, the same tensor the FFN
//! block consumes — and has no biases.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::cnn::{cnn_forward, CnnCache};
use crate::model::linalg::{
    ln_backward, ln_forward, relu, relu_backward, softmax_rows, softmax_rows_backward, LnCache,
};
use crate::model::names;
use crate::store::{GradStore, ParameterStore};
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};

/// One bottleneck adapter: down-projection, ReLU, up-projection, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub w_down: Array2<f64>,
    pub w_up: Array2<f64>,
}

impl AdapterWeights {
    pub fn new(w_down: Array2<f64>, w_up: Array2<f64>) -> Result<Self> {
        if w_down.dim().1 != w_up.dim().0 {
            return Err(Error::shape(
                "adapter",
                "w_down cols == w_up rows",
                format!("{:?} vs {:?}", w_down.dim(), w_up.dim()),
            ));
        }
        Ok(AdapterWeights { w_down, w_up })
    }

    /// Clone the adapter for one layer out of a parameter store.
    pub fn from_store(store: &ParameterStore, layer: usize) -> Result<Self> {
        let w_down = store.mat(&names::adapter(layer, "w_down"))?.to_owned();
        let w_up = store.mat(&names::adapter(layer, "w_up"))?.to_owned();
        AdapterWeights::new(w_down, w_up)
    }

    /// All student adapters, layer order.
    pub fn all_from_store(store: &ParameterStore, n_layers: usize) -> Result<Vec<Self>> {
        (1..=n_layers).map(|i| Self::from_store(store, i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdapterCache {
    /// Pre-ReLU down-projection, (frames, rank).
    pub au: Array2<f64>,
    /// Post-ReLU, (frames, rank).
    pub ar: Array2<f64>,
}

/// Saved activations for one encoder layer on one utterance.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Array2<f64>,
    pub ln1: LnCache,
    pub h1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention weights, each (frames, frames).
    pub att: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub o: Array2<f64>,
    /// Attention-block output x' (post first residual).
    pub xp: Array2<f64>,
    pub ln2: LnCache,
    pub h2: Array2<f64>,
    /// FFN pre-activation.
    pub u: Array2<f64>,
    /// FFN post-ReLU.
    pub r: Array2<f64>,
    pub adapter: Option<AdapterCache>,
}

fn add_row_bias(m: &mut Array2<f64>, b: ArrayView1<f64>) {
    for mut row in m.outer_iter_mut() {
        row += &b;
    }
}

struct LayerRefs<'a> {
    ln1_g: ArrayView1<'a, f64>,
    ln1_b: ArrayView1<'a, f64>,
    wq: ArrayView2<'a, f64>,
    bq: ArrayView1<'a, f64>,
    wk: ArrayView2<'a, f64>,
    bk: ArrayView1<'a, f64>,
    wv: ArrayView2<'a, f64>,
    bv: ArrayView1<'a, f64>,
    wo: ArrayView2<'a, f64>,
    bo: ArrayView1<'a, f64>,
    ln2_g: ArrayView1<'a, f64>,
    ln2_b: ArrayView1<'a, f64>,
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

fn layer_refs<'a>(store: &'a ParameterStore, layer: usize) -> Result<LayerRefs<'a>> {
    Ok(LayerRefs {
        ln1_g: store.vec1(&names::enc(layer, "ln1.g"))?,
        ln1_b: store.vec1(&names::enc(layer, "ln1.b"))?,
        wq: store.mat(&names::enc(layer, "attn.wq"))?,
        bq: store.vec1(&names::enc(layer, "attn.bq"))?,
        wk: store.mat(&names::enc(layer, "attn.wk"))?,
        bk: store.vec1(&names::enc(layer, "attn.bk"))?,
        wv: store.mat(&names::enc(layer, "attn.wv"))?,
        bv: store.vec1(&names::enc(layer, "attn.bv"))?,
        wo: store.mat(&names::enc(layer, "attn.wo"))?,
        bo: store.vec1(&names::enc(layer, "attn.bo"))?,
        ln2_g: store.vec1(&names::enc(layer, "ln2.g"))?,
        ln2_b: store.vec1(&names::enc(layer, "ln2.b"))?,
        w1: store.mat(&names::enc(layer, "ffn.w1"))?,
        b1: store.vec1(&names::enc(layer, "ffn.b1"))?,
        w2: store.mat(&names::enc(layer, "ffn.w2"))?,
        b2: store.vec1(&names::enc(layer, "ffn.b2"))?,
    })
}

/// One encoder layer forward on one utterance `(frames, d_model)`.
/// `adapter: None` is the plain path; `Some` adds the bottleneck branch.
pub fn encoder_layer_forward(
    x: &Array2<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
    layer: usize,
    adapter: Option<&AdapterWeights>,
) -> Result<(Array2<f64>, LayerCache)> {
    let (t, d) = x.dim();
    if d != cfg.d_model {
        return Err(Error::shape("encoder input", format!("(_, {})", cfg.d_model), format!("({t}, {d})")));
    }
    if let Some(a) = adapter {
        if a.w_down.dim() != (d, cfg.adapter_rank) || a.w_up.dim() != (cfg.adapter_rank, d) {
            return Err(Error::shape(
                "adapter",
                format!("({d}, {r}) and ({r}, {d})", r = cfg.adapter_rank),
                format!("{:?} and {:?}", a.w_down.dim(), a.w_up.dim()),
            ));
        }
    }
    let p = layer_refs(store, layer)?;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, ln1) = ln_forward(x, p.ln1_g, p.ln1_b);
    let mut q = h1.dot(&p.wq);
    add_row_bias(&mut q, p.bq);
    let mut k = h1.dot(&p.wk);
    add_row_bias(&mut k, p.bk);
    let mut v = h1.dot(&p.wv);
    add_row_bias(&mut v, p.bv);

    let mut o = Array2::<f64>::zeros((t, d));
    let mut att = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&scores);
        let oh = a.dot(&vh);
        o.slice_mut(cols).assign(&oh);
        att.push(a);
    }
    let mut attn_out = o.dot(&p.wo);
    add_row_bias(&mut attn_out, p.bo);
    let xp = x + &attn_out;

    let (h2, ln2) = ln_forward(&xp, p.ln2_g, p.ln2_b);
    let mut u = h2.dot(&p.w1);
    add_row_bias(&mut u, p.b1);
    let r = relu(&u);
    let mut f = r.dot(&p.w2);
    add_row_bias(&mut f, p.b2);

    let mut y = &xp + &f;
    let adapter_cache = if let Some(a) = adapter {
        let au = xp.dot(&a.w_down);
        let ar = relu(&au);
        y = y + ar.dot(&a.w_up);
        Some(AdapterCache { au, ar })
    } else {
        None
    };

    Ok((
        y,
        LayerCache {
            x: x.clone(),
            ln1,
            h1,
            q,
            k,
            v,
            att,
            o,
            xp,
            ln2,
            h2,
            u,
            r,
            adapter: adapter_cache,
        },
    ))
}

fn sum_rows(m: &Array2<f64>) -> ndarray::Array1<f64> {
    m.sum_axis(Axis(0))
}

/// Backward of one encoder layer. Accumulates parameter gradients (including
/// adapter gradients when the layer ran with an adapter) and returns dL/dx.
pub fn encoder_layer_backward(
    dy: &Array2<f64>,
    cache: &LayerCache,
    store: &ParameterStore,
    cfg: &ModelConfig,
    layer: usize,
    adapter: Option<&AdapterWeights>,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let p = layer_refs(store, layer)?;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (t, d) = dy.dim();

    // y = xp + f (+ adapter_out)
    let mut dxp = dy.clone();
    if let (Some(a), Some(ac)) = (adapter, &cache.adapter) {
        let dao = dy; // residual branch
        let dar = dao.dot(&a.w_up.t());
        let d_wup = ac.ar.t().dot(dao);
        let dau = relu_backward(&dar, &ac.au);
        let d_wdown = cache.xp.t().dot(&dau);
        dxp += &dau.dot(&a.w_down.t());
        grads.add(&names::adapter(layer, "w_up"), d_wup.into_dyn());
        grads.add(&names::adapter(layer, "w_down"), d_wdown.into_dyn());
    }

    // FFN branch
    let df = dy;
    let dr = df.dot(&p.w2.t());
    grads.add(&names::enc(layer, "ffn.w2"), cache.r.t().dot(df).into_dyn());
    grads.add(&names::enc(layer, "ffn.b2"), sum_rows(df).into_dyn());
    let du = relu_backward(&dr, &cache.u);
    grads.add(&names::enc(layer, "ffn.w1"), cache.h2.t().dot(&du).into_dyn());
    grads.add(&names::enc(layer, "ffn.b1"), sum_rows(&du).into_dyn());
    let dh2 = du.dot(&p.w1.t());
    let (dxp_ln, dg2, db2) = ln_backward(&dh2, &cache.ln2, p.ln2_g);
    grads.add(&names::enc(layer, "ln2.g"), dg2.into_dyn());
    grads.add(&names::enc(layer, "ln2.b"), db2.into_dyn());
    dxp += &dxp_ln;

    // attention block: xp = x + O·Wo + bo
    let mut dx = dxp.clone();
    let dattn = &dxp;
    let do_full = dattn.dot(&p.wo.t());
    grads.add(&names::enc(layer, "attn.wo"), cache.o.t().dot(dattn).into_dyn());
    grads.add(&names::enc(layer, "attn.bo"), sum_rows(dattn).into_dyn());

    let mut dq = Array2::<f64>::zeros((t, d));
    let mut dk = Array2::<f64>::zeros((t, d));
    let mut dv = Array2::<f64>::zeros((t, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = do_full.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let a = &cache.att[h];
        let datt = doh.dot(&vh.t());
        let dvh = a.t().dot(&doh);
        let ds = softmax_rows_backward(a, &datt);
        let dqh = ds.dot(&kh) * scale;
        let dkh = ds.t().dot(&qh) * scale;
        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }
    grads.add(&names::enc(layer, "attn.wq"), cache.h1.t().dot(&dq).into_dyn());
    grads.add(&names::enc(layer, "attn.bq"), sum_rows(&dq).into_dyn());
    grads.add(&names::enc(layer, "attn.wk"), cache.h1.t().dot(&dk).into_dyn());
    grads.add(&names::enc(layer, "attn.bk"), sum_rows(&dk).into_dyn());
    grads.add(&names::enc(layer, "attn.wv"), cache.h1.t().dot(&dv).into_dyn());
    grads.add(&names::enc(layer, "attn.bv"), sum_rows(&dv).into_dyn());

    let dh1 = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    let (dx_ln, dg1, db1) = ln_backward(&dh1, &cache.ln1, p.ln1_g);
    grads.add(&names::enc(layer, "ln1.g"), dg1.into_dyn());
    grads.add(&names::enc(layer, "ln1.b"), db1.into_dyn());
    dx += &dx_ln;
    Ok(dx)
}

/// Run `n_layers` encoder layers over CNN-output features.
/// `adapters: Some` must supply one adapter per layer.
pub fn forward_path(
    features: &Array2<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
    n_layers: usize,
    adapters: Option<&[AdapterWeights]>,
) -> Result<(Array2<f64>, Vec<LayerCache>)> {
    if let Some(a) = adapters {
        if a.len() != n_layers {
            return Err(Error::Config(format!(
                "expected {n_layers} adapters, got {}",
                a.len()
            )));
        }
    }
    let mut x = features.clone();
    let mut caches = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let ad = adapters.map(|a| &a[layer - 1]);
        let (y, cache) = encoder_layer_forward(&x, store, cfg, layer, ad)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

/// Backward through a path; returns dL/d(features).
pub fn backward_path(
    d_out: &Array2<f64>,
    caches: &[LayerCache],
    store: &ParameterStore,
    cfg: &ModelConfig,
    adapters: Option<&[AdapterWeights]>,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let mut dy = d_out.clone();
    for layer in (1..=caches.len()).rev() {
        let ad = adapters.map(|a| &a[layer - 1]);
        dy = encoder_layer_backward(&dy, &caches[layer - 1], store, cfg, layer, ad, grads)?;
    }
    Ok(dy)
}

/// Everything produced by one student forward pass on one utterance.
#[derive(Debug)]
pub struct DualPathSample {
    pub kd: Array2<f64>,
    pub sv: Array2<f64>,
    pub cnn_cache: CnnCache,
    pub kd_caches: Vec<LayerCache>,
    pub sv_caches: Vec<LayerCache>,
    pub adapters: Vec<AdapterWeights>,
}

/// Batch-level view of the two feature tensors (batch, frames, d_model).
#[derive(Debug, Clone)]
pub struct DualPathOutput {
    pub kd_features: Array3<f64>,
    pub sv_features: Array3<f64>,
}

/// The student's dual-path pass on one utterance: the CNN runs once, then the
/// encoder stack runs twice over its output — plain (KD features) and with
/// adapters (SV features) — sharing the same weights.
pub fn dual_path_forward(
    wave: ArrayView1<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<DualPathSample> {
    let (features, cnn_cache) = cnn_forward(wave, store, cfg)?;
    let adapters = AdapterWeights::all_from_store(store, cfg.n_layers_student)?;
    let (kd, kd_caches) = forward_path(&features, store, cfg, cfg.n_layers_student, None)?;
    let (sv, sv_caches) = forward_path(&features, store, cfg, cfg.n_layers_student, Some(&adapters))?;
    Ok(DualPathSample {
        kd,
        sv,
        cnn_cache,
        kd_caches,
        sv_caches,
        adapters,
    })
}

/// Batch convenience wrapper stacking per-sample dual-path outputs.
pub fn dual_path_forward_batch(
    waves: &Array2<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<(DualPathOutput, Vec<DualPathSample>)> {
    let b = waves.dim().0;
    let mut samples = Vec::with_capacity(b);
    for row in waves.outer_iter() {
        samples.push(dual_path_forward(row, store, cfg)?);
    }
    let (t, d) = samples[0].kd.dim();
    let mut kd = Array3::zeros((b, t, d));
    let mut sv = Array3::zeros((b, t, d));
    for (i, s) in samples.iter().enumerate() {
        kd.slice_mut(s![i, .., ..]).assign(&s.kd);
        sv.slice_mut(s![i, .., ..]).assign(&s.sv);
    }
    Ok((DualPathOutput { kd_features: kd, sv_features: sv }, samples))
}
