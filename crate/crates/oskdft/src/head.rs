//! Speaker head: temporal pooling to an embedding, additive-angular-margin
//! softmax for training, and plain scaled-cosine logits for distillation.

use crate::config::{HeadKind, ModelConfig, SpeakerHeadConfig};
use crate::error::{Error, Result};
use crate::model::{cnn_forward, forward_path, AdapterWeights};
use crate::store::{GradStore, ParameterStore};
use ndarray::{Array1, Array2, ArrayView1, Axis};

const NORM_FLOOR: f64 = 1e-12;

/// Saved activations for one pooling application.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub feats: Array2<f64>,
    pub mean: Array1<f64>,
    /// Population standard deviation per channel (stats head only).
    pub std: Option<Array1<f64>>,
    pub pooled: Array1<f64>,
}

/// Pool one utterance's features `(frames, d_model)` to an embedding.
pub fn pool_forward(
    feats: &Array2<f64>,
    store: &ParameterStore,
    head: &SpeakerHeadConfig,
) -> Result<(Array1<f64>, PoolCache)> {
    let (t, d) = feats.dim();
    if t == 0 {
        return Err(Error::Data("cannot pool zero frames".into()));
    }
    let mean = feats.mean_axis(Axis(0)).expect("t >= 1");
    let (pooled, std) = match head.head_kind {
        HeadKind::Linear => (mean.clone(), None),
        HeadKind::StatsPool => {
            let mut var = Array1::zeros(d);
            for row in feats.outer_iter() {
                for j in 0..d {
                    let dev = row[j] - mean[j];
                    var[j] += dev * dev;
                }
            }
            var /= t as f64;
            let std = var.map(|v: &f64| v.sqrt());
            let mut pooled = Array1::zeros(2 * d);
            pooled.slice_mut(ndarray::s![..d]).assign(&mean);
            pooled.slice_mut(ndarray::s![d..]).assign(&std);
            (pooled, Some(std))
        }
    };
    let w = store.mat("head.proj.w")?;
    let b = store.vec1("head.proj.b")?;
    if w.dim().0 != pooled.len() {
        return Err(Error::shape("head.proj.w", format!("({}, _)", pooled.len()), format!("{:?}", w.dim())));
    }
    let e = pooled.dot(&w) + &b;
    Ok((
        e,
        PoolCache {
            feats: feats.clone(),
            mean,
            std,
            pooled,
        },
    ))
}

/// Backward of [`pool_forward`]; accumulates projection grads, returns
/// dL/d(features).
pub fn pool_backward(
    d_emb: ArrayView1<f64>,
    cache: &PoolCache,
    store: &ParameterStore,
    head: &SpeakerHeadConfig,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let (t, d) = cache.feats.dim();
    let w = store.mat("head.proj.w")?;
    let e_dim = head.embed_dim;
    let pool_dim = cache.pooled.len();
    let mut dw = Array2::zeros((pool_dim, e_dim));
    for p in 0..pool_dim {
        for e in 0..e_dim {
            dw[[p, e]] = cache.pooled[p] * d_emb[e];
        }
    }
    grads.add("head.proj.w", dw.into_dyn());
    grads.add("head.proj.b", d_emb.to_owned().into_dyn());
    let d_pooled = w.dot(&d_emb);

    let tf = t as f64;
    let mut d_feats = Array2::zeros((t, d));
    match head.head_kind {
        HeadKind::Linear => {
            for i in 0..t {
                for j in 0..d {
                    d_feats[[i, j]] = d_pooled[j] / tf;
                }
            }
        }
        HeadKind::StatsPool => {
            let std = cache.std.as_ref().expect("stats cache");
            for j in 0..d {
                let d_mean = d_pooled[j];
                let d_std = d_pooled[d + j];
                // std = sqrt(var); subgradient 0 at the var = 0 kink
                let d_var = if std[j] > NORM_FLOOR { d_std / (2.0 * std[j]) } else { 0.0 };
                for i in 0..t {
                    let dev = cache.feats[[i, j]] - cache.mean[j];
                    d_feats[[i, j]] = d_mean / tf + d_var * 2.0 * dev / tf;
                }
            }
        }
    }
    Ok(d_feats)
}

/// Row-normalized cosine table between embeddings and class weights.
#[derive(Debug, Clone)]
pub struct CosCache {
    pub e_hat: Array2<f64>,
    pub w_hat: Array2<f64>,
    pub e_len: Array1<f64>,
    pub w_len: Array1<f64>,
    pub cos: Array2<f64>,
}

fn cosine_forward(embs: &Array2<f64>, class_w: &Array2<f64>) -> Result<CosCache> {
    let (b, e_dim) = embs.dim();
    let (c, e_dim2) = class_w.dim();
    if e_dim != e_dim2 {
        return Err(Error::shape("class weights", format!("(_, {e_dim})"), format!("({c}, {e_dim2})")));
    }
    let mut e_hat = embs.clone();
    let mut e_len = Array1::zeros(b);
    for (i, mut row) in e_hat.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if n < NORM_FLOOR {
            return Err(Error::Data(format!("zero-norm embedding at batch index {i}")));
        }
        e_len[i] = n;
        row /= n;
    }
    let mut w_hat = class_w.clone();
    let mut w_len = Array1::zeros(c);
    for (i, mut row) in w_hat.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt().max(NORM_FLOOR);
        w_len[i] = n;
        row /= n;
    }
    let cos = e_hat.dot(&w_hat.t());
    Ok(CosCache {
        e_hat,
        w_hat,
        e_len,
        w_len,
        cos,
    })
}

/// Backward through the cosine table: returns (d_embs, d_class_w).
fn cosine_backward(d_cos: &Array2<f64>, cache: &CosCache) -> (Array2<f64>, Array2<f64>) {
    let (b, c) = d_cos.dim();
    let e_dim = cache.e_hat.dim().1;
    let mut d_embs = Array2::zeros((b, e_dim));
    let mut d_w = Array2::zeros((c, e_dim));
    for i in 0..b {
        for j in 0..c {
            let g = d_cos[[i, j]];
            if g == 0.0 {
                continue;
            }
            let cosv = cache.cos[[i, j]];
            for k in 0..e_dim {
                d_embs[[i, k]] += g * (cache.w_hat[[j, k]] - cosv * cache.e_hat[[i, k]]) / cache.e_len[i];
                d_w[[j, k]] += g * (cache.e_hat[[i, k]] - cosv * cache.w_hat[[j, k]]) / cache.w_len[j];
            }
        }
    }
    (d_embs, d_w)
}

/// Saved state of one AAM-softmax evaluation.
#[derive(Debug, Clone)]
pub struct AamCache {
    pub cos: CosCache,
    /// Softmax of the margin-modified scaled logits, (batch, classes).
    pub p: Array2<f64>,
    pub labels: Vec<usize>,
}

/// AAM-softmax loss over a batch: true-class logit s·cos(θ+m) (with the
/// standard guard past the monotonic region), other logits s·cos(θ), then
/// mean cross-entropy. Also returns margin-free training accuracy.
pub fn aam_forward(
    embs: &Array2<f64>,
    labels: &[usize],
    store: &ParameterStore,
    head: &SpeakerHeadConfig,
) -> Result<(f64, f64, AamCache)> {
    let class_w = store.mat("head.class.w")?.to_owned();
    let (b, _) = embs.dim();
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for batch of {b}", labels.len())));
    }
    let c = class_w.dim().0;
    for &y in labels {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range (classes: {c})")));
        }
    }
    let cos = cosine_forward(embs, &class_w)?;
    let (m, s) = (head.margin, head.scale);
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let guard = (std::f64::consts::PI - m).cos();

    let mut logits = &cos.cos * s;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let cost = cos.cos[[i, y]];
        let phi = if cost > guard {
            let sint = (1.0 - cost * cost).max(0.0).sqrt();
            cost * cos_m - sint * sin_m
        } else {
            cost - m * sin_m
        };
        logits[[i, y]] = s * phi;
        let row = cos.cos.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if best == y {
            correct += 1;
        }
    }

    let mut loss = 0.0;
    let mut p = Array2::zeros(logits.dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let ls = crate::model::linalg::log_softmax(row);
        loss -= ls[labels[i]];
        p.row_mut(i).assign(&ls.map(|v| v.exp()));
    }
    loss /= b as f64;
    let acc = correct as f64 / b as f64;
    Ok((
        loss,
        acc,
        AamCache {
            cos,
            p,
            labels: labels.to_vec(),
        },
    ))
}

/// Backward of `loss_scale *` [`aam_forward`]: accumulates class-weight
/// grads, returns dL/d(embeddings). Both outputs carry `loss_scale`, so the
/// caller applies the joint-loss weight here and nowhere else.
pub fn aam_backward(
    cache: &AamCache,
    head: &SpeakerHeadConfig,
    loss_scale: f64,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let (b, _c) = cache.p.dim();
    let (m, s) = (head.margin, head.scale);
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let guard = (std::f64::consts::PI - m).cos();

    // d loss / d logits = loss_scale * (p - onehot) / B
    let mut dz = cache.p.clone();
    for (i, &y) in cache.labels.iter().enumerate() {
        dz[[i, y]] -= 1.0;
    }
    dz *= loss_scale / b as f64;

    // chain through the margin transform on the true-class cosine
    let mut d_cos = &dz * s;
    for (i, &y) in cache.labels.iter().enumerate() {
        let cost = cache.cos.cos[[i, y]];
        let factor = if cost > guard {
            let sint = (1.0 - cost * cost).max(0.0).sqrt().max(1e-8);
            cos_m + sin_m * cost / sint
        } else {
            1.0
        };
        d_cos[[i, y]] = dz[[i, y]] * s * factor;
    }
    let (d_embs, d_w) = cosine_backward(&d_cos, &cache.cos);
    grads.add("head.class.w", d_w.into_dyn());
    Ok(d_embs)
}

/// Margin-free scaled-cosine logits (inference / distillation view).
pub fn cos_logits_forward(
    embs: &Array2<f64>,
    store: &ParameterStore,
    head: &SpeakerHeadConfig,
) -> Result<(Array2<f64>, CosCache)> {
    let class_w = store.mat("head.class.w")?.to_owned();
    let cos = cosine_forward(embs, &class_w)?;
    let logits = &cos.cos * head.scale;
    Ok((logits, cos))
}

/// Backward of [`cos_logits_forward`].
pub fn cos_logits_backward(
    d_logits: &Array2<f64>,
    cache: &CosCache,
    head: &SpeakerHeadConfig,
    grads: &mut GradStore,
) -> Array2<f64> {
    let d_cos = d_logits * head.scale;
    let (d_embs, d_w) = cosine_backward(&d_cos, cache);
    grads.add("head.class.w", d_w.into_dyn());
    d_embs
}

pub fn store_has_adapters(store: &ParameterStore) -> bool {
    store.names_with_prefix("adapter.").next().is_some()
}

/// Run the SV path end-to-end on one utterance and return the L2-normalized
/// speaker embedding. Uses the adapter path when the store has adapters.
pub fn extract_embedding(
    wave: ArrayView1<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
    head: &SpeakerHeadConfig,
) -> Result<Array1<f64>> {
    let (feats, _) = cnn_forward(wave, store, cfg)?;
    let adapters = if store_has_adapters(store) {
        Some(AdapterWeights::all_from_store(store, cfg.n_layers_student)?)
    } else {
        None
    };
    let n_layers = if store.contains(&crate::model::names::enc(cfg.n_layers_teacher, "ln1.g"))
        && cfg.n_layers_teacher > cfg.n_layers_student
    {
        cfg.n_layers_teacher
    } else {
        cfg.n_layers_student
    };
    let (out, _) = forward_path(&feats, store, cfg, n_layers, adapters.as_deref())?;
    let (e, _) = pool_forward(&out, store, head)?;
    let n = e.dot(&e).sqrt();
    if n < NORM_FLOOR {
        return Err(Error::Data("zero-norm embedding".into()));
    }
    Ok(e / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadKind;
    use crate::gradcheck::{fd_grad, max_rel_err, FD_STEP};
    use crate::model::build_random_store;
    use crate::rng::{rng_from, uniform_array};
    use crate::store::Role;
    use ndarray::arr2;

    fn mcfg() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            n_layers_teacher: 2,
            n_layers_student: 1,
            n_heads: 2,
            ffn_mult: 2,
            adapter_rank: 2,
            cnn_strides: vec![2, 2],
            sample_dim: 1,
            adapter_random_up: false,
        }
    }

    fn hcfg(kind: HeadKind, n_speakers: usize) -> SpeakerHeadConfig {
        SpeakerHeadConfig {
            head_kind: kind,
            embed_dim: 3,
            n_speakers,
            margin: 0.15,
            scale: 20.0,
        }
    }

    fn rand2(a: usize, b: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed, &[60]);
        uniform_array(&[a, b], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    #[test]
    fn linear_pool_is_projected_temporal_mean() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let store = build_random_store(&c, Some(&h), Role::Student, 1).unwrap();
        // batch=1, frames=2, d_model=4-ish hand case: mean of two frames
        let feats = arr2(&[[1.0, 2.0, 3.0, 4.0], [3.0, 4.0, 5.0, 6.0]]);
        let (e, cache) = pool_forward(&feats, &store, &h).unwrap();
        assert_eq!(cache.mean, ndarray::arr1(&[2.0, 3.0, 4.0, 5.0]));
        let w = store.mat("head.proj.w").unwrap();
        let b = store.vec1("head.proj.b").unwrap();
        let want = cache.mean.dot(&w) + &b;
        assert!((&e - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stats_pool_matches_loop_oracle_and_zero_variance_degenerates() {
        let c = mcfg();
        let h = hcfg(HeadKind::StatsPool, 4);
        let store = build_random_store(&c, Some(&h), Role::Student, 2).unwrap();
        let feats = rand2(5, 4, 3);
        let (_, cache) = pool_forward(&feats, &store, &h).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| feats[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((cache.mean[j] - mean).abs() < 1e-12);
            assert!((cache.std.as_ref().unwrap()[j] - var.sqrt()).abs() < 1e-12);
        }
        // constant in time → std part exactly zero (0.5 sums exactly in f64)
        let const_feats = Array2::from_elem((6, 4), 0.5);
        let (_, cache) = pool_forward(&const_feats, &store, &h).unwrap();
        assert!(cache.std.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let c = mcfg();
        for kind in [HeadKind::Linear, HeadKind::StatsPool] {
            let h = hcfg(kind, 4);
            let mut store = build_random_store(&c, Some(&h), Role::Student, 4).unwrap();
            let feats = rand2(4, 4, 9);
            let dvec = ndarray::arr1(&[0.3, -0.8, 0.5]);
            let loss = |s: &ParameterStore| {
                let (e, _) = pool_forward(&feats, s, &h).unwrap();
                e.dot(&dvec)
            };
            let (_, cache) = pool_forward(&feats, &store, &h).unwrap();
            let mut grads = GradStore::new();
            let d_feats = pool_backward(dvec.view(), &cache, &store, &h, &mut grads).unwrap();
            for name in ["head.proj.w", "head.proj.b"] {
                let numeric = fd_grad(&mut store, name, FD_STEP, loss).unwrap();
                let err = max_rel_err(grads.get(name).unwrap(), &numeric);
                assert!(err < 1e-6, "{name} ({kind:?}): {err}");
            }
            // d_feats via manual FD
            let h_step = 1e-6;
            for i in 0..4 {
                for j in 0..4 {
                    let mut fp = feats.clone();
                    fp[[i, j]] += h_step;
                    let mut fm = feats.clone();
                    fm[[i, j]] -= h_step;
                    let (ep, _) = pool_forward(&fp, &store, &h).unwrap();
                    let (em, _) = pool_forward(&fm, &store, &h).unwrap();
                    let num = (ep.dot(&dvec) - em.dot(&dvec)) / (2.0 * h_step);
                    assert!(
                        (d_feats[[i, j]] - num).abs() < 1e-5,
                        "{kind:?} d_feats[{i},{j}]: {} vs {num}",
                        d_feats[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn margin_free_unit_scale_is_plain_cross_entropy() {
        let c = mcfg();
        let h = SpeakerHeadConfig {
            margin: 0.0,
            scale: 1.0,
            ..hcfg(HeadKind::Linear, 4)
        };
        let store = build_random_store(&c, Some(&h), Role::Student, 5).unwrap();
        let embs = rand2(3, 3, 11);
        let labels = [0usize, 2, 3];
        let (loss, _, _) = aam_forward(&embs, &labels, &store, &h).unwrap();
        // direct CE over raw cosines
        let class_w = store.mat("head.class.w").unwrap().to_owned();
        let cos = cosine_forward(&embs, &class_w).unwrap().cos;
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let ls = crate::model::linalg::log_softmax(cos.row(i));
            want -= ls[y];
        }
        want /= 3.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn colinear_embedding_closed_form() {
        let c = mcfg();
        let n = 4;
        let h = hcfg(HeadKind::Linear, n);
        let mut store = build_random_store(&c, Some(&h), Role::Student, 6).unwrap();
        // class 0 weight along e1, other classes orthogonal to e1
        let w = arr2(&[
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 1.0],
        ]);
        store.insert("head.class.w", w.into_dyn());
        let embs = arr2(&[[0.5, 0.0, 0.0]]); // colinear with class 0
        let (loss, acc, _) = aam_forward(&embs, &[0], &store, &h).unwrap();
        // true logit 20·cos(0.15), others 0
        let z = 20.0 * (0.15f64).cos();
        let want = -(z.exp() / (z.exp() + (n as f64 - 1.0))).ln();
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn aam_gradients_match_finite_differences() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let mut store = build_random_store(&c, Some(&h), Role::Student, 7).unwrap();
        let embs = rand2(2, 3, 21);
        let labels = [1usize, 3];
        // Non-unit loss weight: both returned gradients must carry it.
        let scale = 1.7;
        let loss_of = |s: &ParameterStore| scale * aam_forward(&embs, &labels, s, &h).unwrap().0;
        let (_, _, cache) = aam_forward(&embs, &labels, &store, &h).unwrap();
        let mut grads = GradStore::new();
        let d_embs = aam_backward(&cache, &h, scale, &mut grads).unwrap();

        let numeric = fd_grad(&mut store, "head.class.w", FD_STEP, loss_of).unwrap();
        let err = max_rel_err(grads.get("head.class.w").unwrap(), &numeric);
        assert!(err < 1e-4, "class.w: {err}");

        let h_step = FD_STEP;
        for i in 0..2 {
            for j in 0..3 {
                let mut ep = embs.clone();
                ep[[i, j]] += h_step;
                let mut em = embs.clone();
                em[[i, j]] -= h_step;
                let lp = scale * aam_forward(&ep, &labels, &store, &h).unwrap().0;
                let lm = scale * aam_forward(&em, &labels, &store, &h).unwrap().0;
                let num = (lp - lm) / (2.0 * h_step);
                let rel = (d_embs[[i, j]] - num).abs() / d_embs[[i, j]].abs().max(num.abs()).max(1e-8);
                assert!(rel < 1e-4, "d_embs[{i},{j}]: rel {rel}");
            }
        }
    }

    #[test]
    fn scale_invariance_of_embeddings() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let store = build_random_store(&c, Some(&h), Role::Student, 8).unwrap();
        let embs = rand2(3, 3, 31);
        let labels = [0usize, 1, 2];
        let (l1, _, _) = aam_forward(&embs, &labels, &store, &h).unwrap();
        let (l2, _, _) = aam_forward(&(&embs * 7.5), &labels, &store, &h).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn increasing_margin_never_helps_correct_samples() {
        let c = mcfg();
        let mut checked = 0;
        for seed in 0..40u64 {
            let h0 = hcfg(HeadKind::Linear, 4);
            let store = build_random_store(&c, Some(&h0), Role::Student, 500 + seed).unwrap();
            let embs = rand2(1, 3, 600 + seed);
            for y in 0..4usize {
                let (_, acc, _) = aam_forward(&embs, &[y], &store, &h0).unwrap();
                if acc < 1.0 {
                    continue; // only the correctly-classified case is claimed
                }
                let mut last = f64::NEG_INFINITY;
                for m in [0.0, 0.1, 0.15, 0.2] {
                    let h = SpeakerHeadConfig { margin: m, ..h0.clone() };
                    let (loss, _, _) = aam_forward(&embs, &[y], &store, &h).unwrap();
                    assert!(loss >= last - 1e-12, "margin {m}: loss {loss} < {last}");
                    last = loss;
                }
                checked += 1;
            }
        }
        assert!(checked > 10, "too few correctly-classified draws ({checked})");
    }

    #[test]
    fn label_and_norm_errors() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 3);
        let store = build_random_store(&c, Some(&h), Role::Student, 9).unwrap();
        let embs = rand2(1, 3, 41);
        assert!(aam_forward(&embs, &[3], &store, &h).is_err());
        let zero = Array2::zeros((1, 3));
        let err = aam_forward(&zero, &[0], &store, &h).unwrap_err();
        assert!(err.to_string().contains("zero-norm"));
    }

    #[test]
    fn extract_embedding_is_normalized_and_deterministic() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let store = build_random_store(&c, Some(&h), Role::Student, 10).unwrap();
        let wave = ndarray::Array1::linspace(-0.3, 0.9, 25);
        let a = extract_embedding(wave.view(), &store, &c, &h).unwrap();
        let b = extract_embedding(wave.view(), &store, &c, &h).unwrap();
        assert!((a.dot(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn adapters_change_embeddings_once_nonzero() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let mut store = build_random_store(&c, Some(&h), Role::Student, 11).unwrap();
        let wave = ndarray::Array1::linspace(-1.0, 1.0, 29);
        let before = extract_embedding(wave.view(), &store, &c, &h).unwrap();
        store.insert(
            "adapter.1.w_up",
            uniform_array(&[2, 4], 0.5, &mut rng_from(99, &[1])),
        );
        let after = extract_embedding(wave.view(), &store, &c, &h).unwrap();
        assert!((&before - &after).iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn cos_logits_backward_matches_fd() {
        let c = mcfg();
        let h = hcfg(HeadKind::Linear, 4);
        let mut store = build_random_store(&c, Some(&h), Role::Student, 12).unwrap();
        let embs = rand2(2, 3, 55);
        let weights = rand2(2, 4, 56);
        let loss = |s: &ParameterStore| {
            let (z, _) = cos_logits_forward(&embs, s, &h).unwrap();
            (&z * &weights).sum()
        };
        let (_, cache) = cos_logits_forward(&embs, &store, &h).unwrap();
        let mut grads = GradStore::new();
        let _ = cos_logits_backward(&weights, &cache, &h, &mut grads);
        let numeric = fd_grad(&mut store, "head.class.w", FD_STEP, loss).unwrap();
        let err = max_rel_err(grads.get("head.class.w").unwrap(), &numeric);
        assert!(err < 1e-5, "class.w: {err}");
    }
}
