//! One optimizer step: crop/augment a batch, run the forward pass(es),
//! combine the active losses, and backpropagate into a [`GradStore`].
//!
//! Every stochastic draw comes from a functional RNG keyed by
//! `(stream, epoch, position-in-epoch)`, so a step's result depends only on
//! the run seed and the batch description — never on execution history.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::data::augment::{add_noise, crop_random, spec_augment};
use crate::data::corpus::Corpus;
use crate::distill::{joint_loss, kd_mse, kl_kd_loss, teacher_forward};
use crate::error::{Error, Result};
use crate::head::{
    aam_backward, aam_forward, cos_logits_backward, cos_logits_forward, pool_backward,
    pool_forward, PoolCache,
};
use crate::model::{
    backward_path, cnn_backward, cnn_forward, dual_path_forward, forward_path, AdapterWeights,
    CnnCache, LayerCache,
};
use crate::rng::{rng_from, stream};
use crate::store::{GradStore, ParameterStore};
use crate::trainer::config::RunConfig;

/// Which distillation signal (if any) the step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdKind {
    /// No distillation term.
    None,
    /// Feature-space MSE against the frozen teacher's encoder output.
    Mse,
    /// KL against a speaker-tuned teacher's cosine logits.
    Kl,
}

/// What one training phase computes and which parameters it may touch.
#[derive(Debug, Clone, Copy)]
pub struct StepSpec {
    pub kd: KdKind,
    /// Speaker-classification (AAM) loss active.
    pub sv: bool,
    /// Run the encoder twice: plain for KD, adapters for SV.
    pub dual_path: bool,
    /// Adapters present on the classification path.
    pub adapters: bool,
    /// Backpropagate only into `head.*` (freeze the rest).
    pub head_only: bool,
    /// Encoder depth of the trained model.
    pub n_layers: usize,
}

/// The frozen reference network a distillation step compares against.
pub enum TeacherRef<'a> {
    /// Pretrained teacher; produces full-depth encoder features.
    Features(&'a ParameterStore),
    /// Speaker-tuned teacher; produces margin-free scaled cosine logits via
    /// its own pooling head.
    Logits(&'a ParameterStore),
}

/// Loss and gradient summary of one batch.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub kd_loss: Option<f64>,
    pub sv_loss: Option<f64>,
    pub joint_loss: f64,
    /// Margin-free train accuracy; `None` when the step has no classifier
    /// view of the batch.
    pub train_acc: Option<f64>,
    pub grad_classifier: f64,
    pub grad_backbone: f64,
    pub grad_adapter: f64,
}

/// One utterance of a batch: corpus index plus its position in the epoch's
/// global sample order (the RNG tag that makes augmentation draws
/// batch-composition-independent).
#[derive(Debug, Clone, Copy)]
pub struct BatchItem {
    pub utt: usize,
    pub position: u64,
}

/// Per-sample forward state kept alive for the backward pass.
struct SampleState {
    cnn_cache: CnnCache,
    /// Plain-path caches when the KD loss runs on its own path.
    kd_caches: Option<Vec<LayerCache>>,
    /// Caches of the path that feeds pooling (and, in single-path setups,
    /// the KD loss as well).
    main_caches: Vec<LayerCache>,
    adapters: Option<Vec<AdapterWeights>>,
    /// 0/1 keep-mask of the stripe augmentation, if drawn.
    keep: Option<Array2<f64>>,
    /// Raw (unmasked) output of the main path.
    main_out: Array2<f64>,
    pool: Option<PoolCache>,
}

fn masked(x: &Array2<f64>, keep: Option<&Array2<f64>>) -> Array2<f64> {
    match keep {
        Some(k) => x * k,
        None => x.clone(),
    }
}

/// Run one batch end to end, accumulating parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    corpus: &Corpus,
    items: &[BatchItem],
    labels_by_speaker: &BTreeMap<String, usize>,
    epoch: u64,
    spec: &StepSpec,
    rc: &RunConfig,
    seed: u64,
    student: &ParameterStore,
    teacher: Option<&TeacherRef<'_>>,
    grads: &mut GradStore,
) -> Result<StepOutcome> {
    if items.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cfg = &rc.model;
    let head = &rc.head;
    let b = items.len();

    let mut states: Vec<SampleState> = Vec::with_capacity(b);
    let mut labels: Vec<usize> = Vec::with_capacity(b);
    let mut embs: Option<Array2<f64>> = None;
    let mut kd_student: Vec<Array2<f64>> = Vec::new();
    let mut kd_teacher: Vec<Array2<f64>> = Vec::new();
    let mut teacher_embs: Option<Array2<f64>> = None;

    let needs_pool = spec.sv || spec.kd == KdKind::Kl;

    for (row, item) in items.iter().enumerate() {
        let u = &corpus.utterances[item.utt];
        let label = *labels_by_speaker.get(&u.speaker).ok_or_else(|| {
            Error::Data(format!("utterance {} has unknown speaker {}", u.id, u.speaker))
        })?;
        labels.push(label);

        let mut crop_rng = rng_from(seed, &[stream::CROP, epoch, item.position]);
        let mut wave = crop_random(u, rc.crop_seconds, corpus.sample_rate, &mut crop_rng)?;
        if rc.noise_enabled {
            let mut noise_rng = rng_from(seed, &[stream::NOISE, epoch, item.position]);
            wave = add_noise(wave.view(), &rc.noise, &mut noise_rng);
        }

        // Student forward — one CNN pass, one or two encoder passes.
        let (cnn_cache, kd_out, kd_caches, main_out, main_caches, adapters) = if spec.dual_path {
            let s = dual_path_forward(wave.view(), student, cfg)?;
            (s.cnn_cache, Some(s.kd), Some(s.kd_caches), s.sv, s.sv_caches, Some(s.adapters))
        } else {
            let (feats, cnn_cache) = cnn_forward(wave.view(), student, cfg)?;
            let adapters = if spec.adapters {
                Some(AdapterWeights::all_from_store(student, spec.n_layers)?)
            } else {
                None
            };
            let (out, caches) =
                forward_path(&feats, student, cfg, spec.n_layers, adapters.as_deref())?;
            (cnn_cache, None, None, out, caches, adapters)
        };

        // Stripe augmentation on the classification-path encoder output.
        let keep = if rc.spec_augment && needs_pool {
            let mut aug_rng = rng_from(seed, &[stream::SPEC_AUGMENT, epoch, item.position]);
            let (_, keep) = spec_augment(&main_out, &rc.augment, &mut aug_rng)?;
            Some(keep)
        } else {
            None
        };

        if needs_pool {
            let pooled_input = masked(&main_out, keep.as_ref());
            let (emb, cache) = pool_forward(&pooled_input, student, head)?;
            let embs = embs.get_or_insert_with(|| Array2::zeros((b, head.embed_dim)));
            embs.row_mut(row).assign(&emb);
            states.push(SampleState {
                cnn_cache,
                kd_caches,
                main_caches,
                adapters,
                keep,
                main_out,
                pool: Some(cache),
            });
        } else {
            states.push(SampleState {
                cnn_cache,
                kd_caches,
                main_caches,
                adapters,
                keep,
                main_out,
                pool: None,
            });
        }
        let st = states.last().unwrap();

        // Teacher forward on the very same cropped (and noised) waveform.
        match (spec.kd, teacher) {
            (KdKind::None, _) => {}
            (KdKind::Mse, Some(TeacherRef::Features(t_store))) => {
                let t_out = teacher_forward(wave.view(), t_store, cfg)?;
                let extend = rc.augment_extend_kd;
                let gate = if extend { st.keep.as_ref() } else { None };
                let s_out = kd_out.as_ref().unwrap_or(&st.main_out);
                kd_student.push(masked(s_out, gate));
                kd_teacher.push(masked(&t_out, gate));
            }
            (KdKind::Kl, Some(TeacherRef::Logits(t_store))) => {
                let t_out = teacher_forward(wave.view(), t_store, cfg)?;
                let gate = if rc.augment_extend_kd { st.keep.as_ref() } else { None };
                let (t_emb, _) = pool_forward(&masked(&t_out, gate), t_store, head)?;
                let t_embs =
                    teacher_embs.get_or_insert_with(|| Array2::zeros((b, head.embed_dim)));
                t_embs.row_mut(row).assign(&t_emb);
            }
            (kind, _) => {
                return Err(Error::Config(format!(
                    "step wants {kind:?} distillation but no matching teacher was supplied"
                )))
            }
        }
    }

    // --- batch-level losses ---
    let mut sv_loss = None;
    let mut train_acc = None;
    let mut kd_loss = None;
    let mut d_embs: Option<Array2<f64>> = None;
    let mut kd_grads: Vec<Array2<f64>> = Vec::new();

    if spec.sv {
        let e = embs.as_ref().expect("sv step pooled embeddings");
        let (loss, acc, cache) = aam_forward(e, &labels, student, head)?;
        sv_loss = Some(loss);
        train_acc = Some(acc);
        let d = aam_backward(&cache, head, rc.loss.sv_scale, grads)?;
        d_embs = Some(d);
    }

    match spec.kd {
        KdKind::None => {}
        KdKind::Mse => {
            let (loss, g) = kd_mse(&kd_student, &kd_teacher, &rc.loss)?;
            kd_loss = Some(loss);
            kd_grads = g;
        }
        KdKind::Kl => {
            let e = embs.as_ref().expect("kl step pooled embeddings");
            let t = teacher_embs.as_ref().expect("kl step teacher embeddings");
            let (s_logits, s_cos) = cos_logits_forward(e, student, head)?;
            let t_store = match teacher {
                Some(TeacherRef::Logits(s)) => s,
                _ => unreachable!("checked per sample"),
            };
            let (t_logits, _) = cos_logits_forward(t, t_store, head)?;
            let (loss, d_logits) = kl_kd_loss(&s_logits, &t_logits)?;
            kd_loss = Some(loss);
            // margin-free accuracy from the student's own logits
            let mut correct = 0usize;
            for (i, &y) in labels.iter().enumerate() {
                let row = s_logits.row(i);
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
            train_acc = Some(correct as f64 / b as f64);
            let d = cos_logits_backward(&d_logits, &s_cos, head, grads);
            d_embs = Some(match d_embs {
                Some(prev) => prev + d,
                None => d,
            });
        }
    }

    let joint = joint_loss(kd_loss.unwrap_or(0.0), sv_loss.unwrap_or(0.0), &rc.loss)?;

    // --- backward, sample by sample in batch order ---
    for (row, st) in states.iter().enumerate() {
        // Pool backward also accumulates head.proj grads, so it runs even in
        // head-only phases.
        let d_main_from_pool: Option<Array2<f64>> = match (&st.pool, &d_embs) {
            (Some(cache), Some(d)) => {
                let d_feats = pool_backward(d.row(row), cache, student, head, grads)?;
                Some(match &st.keep {
                    Some(k) => d_feats * k,
                    None => d_feats,
                })
            }
            _ => None,
        };
        if spec.head_only {
            continue;
        }

        let d_kd = if spec.kd == KdKind::Mse { Some(&kd_grads[row]) } else { None };

        let mut d_feats: Option<Array2<f64>> = None;
        match (&st.kd_caches, d_kd) {
            (Some(caches), Some(d)) => {
                // Dual path: KD gradient descends the plain path.
                let df = backward_path(d, caches, student, cfg, None, grads)?;
                d_feats = Some(df);
            }
            _ => {}
        }

        // Main path: pool gradient plus (in single-path setups) the KD term.
        let mut d_main = d_main_from_pool;
        if st.kd_caches.is_none() {
            if let Some(d) = d_kd {
                d_main = Some(match d_main {
                    Some(m) => m + d,
                    None => d.clone(),
                });
            }
        }
        if let Some(dm) = d_main {
            let df = backward_path(
                &dm,
                &st.main_caches,
                student,
                cfg,
                st.adapters.as_deref(),
                grads,
            )?;
            d_feats = Some(match d_feats {
                Some(prev) => prev + df,
                None => df,
            });
        }
        if let Some(df) = d_feats {
            cnn_backward(&df, &st.cnn_cache, student, cfg, grads)?;
        }
    }

    Ok(StepOutcome {
        kd_loss,
        sv_loss,
        joint_loss: joint,
        train_acc,
        grad_classifier: grads.norm_where(|n| {
            matches!(super::adam::group_of(n), super::adam::Group::Classifier)
        }),
        grad_backbone: grads
            .norm_where(|n| matches!(super::adam::group_of(n), super::adam::Group::Backbone)),
        grad_adapter: grads
            .norm_where(|n| matches!(super::adam::group_of(n), super::adam::Group::Adapter)),
    })
}
