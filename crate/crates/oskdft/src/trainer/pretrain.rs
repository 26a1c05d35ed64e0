//! Self-supervised teacher pretraining: masked-frame reconstruction.
//!
//! The CNN front-end stays frozen at its random initialization so the
//! reconstruction targets (its clean outputs) are stable; the encoder learns
//! to fill in masked frames. A fixed holdout (every fifth utterance) tracks
//! generalization and drives optional early stopping.

use ndarray::{Array1, Array2};

use crate::data::augment::crop_random;
use crate::data::corpus::{Corpus, Utterance};
use crate::data::epoch_order;
use crate::error::{Error, Result};
use crate::model::{
    backward_path, cnn_forward, forward_path, topology,
};
use crate::rng::{rng_from, stream};
use crate::store::{GradStore, ParameterStore};
use crate::trainer::adam::{Adam, GroupLrs};
use crate::trainer::config::RunConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One epoch of the pretraining log.
#[derive(Debug, Clone, Copy)]
pub struct PretrainRow {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Finished teacher; the pretraining-only entries are stripped.
    pub store: ParameterStore,
    /// Holdout loss before any update (present when epochs > 0).
    pub initial_holdout: Option<f64>,
    pub rows: Vec<PretrainRow>,
    /// True when the holdout plateau ended the run before the full budget.
    pub stopped_early: bool,
}

/// Indices of the held-out utterances: every fifth one, in corpus order.
pub fn holdout_indices(n: usize) -> Vec<usize> {
    (0..n).filter(|i| i % 5 == 4).collect()
}

/// Draw mask spans until at least `ceil(frac * t)` rows are covered.
/// Returns the row mask (true = masked).
fn draw_mask(t: usize, span: usize, frac: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if span == 0 || span > t {
        return Err(Error::Config(format!(
            "mask span {span} does not fit {t} frames"
        )));
    }
    let needed = ((frac * t as f64).ceil() as usize).clamp(1, t);
    let mut mask = vec![false; t];
    let mut covered = 0usize;
    for _ in 0..10_000 {
        if covered >= needed {
            break;
        }
        let start = rng.gen_range(0..=t - span);
        for m in mask.iter_mut().skip(start).take(span) {
            if !*m {
                *m = true;
                covered += 1;
            }
        }
    }
    Ok(mask)
}

/// Masked-reconstruction loss for one waveform; optionally backpropagates.
/// Returns (sum of squared errors over masked elements, masked-element count).
fn recon_sample(
    wave: ndarray::ArrayView1<f64>,
    mask_rng: &mut ChaCha8Rng,
    store: &ParameterStore,
    rc: &RunConfig,
    grads: Option<&mut GradStore>,
) -> Result<(f64, usize, Option<PendingBackward>)> {
    let cfg = &rc.model;
    let (feats, _cnn_cache) = cnn_forward(wave, store, cfg)?;
    let (t, d) = feats.dim();
    let mask = draw_mask(t, rc.pretrain_mask_span, rc.pretrain_mask_frac, mask_rng)?;

    let mask_embed = store.vec1("pretrain.mask_embed")?;
    let mut corrupted = feats.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            corrupted.row_mut(i).assign(&mask_embed);
        }
    }
    let (h, caches) = forward_path(&corrupted, store, cfg, cfg.n_layers_teacher, None)?;
    let w = store.mat("pretrain.recon.w")?;
    let b = store.vec1("pretrain.recon.b")?;
    let recon = h.dot(&w) + &b;

    let mut sq = 0.0;
    let mut count = 0usize;
    let mut diff = Array2::zeros((t, d));
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for j in 0..d {
                let e = recon[[i, j]] - feats[[i, j]];
                sq += e * e;
                diff[[i, j]] = e;
            }
            count += d;
        }
    }
    let pending = grads.map(|_| PendingBackward { h, caches, diff, mask });
    Ok((sq, count, pending))
}

/// Deferred backward state: the gradient scale (1 / total masked elements)
/// is only known once the whole batch has been seen.
struct PendingBackward {
    h: Array2<f64>,
    caches: Vec<crate::model::LayerCache>,
    diff: Array2<f64>,
    mask: Vec<bool>,
}

fn backward_sample(
    p: PendingBackward,
    scale: f64,
    store: &ParameterStore,
    rc: &RunConfig,
    grads: &mut GradStore,
) -> Result<()> {
    let cfg = &rc.model;
    let w = store.mat("pretrain.recon.w")?;
    let d_recon = p.diff * (2.0 * scale);
    grads.add("pretrain.recon.w", p.h.t().dot(&d_recon).into_dyn());
    let db: Array1<f64> = d_recon.sum_axis(ndarray::Axis(0));
    grads.add("pretrain.recon.b", db.into_dyn());
    let d_h = d_recon.dot(&w.t());
    let d_corrupted = backward_path(&d_h, &p.caches, store, cfg, None, grads)?;
    // Masked rows were the mask embedding; unmasked rows come from the frozen
    // CNN, so their gradient is dropped.
    let d = d_corrupted.dim().1;
    let mut d_embed = Array1::zeros(d);
    for (i, &m) in p.mask.iter().enumerate() {
        if m {
            d_embed += &d_corrupted.row(i);
        }
    }
    grads.add("pretrain.mask_embed", d_embed.into_dyn());
    Ok(())
}

fn holdout_loss(
    corpus: &Corpus,
    holdout: &[usize],
    store: &ParameterStore,
    rc: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for &i in holdout {
        let u: &Utterance = &corpus.utterances[i];
        // Fixed tags (epoch slot 0) keep the holdout masking identical across
        // epochs, so the curve is comparable.
        let mut rng = rng_from(seed, &[stream::MASKING, 0, i as u64]);
        let (s, c, _) = recon_sample(u.samples.view(), &mut rng, store, rc, None)?;
        sq += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::Data("holdout produced no masked frames".into()));
    }
    Ok(sq / count as f64)
}

/// Run the full pretraining loop and return the finished teacher.
pub fn pretrain_teacher(corpus: &Corpus, rc: &RunConfig, seed: u64) -> Result<PretrainOutcome> {
    rc.model.validate()?;
    let cfg = &rc.model;
    let entries = topology(cfg, None, cfg.n_layers_teacher, false, true);
    let mut store = crate::model::build_store(&entries, cfg, seed);

    let strip = |mut store: ParameterStore| -> Result<ParameterStore> {
        let names: Vec<String> =
            store.names_with_prefix("pretrain.").cloned().collect();
        for n in names {
            store.remove(&n);
        }
        crate::model::validate_store(&store, cfg, None, crate::store::Role::Teacher)?;
        Ok(store)
    };

    if rc.epochs == 0 {
        return Ok(PretrainOutcome {
            store: strip(store)?,
            initial_holdout: None,
            rows: Vec::new(),
            stopped_early: false,
        });
    }

    let n = corpus.utterances.len();
    let holdout = holdout_indices(n);
    let train: Vec<usize> = (0..n).filter(|i| i % 5 != 4).collect();
    if holdout.is_empty() || train.is_empty() {
        return Err(Error::Data(format!(
            "pretraining needs at least 5 utterances to split off a holdout, got {n}"
        )));
    }

    let initial = holdout_loss(corpus, &holdout, &store, rc, seed)?;
    let mut adam = Adam::new();
    let frozen = |name: &str| name.starts_with("cnn.");
    let mut rows = Vec::new();
    let mut best = initial;
    let mut since_best: u64 = 0;
    let mut stopped_early = false;

    for epoch in 1..=rc.epochs {
        let lr = rc.schedule.lr_classifier(epoch)?;
        let order = epoch_order(train.len(), seed, epoch);
        let mut epoch_sq = 0.0;
        let mut epoch_count = 0usize;

        for chunk in order.chunks(rc.batch_size) {
            let mut pending = Vec::with_capacity(chunk.len());
            let mut batch_sq = 0.0;
            let mut batch_count = 0usize;
            let mut grads = GradStore::new();
            for &pos in chunk {
                let utt = train[pos];
                let u = &corpus.utterances[utt];
                let mut crop_rng = rng_from(seed, &[stream::CROP, epoch, pos as u64]);
                let wave = crop_random(u, rc.crop_seconds, corpus.sample_rate, &mut crop_rng)?;
                let mut mask_rng = rng_from(seed, &[stream::MASKING, epoch, pos as u64]);
                let (sq, c, p) =
                    recon_sample(wave.view(), &mut mask_rng, &store, rc, Some(&mut grads))?;
                batch_sq += sq;
                batch_count += c;
                pending.push(p.expect("grads requested"));
            }
            if batch_count == 0 {
                return Err(Error::Data("batch produced no masked frames".into()));
            }
            let scale = 1.0 / batch_count as f64;
            for p in pending {
                backward_sample(p, scale, &store, rc, &mut grads)?;
            }
            adam.step(&mut store, &grads, &GroupLrs::uniform(lr), &frozen)?;
            epoch_sq += batch_sq;
            epoch_count += batch_count;
        }

        let train_loss = epoch_sq / epoch_count as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                component: format!("pretrain epoch {epoch}"),
                detail: format!("train loss {train_loss}"),
            });
        }
        let hold = holdout_loss(corpus, &holdout, &store, rc, seed)?;
        rows.push(PretrainRow { epoch, lr, train_loss, holdout_loss: hold });

        if hold < best {
            best = hold;
            since_best = 0;
        } else {
            since_best += 1;
            if rc.pretrain_patience > 0 && since_best >= rc.pretrain_patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(PretrainOutcome {
        store: strip(store)?,
        initial_holdout: Some(initial),
        rows,
        stopped_early,
    })
}

/// CSV view of the pretraining log.
pub fn pretrain_rows_csv(initial: Option<f64>, rows: &[PretrainRow]) -> String {
    let mut out = String::from("epoch,lr,train_loss,holdout_loss\n");
    if let Some(h) = initial {
        out.push_str(&format!("0,,,{h}\n"));
    }
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.holdout_loss));
    }
    out
}
