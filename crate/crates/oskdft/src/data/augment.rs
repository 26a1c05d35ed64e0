//! Training-time augmentation: random crops of waveforms, stripe masking of
//! encoder outputs, and a seeded additive-noise/random-gain stub.

use super::corpus::Utterance;
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Contiguous random window of exactly `seconds × rate` samples.
pub fn crop_random(
    u: &Utterance,
    seconds: f64,
    rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f64>> {
    let crop = (seconds * rate as f64).round() as usize;
    if crop == 0 {
        return Err(Error::Config(format!("crop of {seconds}s at {rate}/s is empty")));
    }
    let len = u.samples.len();
    if len < crop {
        return Err(Error::Data(format!(
            "utterance `{}` too short to crop: {len} < {crop} samples",
            u.id
        )));
    }
    let offset = rng.gen_range(0..=len - crop);
    Ok(u.samples.slice(ndarray::s![offset..offset + crop]).to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecAugParams {
    pub time_masks: usize,
    pub time_width: usize,
    pub chan_masks: usize,
    pub chan_width: usize,
}

impl SpecAugParams {
    pub fn disabled() -> Self {
        Self { time_masks: 0, time_width: 0, chan_masks: 0, chan_width: 0 }
    }
}

/// Zero out `time_masks` stripes of `time_width` frames and `chan_masks`
/// stripes of `chan_width` channels. Returns the masked copy plus the 0/1
/// keep-mask (needed to gate gradients on the way back). Unmasked elements
/// are bit-identical to the input.
pub fn spec_augment(
    features: &Array2<f64>,
    p: &SpecAugParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (t, d) = features.dim();
    if p.time_masks > 0 && p.time_width > t {
        return Err(Error::Config(format!(
            "time mask width {} exceeds {t} frames",
            p.time_width
        )));
    }
    if p.chan_masks > 0 && p.chan_width > d {
        return Err(Error::Config(format!(
            "channel mask width {} exceeds {d} channels",
            p.chan_width
        )));
    }
    let mut out = features.clone();
    let mut keep = Array2::ones((t, d));
    for _ in 0..p.time_masks {
        if p.time_width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t - p.time_width);
        out.slice_mut(ndarray::s![start..start + p.time_width, ..]).fill(0.0);
        keep.slice_mut(ndarray::s![start..start + p.time_width, ..]).fill(0.0);
    }
    for _ in 0..p.chan_masks {
        if p.chan_width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=d - p.chan_width);
        out.slice_mut(ndarray::s![.., start..start + p.chan_width]).fill(0.0);
        keep.slice_mut(ndarray::s![.., start..start + p.chan_width]).fill(0.0);
    }
    Ok((out, keep))
}

/// Batch-tensor form over `(batch, frames, d_model)`; each sample draws its
/// own stripes from the shared generator in batch order.
pub fn spec_augment_batch(
    features: &Array3<f64>,
    p: &SpecAugParams,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let mut out = features.clone();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        let (masked, _) = spec_augment(&sample.to_owned(), p, rng)?;
        sample.assign(&masked);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub snr_db: (f64, f64),
    pub gain: (f64, f64),
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { snr_db: (5.0, 20.0), gain: (0.8, 1.0) }
    }
}

/// Additive white noise at a drawn SNR followed by a drawn gain — the
/// desk-scale stand-in for room/music augmentation.
pub fn add_noise(wave: ArrayView1<f64>, p: &NoiseParams, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let snr_db = if p.snr_db.0 == p.snr_db.1 {
        p.snr_db.0
    } else {
        rng.gen_range(p.snr_db.0..p.snr_db.1)
    };
    let gain = if p.gain.0 == p.gain.1 {
        p.gain.0
    } else {
        rng.gen_range(p.gain.0..p.gain.1)
    };
    let n = wave.len();
    let power = wave.dot(&wave) / n as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise = normal_vec(n, rng);
    Array1::from_iter(
        wave.iter()
            .zip(noise)
            .map(|(&x, e)| (x + sigma * e) * gain),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from, stream, uniform_array};

    fn utt(n: usize) -> Utterance {
        Utterance {
            id: "u".into(),
            speaker: "s".into(),
            samples: Array1::linspace(0.0, 1.0, n),
        }
    }

    fn feats(t: usize, d: usize) -> Array2<f64> {
        // strictly positive so "changed" == "masked" in the counting oracle
        uniform_array(&[t, d], 0.5, &mut rng_from(3, &[stream::SPEC_AUGMENT, 77]))
            .mapv(|v| v.abs() + 0.1)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    #[test]
    fn crop_length_and_determinism() {
        let u = utt(8000);
        let mut rng = rng_from(1, &[stream::CROP]);
        let a = crop_random(&u, 0.5, 4000, &mut rng).unwrap();
        assert_eq!(a.len(), 2000);
        let b = crop_random(&u, 0.5, 4000, &mut rng_from(1, &[stream::CROP])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_length_crop_is_identity() {
        let u = utt(2000);
        for _ in 0..3 {
            let mut rng = rng_from(9, &[stream::CROP]);
            let c = crop_random(&u, 0.5, 4000, &mut rng).unwrap();
            assert_eq!(c, u.samples);
        }
        assert!(crop_random(&utt(1999), 0.5, 4000, &mut rng_from(9, &[0])).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 10k draws over a 4×-length utterance, 16 bins; chi-square test at
        // the 0.99 quantile of chi2(15) = 30.578
        let crop = 500usize;
        let u = utt(4 * crop);
        let span = 3 * crop + 1; // valid offsets 0..=3*crop
        let mut rng = rng_from(12345, &[stream::CROP]);
        let bins = 16usize;
        let mut counts = vec![0usize; bins];
        let draws = 10_000;
        for _ in 0..draws {
            let c = crop_random(&u, crop as f64 / 4000.0, 4000, &mut rng).unwrap();
            // recover the offset from the first sample (linspace is invertible)
            let first = c[0];
            let offset = (first * (u.samples.len() - 1) as f64).round() as usize;
            counts[offset * bins / span] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(stat < 30.578, "chi-square {stat} too large: {counts:?}");
    }

    #[test]
    fn zero_masks_identity() {
        let f = feats(10, 6);
        let (out, keep) = spec_augment(&f, &SpecAugParams::disabled(), &mut rng_from(1, &[1])).unwrap();
        assert_eq!(out, f);
        assert!(keep.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn full_time_mask_zeroes_everything() {
        let f = feats(10, 6);
        let p = SpecAugParams { time_masks: 1, time_width: 10, chan_masks: 0, chan_width: 0 };
        let (out, _) = spec_augment(&f, &p, &mut rng_from(1, &[2])).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_count_matches_inclusion_exclusion() {
        let (t, d) = (24usize, 12usize);
        let f = feats(t, d);
        let p = SpecAugParams { time_masks: 2, time_width: 5, chan_masks: 2, chan_width: 3 };
        for trial in 0..50u64 {
            let mut rng = rng_from(trial, &[stream::SPEC_AUGMENT]);
            let (out, keep) = spec_augment(&f, &p, &mut rng).unwrap();
            // reconstruct stripe unions from the keep-mask
            let t_masked: Vec<usize> = (0..t).filter(|&i| (0..d).all(|j| keep[[i, j]] == 0.0)).collect();
            let c_masked: Vec<usize> = (0..d)
                .filter(|&j| {
                    (0..t).filter(|i| !t_masked.contains(i)).all(|i| keep[[i, j]] == 0.0)
                        && t_masked.len() < t
                })
                .collect();
            let changed = out.iter().zip(f.iter()).filter(|(a, b)| a != b).count();
            let tz = t_masked.len();
            let cz = c_masked.len();
            assert_eq!(changed, tz * d + cz * t - tz * cz, "trial {trial}");
            // unmasked entries bit-identical
            for i in 0..t {
                for j in 0..d {
                    if keep[[i, j]] == 1.0 {
                        assert!(out[[i, j]].to_bits() == f[[i, j]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn oversize_width_is_an_error() {
        let f = feats(4, 4);
        let p = SpecAugParams { time_masks: 1, time_width: 5, chan_masks: 0, chan_width: 0 };
        assert!(spec_augment(&f, &p, &mut rng_from(1, &[3])).is_err());
        let p = SpecAugParams { time_masks: 0, time_width: 0, chan_masks: 1, chan_width: 5 };
        assert!(spec_augment(&f, &p, &mut rng_from(1, &[3])).is_err());
    }

    #[test]
    fn batch_variant_masks_each_sample_independently() {
        let mut batch = Array3::zeros((2, 10, 6));
        batch.index_axis_mut(Axis(0), 0).assign(&feats(10, 6));
        batch.index_axis_mut(Axis(0), 1).assign(&(feats(10, 6) * 2.0));
        let p = SpecAugParams { time_masks: 1, time_width: 3, chan_masks: 0, chan_width: 0 };
        let out = spec_augment_batch(&batch, &p, &mut rng_from(4, &[stream::SPEC_AUGMENT])).unwrap();
        for s in 0..2 {
            let sample = out.index_axis(Axis(0), s);
            let zero_rows = (0..10)
                .filter(|&i| (0..6).all(|j| sample[[i, j]] == 0.0))
                .count();
            assert_eq!(zero_rows, 3, "sample {s}");
        }
    }

    #[test]
    fn noise_hits_requested_snr_and_gain() {
        let wave = Array1::from_iter((0..8000).map(|t| (t as f64 * 0.37).sin() * 0.1));
        let p = NoiseParams { snr_db: (20.0, 20.0), gain: (1.0, 1.0) };
        let mut rng = rng_from(5, &[stream::NOISE]);
        let noisy = add_noise(wave.view(), &p, &mut rng);
        let sig_p = wave.dot(&wave) / wave.len() as f64;
        let diff = &noisy - &wave;
        let noise_p = diff.dot(&diff) / diff.len() as f64;
        let ratio = sig_p / noise_p;
        assert!((ratio.log10() * 10.0 - 20.0).abs() < 1.0, "snr {}", ratio.log10() * 10.0);
        // determinism
        let again = add_noise(wave.view(), &p, &mut rng_from(5, &[stream::NOISE]));
        assert_eq!(noisy, again);
        // pure gain
        let p2 = NoiseParams { snr_db: (300.0, 300.0), gain: (0.5, 0.5) };
        let halved = add_noise(wave.view(), &p2, &mut rng_from(5, &[stream::NOISE]));
        assert!((&halved - &(&wave * 0.5)).iter().all(|v| v.abs() < 1e-9));
    }
}
