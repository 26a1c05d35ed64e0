//! Corpus synthesis, disk formats, augmentation, trial lists, and the
//! deterministic epoch-order shuffle.

pub mod augment;
pub mod corpus;
pub mod trials;

pub use augment::{add_noise, crop_random, spec_augment, spec_augment_batch, NoiseParams, SpecAugParams};
pub use corpus::{export_corpus, load_corpus, synth_corpus, Corpus, SynthSpec, Utterance};
pub use trials::{gen_trials, load_trials, save_trials, Trial, TrialSet};

use crate::rng::{rng_from, stream};
use rand::seq::SliceRandom;

/// Deterministic permutation of `0..n` for one training epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[stream::BATCH_ORDER, epoch]));
    order
}
