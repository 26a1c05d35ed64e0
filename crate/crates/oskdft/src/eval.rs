//! Evaluation protocol: multi-segment embedding extraction, cosine trial
//! scoring, and exact equal-error-rate computation.
//!
//! The EER threshold convention is pinned: a trial is accepted iff
//! score ≥ t, FRR(t) is the fraction of target scores < t, FAR(t) the
//! fraction of nontarget scores ≥ t, thresholds sweep all distinct scores
//! plus a virtual +∞, and the crossing is linearly interpolated.

use crate::config::{ModelConfig, SpeakerHeadConfig};
use crate::data::corpus::{Corpus, Utterance};
use crate::data::trials::TrialSet;
use crate::error::{Error, Result};
use crate::head::extract_embedding;
use crate::store::ParameterStore;
use ndarray::Array1;
use std::collections::BTreeMap;
use std::path::Path;

/// Evaluation segment length in seconds.
pub const SEGMENT_SECONDS: f64 = 3.0;

/// Start offsets of five windows evenly spaced over `[0, len - seg]`.
pub fn segment_starts(len: usize, seg: usize) -> Vec<usize> {
    let span = (len - seg) as f64;
    (0..5)
        .map(|i| (i as f64 * span / 4.0).round() as usize)
        .collect()
}

/// Six embeddings per utterance: the full waveform plus five 3-second
/// windows. Shorter utterances fall back to the full embedding only.
pub fn segment_embeddings(
    u: &Utterance,
    rate: u32,
    store: &ParameterStore,
    cfg: &ModelConfig,
    head: &SpeakerHeadConfig,
) -> Result<Vec<Array1<f64>>> {
    let seg = (SEGMENT_SECONDS * rate as f64).round() as usize;
    let full = extract_embedding(u.samples.view(), store, cfg, head)?;
    if u.samples.len() < seg {
        return Ok(vec![full]);
    }
    let mut out = Vec::with_capacity(6);
    out.push(full);
    for start in segment_starts(u.samples.len(), seg) {
        let window = u.samples.slice(ndarray::s![start..start + seg]);
        out.push(extract_embedding(window, store, cfg, head)?);
    }
    Ok(out)
}

/// Plain dot product; inputs are unit-normalized upstream.
pub fn cosine_score(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b)
}

/// Mean cosine over the Cartesian product of the two embedding lists.
pub fn trial_score(enroll: &[Array1<f64>], test: &[Array1<f64>]) -> f64 {
    let mut acc = 0.0;
    for e in enroll {
        for t in test {
            acc += cosine_score(e, t);
        }
    }
    acc / (enroll.len() * test.len()) as f64
}

/// Aligned trial scores and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    /// 1 = target (same speaker), 0 = nontarget.
    pub labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                component: "trial scores".into(),
                detail: "non-finite score".into(),
            });
        }
        Ok(Self { scores, labels })
    }
}

/// Exact EER under the pinned convention. Errors if either class is absent.
pub fn compute_eer(set: &ScoreSet) -> Result<f64> {
    let mut targets: Vec<f64> = Vec::new();
    let mut nontargets: Vec<f64> = Vec::new();
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match l {
            1 => targets.push(s),
            0 => nontargets.push(s),
            other => return Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Data(
            "EER needs both target and nontarget scores".into(),
        ));
    }
    targets.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    nontargets.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;

    // distinct thresholds ascending; +∞ guarantees a final (FRR=1, FAR=0)
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let frr_at = |t: f64| targets.partition_point(|&s| s < t) as f64 / nt;
    let far_at = |t: f64| (nontargets.len() - nontargets.partition_point(|&s| s < t)) as f64 / nn;

    let mut prev: Option<(f64, f64)> = None; // (frr, d)
    for &t in &thresholds {
        let frr = frr_at(t);
        let d = far_at(t) - frr;
        if d == 0.0 {
            return Ok(frr);
        }
        if d < 0.0 {
            // first sign change; FAR-FRR is non-increasing in t
            return Ok(match prev {
                Some((frr0, d0)) => {
                    let alpha = d0 / (d0 - d);
                    frr0 + alpha * (frr - frr0)
                }
                None => frr,
            });
        }
        prev = Some((frr, d));
    }
    unreachable!("virtual +inf threshold always yields FAR - FRR = -1");
}

/// Score every trial with 6×6 cross-segment averaging; embeddings are
/// computed once per distinct utterance id.
pub fn score_trials(
    corpus: &Corpus,
    trials: &TrialSet,
    store: &ParameterStore,
    cfg: &ModelConfig,
    head: &SpeakerHeadConfig,
) -> Result<ScoreSet> {
    trials.validate_against(corpus)?;
    let mut cache: BTreeMap<String, Vec<Array1<f64>>> = BTreeMap::new();
    for t in &trials.records {
        for id in [t.enroll.as_str(), t.test.as_str()] {
            if !cache.contains_key(id) {
                let u = corpus.by_id(id)?;
                let embs = segment_embeddings(u, corpus.sample_rate, store, cfg, head)?;
                cache.insert(id.to_string(), embs);
            }
        }
    }
    let mut scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in &trials.records {
        scores.push(trial_score(&cache[t.enroll.as_str()], &cache[t.test.as_str()]));
        labels.push(t.label);
    }
    ScoreSet::new(scores, labels)
}

/// Score file: one `<enroll_id> <test_id> <score %.6f>` line per trial.
pub fn write_scores(trials: &TrialSet, set: &ScoreSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (t, s) in trials.records.iter().zip(&set.scores) {
        out.push_str(&format!("{} {} {:.6}\n", t.enroll, t.test, s));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Machine-readable EER report (key-value lines).
pub fn render_eer_report(eer: f64, set: &ScoreSet) -> String {
    let targets = set.labels.iter().filter(|&&l| l == 1).count();
    format!(
        "eer {}\ntrials {}\ntargets {}\nnontargets {}\n",
        eer,
        set.labels.len(),
        targets,
        set.labels.len() - targets
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadKind;
    use crate::data::corpus::{synth_corpus, SynthSpec};
    use crate::model::build_random_store;
    use crate::rng::rng_from;
    use crate::store::Role;
    use ndarray::arr1;
    use rand::Rng;

    fn mcfg() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            n_layers_teacher: 2,
            n_layers_student: 1,
            n_heads: 2,
            ffn_mult: 2,
            adapter_rank: 2,
            cnn_strides: vec![32, 25],
            sample_dim: 1,
            adapter_random_up: false,
        }
    }

    fn hcfg() -> SpeakerHeadConfig {
        SpeakerHeadConfig {
            head_kind: HeadKind::Linear,
            embed_dim: 3,
            n_speakers: 4,
            margin: 0.15,
            scale: 20.0,
        }
    }

    /// Independent per-threshold recount, literal loops.
    fn brute_force_eer(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        let point = |t: f64| {
            let mut fr = 0usize;
            let mut nt = 0usize;
            let mut fa = 0usize;
            let mut nn = 0usize;
            for (&s, &l) in scores.iter().zip(labels) {
                if l == 1 {
                    nt += 1;
                    if s < t {
                        fr += 1;
                    }
                } else {
                    nn += 1;
                    if s >= t {
                        fa += 1;
                    }
                }
            }
            (fr as f64 / nt as f64, fa as f64 / nn as f64)
        };
        let mut prev: Option<(f64, f64)> = None;
        for &t in &thresholds {
            let (frr, far) = point(t);
            let d = far - frr;
            if d == 0.0 {
                return frr;
            }
            if d < 0.0 {
                return match prev {
                    Some((frr0, d0)) => frr0 + d0 / (d0 - d) * (frr - frr0),
                    None => frr,
                };
            }
            prev = Some((frr, d));
        }
        unreachable!()
    }

    #[test]
    fn perfect_separation_is_zero() {
        let s = ScoreSet::new(vec![0.9, 0.8, 0.1, 0.2], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
    }

    #[test]
    fn hand_worked_crossing() {
        let s = ScoreSet::new(vec![0.9, 0.8, 0.85, 0.2], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(compute_eer(&s).unwrap(), 0.5);
    }

    #[test]
    fn fully_swapped_is_one() {
        // all nontargets above all targets
        let s = ScoreSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(compute_eer(&s).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = ScoreSet::new(vec![0.1, 0.2], vec![1, 1]).unwrap();
        assert!(compute_eer(&s).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = rng_from(7, &[800]);
        for trial in 0..200 {
            let nt = rng.gen_range(1..20);
            let nn = rng.gen_range(1..20);
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..nt {
                // coarse grid provokes ties
                scores.push((rng.gen_range(-5i32..6) as f64) / 5.0 + 0.1);
                labels.push(1u8);
            }
            for _ in 0..nn {
                scores.push((rng.gen_range(-5i32..6) as f64) / 5.0);
                labels.push(0u8);
            }
            let set = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let got = compute_eer(&set).unwrap();
            let want = brute_force_eer(&scores, &labels);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
            assert!((0.0..=1.0).contains(&got));

            // rank invariance under a strictly increasing transform
            let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp()).collect();
            let wset = ScoreSet::new(warped, labels.clone()).unwrap();
            assert!((compute_eer(&wset).unwrap() - got).abs() < 1e-9);

            // label-swap + score-negation symmetry
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flip: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let nset = ScoreSet::new(neg, flip).unwrap();
            assert!((compute_eer(&nset).unwrap() - got).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn shuffled_labels_give_half() {
        let mut rng = rng_from(11, &[801]);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        let set = ScoreSet::new(scores, labels).unwrap();
        let eer = compute_eer(&set).unwrap();
        assert!((eer - 0.5).abs() < 0.05, "eer {eer}");
    }

    #[test]
    fn cosine_hand_case() {
        let a = arr1(&[0.6, 0.8]);
        let b = arr1(&[0.8, 0.6]);
        assert!((cosine_score(&a, &b) - 0.96).abs() < 1e-15);
        assert!((cosine_score(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&arr1(&[1.0, 0.0]), &arr1(&[0.0, 1.0])), 0.0);
    }

    #[test]
    fn trial_score_matches_loop_oracle() {
        let enroll: Vec<Array1<f64>> = (0..2).map(|i| arr1(&[i as f64, 1.0, 0.5])).collect();
        let test: Vec<Array1<f64>> = (0..3).map(|i| arr1(&[0.2, i as f64, -0.5])).collect();
        let got = trial_score(&enroll, &test);
        let mut want = 0.0;
        for e in &enroll {
            for t in &test {
                want += e.dot(t);
            }
        }
        want /= 6.0;
        assert!((got - want).abs() < 1e-12);
        // singleton lists → plain cosine
        let single = trial_score(&enroll[..1], &test[..1]);
        assert_eq!(single, enroll[0].dot(&test[0]));
    }

    #[test]
    fn fifteen_second_starts() {
        let rate = 4000usize;
        assert_eq!(
            segment_starts(15 * rate, 3 * rate),
            vec![0, 3 * rate, 6 * rate, 9 * rate, 12 * rate]
        );
    }

    #[test]
    fn exactly_three_seconds_gives_six_equal_embeddings() {
        let c = mcfg();
        let h = hcfg();
        let store = build_random_store(&c, Some(&h), Role::Student, 3).unwrap();
        let corpus = synth_corpus(
            &SynthSpec { n_speakers: 2, utts_per_speaker: 1, seconds: 3.0, sample_rate: 4000 },
            5,
        )
        .unwrap();
        let embs = segment_embeddings(&corpus.utterances[0], 4000, &store, &c, &h).unwrap();
        assert_eq!(embs.len(), 6);
        for e in &embs[1..] {
            assert_eq!(e, &embs[0]);
        }
        // deterministic across calls
        let again = segment_embeddings(&corpus.utterances[0], 4000, &store, &c, &h).unwrap();
        assert_eq!(embs, again);
    }

    #[test]
    fn short_utterance_falls_back_to_full_only() {
        let c = mcfg();
        let h = hcfg();
        let store = build_random_store(&c, Some(&h), Role::Student, 3).unwrap();
        let corpus = synth_corpus(
            &SynthSpec { n_speakers: 2, utts_per_speaker: 1, seconds: 1.0, sample_rate: 4000 },
            5,
        )
        .unwrap();
        let embs = segment_embeddings(&corpus.utterances[0], 4000, &store, &c, &h).unwrap();
        assert_eq!(embs.len(), 1);
    }

    #[test]
    fn score_trials_end_to_end_and_score_file_format() {
        let c = mcfg();
        let h = hcfg();
        let store = build_random_store(&c, Some(&h), Role::Student, 3).unwrap();
        let corpus = synth_corpus(
            &SynthSpec { n_speakers: 3, utts_per_speaker: 2, seconds: 1.0, sample_rate: 4000 },
            5,
        )
        .unwrap();
        let trials = crate::data::trials::gen_trials(&corpus, 3, 3, 1).unwrap();
        let set = score_trials(&corpus, &trials, &store, &c, &h).unwrap();
        assert_eq!(set.scores.len(), 6);
        assert!(set.scores.iter().all(|s| (-1.0 - 1e-9..=1.0 + 1e-9).contains(s)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        write_scores(&trials, &set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let parts: Vec<&str> = first.split_whitespace().collect();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], trials.records[0].enroll);
        // %.6f: exactly six digits after the decimal point
        let frac = parts[2].rsplit('.').next().unwrap();
        assert_eq!(frac.len(), 6);
        let report = render_eer_report(0.25, &set);
        assert!(report.contains("eer 0.25\n"));
        assert!(report.contains("trials 6\n"));
        assert!(report.contains("targets 3\n"));
    }
}
