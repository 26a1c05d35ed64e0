//! Verification trial lists: `<label> <enroll_id> <test_id>` lines, parsing,
//! serialization, and seeded generation from an evaluation corpus.

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

/// Tag for the trial-sampling random stream.
pub const TRIALS_STREAM: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    /// 1 = same speaker (target), 0 = different speakers (nontarget).
    pub label: u8,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub records: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every id must resolve and both labels must occur (EER needs both).
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        let mut saw = [false, false];
        for t in &self.records {
            corpus.by_id(&t.enroll)?;
            corpus.by_id(&t.test)?;
            saw[t.label as usize] = true;
        }
        if !(saw[0] && saw[1]) {
            return Err(Error::Data(
                "trial set needs at least one target and one nontarget".into(),
            ));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.records {
            out.push_str(&format!("{} {} {}\n", t.label, t.enroll, t.test));
        }
        out
    }
}

pub fn load_trials(path: &Path) -> Result<TrialSet> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("trial line needs `label enroll test`, got `{line}`"),
            });
        }
        let label = match parts[0] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        records.push(Trial {
            label,
            enroll: parts[1].to_string(),
            test: parts[2].to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no trials in {}", path.display())));
    }
    Ok(TrialSet { records })
}

pub fn save_trials(set: &TrialSet, path: &Path) -> Result<()> {
    std::fs::write(path, set.render()).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Sample a balanced-ish trial list: same-speaker pairs as targets and
/// cross-speaker pairs as nontargets, deterministically from the seed.
pub fn gen_trials(
    corpus: &Corpus,
    n_targets: usize,
    n_nontargets: usize,
    seed: u64,
) -> Result<TrialSet> {
    if n_targets == 0 || n_nontargets == 0 {
        return Err(Error::Config("need at least one trial of each label".into()));
    }
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for u in &corpus.utterances {
        by_speaker.entry(&u.speaker).or_default().push(&u.id);
    }
    let speakers: Vec<&str> = by_speaker.keys().copied().collect();
    if speakers.len() < 2 {
        return Err(Error::Data("nontarget trials need at least 2 speakers".into()));
    }
    let mut target_pool: Vec<(String, String)> = Vec::new();
    for ids in by_speaker.values() {
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                target_pool.push((ids[i].to_string(), ids[j].to_string()));
            }
        }
    }
    if target_pool.is_empty() {
        return Err(Error::Data(
            "target trials need a speaker with at least 2 utterances".into(),
        ));
    }
    let mut rng = rng_from(seed, &[TRIALS_STREAM]);
    target_pool.shuffle(&mut rng);
    let mut records = Vec::with_capacity(n_targets + n_nontargets);
    for k in 0..n_targets {
        let (e, t) = &target_pool[k % target_pool.len()];
        records.push(Trial { label: 1, enroll: e.clone(), test: t.clone() });
    }
    for _ in 0..n_nontargets {
        let a = rng.gen_range(0..speakers.len());
        let mut b = rng.gen_range(0..speakers.len() - 1);
        if b >= a {
            b += 1;
        }
        let ea = &by_speaker[speakers[a]];
        let eb = &by_speaker[speakers[b]];
        let e = ea[rng.gen_range(0..ea.len())];
        let t = eb[rng.gen_range(0..eb.len())];
        records.push(Trial { label: 0, enroll: e.to_string(), test: t.to_string() });
    }
    Ok(TrialSet { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{synth_corpus, SynthSpec};

    fn corpus() -> Corpus {
        synth_corpus(
            &SynthSpec { n_speakers: 3, utts_per_speaker: 3, seconds: 0.1, sample_rate: 4000 },
            9,
        )
        .unwrap()
    }

    #[test]
    fn parse_format_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "1 spk0_u1 spk0_u2\n0 spk0_u1 spk1_u0\n").unwrap();
        let set = load_trials(&path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(
            set.records[0],
            Trial { label: 1, enroll: "spk0_u1".into(), test: "spk0_u2".into() }
        );
        assert_eq!(set.records[1].label, 0);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "1 a b\n2 c d\n").unwrap();
        let err = load_trials(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::write(&path, "1 a\n").unwrap();
        let err = load_trials(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn empty_file_is_no_trials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "").unwrap();
        let err = load_trials(&path).unwrap_err();
        assert!(err.to_string().contains("no trials"), "{err}");
    }

    #[test]
    fn twenty_line_round_trip_is_byte_identical() {
        let c = corpus();
        let set = gen_trials(&c, 10, 10, 4).unwrap();
        assert_eq!(set.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        save_trials(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let reparsed = load_trials(&path).unwrap();
        save_trials(&reparsed, &path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
        assert_eq!(set, reparsed);
    }

    #[test]
    fn generated_trials_have_correct_labels_and_resolve() {
        let c = corpus();
        let set = gen_trials(&c, 7, 9, 11).unwrap();
        set.validate_against(&c).unwrap();
        for t in &set.records {
            let same = c.by_id(&t.enroll).unwrap().speaker == c.by_id(&t.test).unwrap().speaker;
            assert_eq!(t.label == 1, same, "{t:?}");
        }
        assert_eq!(set.records.iter().filter(|t| t.label == 1).count(), 7);
        // deterministic
        let again = gen_trials(&c, 7, 9, 11).unwrap();
        assert_eq!(set, again);
        let other = gen_trials(&c, 7, 9, 12).unwrap();
        assert_ne!(set, other);
    }

    #[test]
    fn validation_flags_unresolvable_and_single_label() {
        let c = corpus();
        let set = TrialSet {
            records: vec![Trial { label: 1, enroll: "ghost".into(), test: "spk0_u0".into() }],
        };
        assert!(set.validate_against(&c).is_err());
        let set = TrialSet {
            records: vec![Trial { label: 1, enroll: "spk0_u0".into(), test: "spk0_u1".into() }],
        };
        let err = set.validate_against(&c).unwrap_err();
        assert!(err.to_string().contains("nontarget"), "{err}");
    }

    #[test]
    fn degenerate_corpora_rejected() {
        let c = corpus();
        let single: Corpus = Corpus {
            sample_rate: c.sample_rate,
            utterances: c.utterances.iter().filter(|u| u.speaker == "spk0").cloned().collect(),
        };
        assert!(gen_trials(&single, 1, 1, 0).is_err());
        let one_each: Corpus = Corpus {
            sample_rate: c.sample_rate,
            utterances: c
                .utterances
                .iter()
                .filter(|u| u.id.ends_with("u0"))
                .cloned()
                .collect(),
        };
        assert!(gen_trials(&one_each, 1, 1, 0).is_err());
    }
}
