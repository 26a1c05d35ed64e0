//! Student construction from a pretrained teacher (bit-exact prefix copy of
//! the backbone) and selective re-initialization by name pattern.

use crate::config::{ModelConfig, SpeakerHeadConfig};
use crate::error::{Error, Result};
use crate::model::{init_entry, topology, validate_store};
use crate::store::{ParameterStore, Role};

/// Build a student store: CNN layers and the first `n_layers_student`
/// encoder layers are copied bit-exactly from the teacher; the head and
/// (optionally) adapters are drawn fresh from the student seed.
pub fn init_student_from_teacher(
    teacher: &ParameterStore,
    cfg: &ModelConfig,
    head: &SpeakerHeadConfig,
    seed: u64,
    with_adapters: bool,
) -> Result<ParameterStore> {
    cfg.validate()?;
    head.validate()?;
    validate_store(teacher, cfg, None, Role::Teacher)?;
    let entries = topology(cfg, Some(head), cfg.n_layers_student, with_adapters, false);
    let mut store = ParameterStore::new(seed);
    for (name, shape) in &entries {
        if name.starts_with("cnn.") || name.starts_with("encoder.") {
            let src = teacher.get(name)?;
            if src.shape() != shape.as_slice() {
                return Err(Error::shape(name, format!("{shape:?}"), format!("{:?}", src.shape())));
            }
            store.insert(name.clone(), src.clone());
        } else {
            store.insert(name.clone(), init_entry(name, shape, cfg, seed));
        }
    }
    Ok(store)
}

/// Build a tuned-teacher store: every teacher entry copied bit-exactly plus
/// a fresh head drawn from `seed`.
pub fn init_tuned_teacher_from_teacher(
    teacher: &ParameterStore,
    cfg: &ModelConfig,
    head: &SpeakerHeadConfig,
    seed: u64,
) -> Result<ParameterStore> {
    cfg.validate()?;
    head.validate()?;
    validate_store(teacher, cfg, None, Role::Teacher)?;
    let entries = topology(cfg, Some(head), cfg.n_layers_teacher, false, false);
    let mut store = ParameterStore::new(seed);
    for (name, shape) in &entries {
        if name.starts_with("head.") {
            store.insert(name.clone(), init_entry(name, shape, cfg, seed));
        } else {
            let src = teacher.get(name)?;
            if src.shape() != shape.as_slice() {
                return Err(Error::shape(name, format!("{shape:?}"), format!("{:?}", src.shape())));
            }
            store.insert(name.clone(), src.clone());
        }
    }
    Ok(store)
}

/// `*`-wildcard match over full entry names (no implicit anchoring beyond
/// the ends of the pattern).
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    if !name.starts_with(parts[0]) {
        return false;
    }
    let mut pos = parts[0].len();
    for part in &parts[1..parts.len() - 1] {
        if part.is_empty() {
            continue;
        }
        match name[pos..].find(part) {
            Some(i) => pos += i + part.len(),
            None => return false,
        }
    }
    let last = parts[parts.len() - 1];
    last.is_empty() || (name.len() >= pos + last.len() && name.ends_with(last))
}

/// Re-draw every entry whose name matches `pattern` exactly as construction
/// would have drawn it under `seed`. Matching nothing is an error.
pub fn init_random(pattern: &str, store: &mut ParameterStore, cfg: &ModelConfig, seed: u64) -> Result<usize> {
    let targets: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|(name, _)| glob_match(pattern, name))
        .map(|(name, arr)| (name.clone(), arr.shape().to_vec()))
        .collect();
    if targets.is_empty() {
        return Err(Error::Config(format!("pattern `{pattern}` matches no parameters")));
    }
    let n = targets.len();
    for (name, shape) in targets {
        let fresh = init_entry(&name, &shape, cfg, seed);
        store.insert(name, fresh);
    }
    Ok(n)
}

/// Layer names eligible for copy given teacher and student depths (used by
/// tests and reporting).
pub fn copied_encoder_layers(cfg: &ModelConfig) -> impl Iterator<Item = usize> {
    1..=cfg.n_layers_student
}
