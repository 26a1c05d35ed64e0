//! Network definition: parameter naming, topology, initialization, and the
//! forward/backward passes (CNN front-end, transformer encoder, adapters).

pub mod cnn;
pub mod encoder;
pub mod linalg;

pub use cnn::{cnn_backward, cnn_forward, frame_count, CnnCache};
pub use encoder::{
    backward_path, dual_path_forward, encoder_layer_backward, encoder_layer_forward, forward_path,
    AdapterWeights, DualPathOutput, DualPathSample, LayerCache,
};

use crate::config::{ModelConfig, SpeakerHeadConfig};
use crate::error::{Error, Result};
use crate::rng::{name_tag, rng_from, scaled_uniform, stream};
use crate::store::{ParameterStore, Role};
use ndarray::{ArrayD, IxDyn};

/// Dotted-path parameter names. Layer indices are 1-based.
pub mod names {
    pub fn cnn(layer: usize, leaf: &str) -> String {
        format!("cnn.{layer}.{leaf}")
    }
    pub fn enc(layer: usize, leaf: &str) -> String {
        format!("encoder.{layer}.{leaf}")
    }
    pub fn adapter(layer: usize, leaf: &str) -> String {
        format!("adapter.{layer}.{leaf}")
    }
}

/// Every (name, shape) pair a network with the given pieces must contain.
pub fn topology(
    cfg: &ModelConfig,
    head: Option<&SpeakerHeadConfig>,
    n_layers: usize,
    adapters: bool,
    pretrain_head: bool,
) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let mut out = Vec::new();
    for (i, &stride) in cfg.cnn_strides.iter().enumerate() {
        let layer = i + 1;
        let c_in = if i == 0 { cfg.sample_dim } else { d };
        out.push((names::cnn(layer, "conv.w"), vec![d, c_in, stride]));
        out.push((names::cnn(layer, "conv.b"), vec![d]));
        out.push((names::cnn(layer, "ln.g"), vec![d]));
        out.push((names::cnn(layer, "ln.b"), vec![d]));
    }
    for layer in 1..=n_layers {
        for leaf in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
            out.push((names::enc(layer, leaf), vec![d]));
        }
        for leaf in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            out.push((names::enc(layer, leaf), vec![d, d]));
        }
        for leaf in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            out.push((names::enc(layer, leaf), vec![d]));
        }
        out.push((names::enc(layer, "ffn.w1"), vec![d, f]));
        out.push((names::enc(layer, "ffn.b1"), vec![f]));
        out.push((names::enc(layer, "ffn.w2"), vec![f, d]));
        out.push((names::enc(layer, "ffn.b2"), vec![d]));
    }
    if adapters {
        for layer in 1..=n_layers {
            out.push((names::adapter(layer, "w_down"), vec![d, cfg.adapter_rank]));
            out.push((names::adapter(layer, "w_up"), vec![cfg.adapter_rank, d]));
        }
    }
    if let Some(h) = head {
        out.push(("head.proj.w".into(), vec![h.pool_dim(d), h.embed_dim]));
        out.push(("head.proj.b".into(), vec![h.embed_dim]));
        out.push(("head.class.w".into(), vec![h.n_speakers, h.embed_dim]));
    }
    if pretrain_head {
        out.push(("pretrain.mask_embed".into(), vec![d]));
        out.push(("pretrain.recon.w".into(), vec![d, d]));
        out.push(("pretrain.recon.b".into(), vec![d]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitPolicy {
    Ones,
    Zeros,
    ScaledUniform { fan_in: usize },
}

/// Initialization rule for a named entry, decidable from name + shape alone
/// (plus the adapter up-projection flag). Keeping this a pure function lets
/// selective re-initialization reproduce construction-time draws exactly.
fn init_policy(name: &str, shape: &[usize], cfg: &ModelConfig) -> InitPolicy {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "g" {
        return InitPolicy::Ones;
    }
    if matches!(leaf, "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2") {
        return InitPolicy::Zeros;
    }
    if leaf == "w_up" {
        return if cfg.adapter_random_up {
            InitPolicy::ScaledUniform { fan_in: shape[0] }
        } else {
            InitPolicy::Zeros
        };
    }
    if name.ends_with("class.w") {
        // cosine classifier rows; fan-in is the embedding width
        return InitPolicy::ScaledUniform { fan_in: shape[1] };
    }
    let fan_in = match shape.len() {
        1 => shape[0],
        2 => shape[0],
        3 => shape[1] * shape[2], // conv (out, in, kernel)
        _ => shape.iter().product(),
    };
    InitPolicy::ScaledUniform { fan_in }
}

/// Fresh value for one entry, drawn from `(seed, INIT, name)`.
pub fn init_entry(name: &str, shape: &[usize], cfg: &ModelConfig, seed: u64) -> ArrayD<f64> {
    match init_policy(name, shape, cfg) {
        InitPolicy::Ones => ArrayD::ones(IxDyn(shape)),
        InitPolicy::Zeros => ArrayD::zeros(IxDyn(shape)),
        InitPolicy::ScaledUniform { fan_in } => {
            let mut rng = rng_from(seed, &[stream::INIT, name_tag(name)]);
            scaled_uniform(shape, fan_in, &mut rng)
        }
    }
}

/// Build a fully random store over the given topology entries.
pub fn build_store(entries: &[(String, Vec<usize>)], cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new(seed);
    for (name, shape) in entries {
        store.insert(name.clone(), init_entry(name, shape, cfg, seed));
    }
    store
}

/// Convenience constructor per role: teacher (plain, full depth), student
/// (adapters, student depth, optional head), tuned teacher (teacher + head).
pub fn build_random_store(
    cfg: &ModelConfig,
    head: Option<&SpeakerHeadConfig>,
    role: Role,
    seed: u64,
) -> Result<ParameterStore> {
    cfg.validate()?;
    if let Some(h) = head {
        h.validate()?;
    }
    let entries = match role {
        Role::Teacher => topology(cfg, None, cfg.n_layers_teacher, false, false),
        Role::TunedTeacher => topology(cfg, head, cfg.n_layers_teacher, false, false),
        Role::Student => topology(cfg, head, cfg.n_layers_student, true, false),
        Role::TrainState => {
            return Err(Error::Config("train_state is not a constructible topology".into()))
        }
    };
    Ok(build_store(&entries, cfg, seed))
}

/// Verify a store holds exactly the expected entries with expected shapes.
/// Adapters are treated as all-or-nothing for student stores.
pub fn validate_store(
    store: &ParameterStore,
    cfg: &ModelConfig,
    head: Option<&SpeakerHeadConfig>,
    role: Role,
) -> Result<()> {
    let (n_layers, adapters) = match role {
        Role::Teacher | Role::TunedTeacher => (cfg.n_layers_teacher, false),
        Role::Student => (
            cfg.n_layers_student,
            store.names_with_prefix("adapter.").next().is_some(),
        ),
        Role::TrainState => return Ok(()),
    };
    let expected = topology(cfg, head, n_layers, adapters, false);
    for (name, shape) in &expected {
        let arr = store
            .get(name)
            .map_err(|_| Error::Store(format!("missing entry `{name}` for role {}", role.as_str())))?;
        if arr.shape() != shape.as_slice() {
            return Err(Error::shape(name, format!("{shape:?}"), format!("{:?}", arr.shape())));
        }
    }
    let expected_names: std::collections::BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
    for name in store.names() {
        if !expected_names.contains(name) {
            return Err(Error::Store(format!(
                "unexpected entry `{name}` for role {}",
                role.as_str()
            )));
        }
    }
    Ok(())
}

/// Parameters in one encoder layer.
fn encoder_layer_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    // two layer norms, four attention projections with biases, two FFN mats
    2 * (2 * d) + 4 * (d * d + d) + (d * f + f) + (f * d + d)
}

fn cnn_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    cfg.cnn_strides
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let c_in = if i == 0 { cfg.sample_dim } else { d };
            d * c_in * k + d + 2 * d
        })
        .sum()
}

/// Adapter parameters across the whole student: layers × (down + up).
pub fn adapter_param_count(cfg: &ModelConfig) -> usize {
    cfg.n_layers_student * 2 * cfg.d_model * cfg.adapter_rank
}

/// Backbone (CNN + encoder stack) parameter count at the given depth.
pub fn backbone_param_count(cfg: &ModelConfig, n_layers: usize) -> usize {
    cnn_params(cfg) + n_layers * encoder_layer_params(cfg)
}

pub fn head_param_count(cfg: &ModelConfig, head: &SpeakerHeadConfig) -> usize {
    let pool = head.pool_dim(cfg.d_model);
    pool * head.embed_dim + head.embed_dim + head.n_speakers * head.embed_dim
}

/// Full analytic parameter count for a store with the given pieces.
pub fn param_count(
    cfg: &ModelConfig,
    head: Option<&SpeakerHeadConfig>,
    n_layers: usize,
    adapters: bool,
) -> usize {
    backbone_param_count(cfg, n_layers)
        + if adapters { adapter_param_count(cfg) } else { 0 }
        + head.map_or(0, |h| head_param_count(cfg, h))
}
