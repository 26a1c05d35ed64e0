//! Model and head configuration.

use crate::error::{Error, Result};
use crate::kv::Kv;

/// Topology of the teacher and student encoders.
///
/// One config describes both networks: the teacher uses `n_layers_teacher`
/// plain encoder layers, the student the first `n_layers_student` plus one
/// bottleneck adapter per layer. The convolutional front-end is shared by
/// construction (same strides, same width), which keeps teacher and student
/// frame rates aligned for distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature width of every encoder layer.
    pub d_model: usize,
    pub n_layers_teacher: usize,
    pub n_layers_student: usize,
    pub n_heads: usize,
    /// Feed-forward width = `ffn_mult * d_model`.
    pub ffn_mult: usize,
    /// Bottleneck width of each adapter.
    pub adapter_rank: usize,
    /// Downsampling factor of each front-end conv layer (kernel == stride).
    pub cnn_strides: Vec<usize>,
    /// Input channel count (1 for waveform input).
    pub sample_dim: usize,
    /// When true, adapter up-projections are randomly initialized instead of
    /// zero-initialized.
    pub adapter_random_up: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers_teacher: 8,
            n_layers_student: 4,
            n_heads: 4,
            ffn_mult: 4,
            adapter_rank: 8,
            cnn_strides: vec![8, 5, 5],
            sample_dim: 1,
            adapter_random_up: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers_teacher == 0
            || self.n_layers_student == 0
            || self.n_heads == 0
            || self.ffn_mult == 0
            || self.sample_dim == 0
        {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.n_layers_student >= self.n_layers_teacher {
            return Err(Error::Config(format!(
                "n_layers_student ({}) must be < n_layers_teacher ({})",
                self.n_layers_student, self.n_layers_teacher
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_rank == 0 || self.adapter_rank >= self.d_model {
            return Err(Error::Config(format!(
                "adapter_rank ({}) must satisfy 0 < rank < d_model ({})",
                self.adapter_rank, self.d_model
            )));
        }
        if self.cnn_strides.is_empty() || self.cnn_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("cnn_strides must be non-empty positive ints".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total front-end downsampling factor.
    pub fn stride_product(&self) -> usize {
        self.cnn_strides.iter().product()
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let strides = self
            .cnn_strides
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            (format!("{prefix}d_model"), self.d_model.to_string()),
            (format!("{prefix}n_layers_teacher"), self.n_layers_teacher.to_string()),
            (format!("{prefix}n_layers_student"), self.n_layers_student.to_string()),
            (format!("{prefix}n_heads"), self.n_heads.to_string()),
            (format!("{prefix}ffn_mult"), self.ffn_mult.to_string()),
            (format!("{prefix}adapter_rank"), self.adapter_rank.to_string()),
            (format!("{prefix}cnn_strides"), strides),
            (format!("{prefix}sample_dim"), self.sample_dim.to_string()),
            (format!("{prefix}adapter_random_up"), self.adapter_random_up.to_string()),
        ]
    }

    /// Read fields with the given key prefix; absent keys fall back to defaults.
    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            d_model: kv.get_or(&format!("{prefix}d_model"), d.d_model, "usize")?,
            n_layers_teacher: kv.get_or(&format!("{prefix}n_layers_teacher"), d.n_layers_teacher, "usize")?,
            n_layers_student: kv.get_or(&format!("{prefix}n_layers_student"), d.n_layers_student, "usize")?,
            n_heads: kv.get_or(&format!("{prefix}n_heads"), d.n_heads, "usize")?,
            ffn_mult: kv.get_or(&format!("{prefix}ffn_mult"), d.ffn_mult, "usize")?,
            adapter_rank: kv.get_or(&format!("{prefix}adapter_rank"), d.adapter_rank, "usize")?,
            cnn_strides: if kv.contains(&format!("{prefix}cnn_strides")) {
                kv.get_usize_list(&format!("{prefix}cnn_strides"))?
            } else {
                d.cnn_strides.clone()
            },
            sample_dim: kv.get_or(&format!("{prefix}sample_dim"), d.sample_dim, "usize")?,
            adapter_random_up: kv.get_bool_or(&format!("{prefix}adapter_random_up"), d.adapter_random_up)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    StatsPool,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::StatsPool => "stats_pool",
        }
    }

    pub fn parse(s: &str) -> Result<HeadKind> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "stats_pool" => Ok(HeadKind::StatsPool),
            other => Err(Error::Config(format!(
                "head kind must be `linear` or `stats_pool`, got `{other}`"
            ))),
        }
    }
}

/// Speaker classification head on top of the adapter-path features.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerHeadConfig {
    pub head_kind: HeadKind,
    pub embed_dim: usize,
    pub n_speakers: usize,
    /// Additive angular margin applied to the true-class angle.
    pub margin: f64,
    /// Cosine logit scale.
    pub scale: f64,
}

impl Default for SpeakerHeadConfig {
    fn default() -> Self {
        SpeakerHeadConfig {
            head_kind: HeadKind::Linear,
            embed_dim: 192,
            n_speakers: 2,
            margin: 0.15,
            scale: 20.0,
        }
    }
}

impl SpeakerHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "n_speakers must be >= 2, got {}",
                self.n_speakers
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must be in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Width of the pooled feature vector fed to the projection.
    pub fn pool_dim(&self, d_model: usize) -> usize {
        match self.head_kind {
            HeadKind::Linear => d_model,
            HeadKind::StatsPool => 2 * d_model,
        }
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}kind"), self.head_kind.as_str().to_string()),
            (format!("{prefix}embed_dim"), self.embed_dim.to_string()),
            (format!("{prefix}n_speakers"), self.n_speakers.to_string()),
            (format!("{prefix}margin"), self.margin.to_string()),
            (format!("{prefix}scale"), self.scale.to_string()),
        ]
    }

    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<SpeakerHeadConfig> {
        let d = SpeakerHeadConfig::default();
        let cfg = SpeakerHeadConfig {
            head_kind: match kv.opt_str(&format!("{prefix}kind")) {
                Some(s) => HeadKind::parse(&s)?,
                None => d.head_kind,
            },
            embed_dim: kv.get_or(&format!("{prefix}embed_dim"), d.embed_dim, "usize")?,
            n_speakers: kv.get_or(&format!("{prefix}n_speakers"), d.n_speakers, "usize")?,
            margin: kv.get_or(&format!("{prefix}margin"), d.margin, "f64")?,
            scale: kv.get_or(&format!("{prefix}scale"), d.scale, "f64")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
