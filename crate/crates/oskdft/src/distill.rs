//! Knowledge-distillation losses: frame-level MSE against a frozen teacher
//! and KL against a tuned teacher's speaker logits, plus the joint objective.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::forward_path;
use crate::store::ParameterStore;
use ndarray::{Array2, ArrayView1};

/// Weights of the joint objective `sv_scale · L_sv + kd_scale · mean((s-t)²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kd_scale: f64,
    pub sv_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kd_scale: 100.0, sv_scale: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.kd_scale.is_finite() || self.kd_scale < 0.0 {
            return Err(Error::Config(format!("kd_scale must be finite and >= 0, got {}", self.kd_scale)));
        }
        if !self.sv_scale.is_finite() || self.sv_scale < 0.0 {
            return Err(Error::Config(format!("sv_scale must be finite and >= 0, got {}", self.sv_scale)));
        }
        Ok(())
    }
}

/// Teacher and student must map waveforms to the same frame grid and width.
pub fn check_frame_alignment(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if teacher.d_model != student.d_model {
        return Err(Error::Config(format!(
            "teacher d_model {} != student d_model {}",
            teacher.d_model, student.d_model
        )));
    }
    if teacher.cnn_strides != student.cnn_strides || teacher.sample_dim != student.sample_dim {
        return Err(Error::Config(
            "teacher and student front-ends produce different frame grids".into(),
        ));
    }
    Ok(())
}

/// Full-depth plain forward of the teacher on one waveform; caches dropped.
pub fn teacher_forward(
    wave: ArrayView1<f64>,
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let (feats, _) = crate::model::cnn_forward(wave, store, cfg)?;
    let (out, _) = forward_path(&feats, store, cfg, cfg.n_layers_teacher, None)?;
    Ok(out)
}

/// Scaled mean-squared error between student KD-path outputs and teacher
/// outputs over a batch. The mean runs over every element (batch ×
/// frames × channels). Returns the loss and dL/d(student) per sample.
pub fn kd_mse(
    student: &[Array2<f64>],
    teacher: &[Array2<f64>],
    w: &LossWeights,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Data(format!(
            "kd batch mismatch: {} student vs {} teacher samples",
            student.len(),
            teacher.len()
        )));
    }
    let mut total_elems = 0usize;
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.dim() != t.dim() {
            return Err(Error::shape(
                format!("kd sample {i}"),
                format!("{:?}", t.dim()),
                format!("{:?}", s.dim()),
            ));
        }
        total_elems += s.len();
    }
    let n = total_elems as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let diff = s - t;
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        grads.push(diff * (2.0 * w.kd_scale / n));
    }
    loss = w.kd_scale * loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { component: "kd_loss".into(), detail: format!("{loss}") });
    }
    Ok((loss, grads))
}

/// KL(teacher ‖ student) over speaker logits, mean over the batch,
/// temperature 1. Returns the loss and dL/d(student logits) = (p_s − p_t)/B.
pub fn kl_kd_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::shape(
            "kl logits",
            format!("{:?}", teacher_logits.dim()),
            format!("{:?}", student_logits.dim()),
        ));
    }
    let (b, c) = student_logits.dim();
    if c < 2 {
        return Err(Error::Data(format!("kl needs at least 2 classes, got {c}")));
    }
    if b == 0 {
        return Err(Error::Data("kl on empty batch".into()));
    }
    let mut loss = 0.0;
    let mut d_student = Array2::zeros((b, c));
    for i in 0..b {
        let ls_s = crate::model::linalg::log_softmax(student_logits.row(i));
        let ls_t = crate::model::linalg::log_softmax(teacher_logits.row(i));
        for j in 0..c {
            let p_t = ls_t[j].exp();
            loss += p_t * (ls_t[j] - ls_s[j]);
            d_student[[i, j]] = (ls_s[j].exp() - p_t) / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { component: "kl_kd_loss".into(), detail: format!("{loss}") });
    }
    Ok((loss, d_student))
}

/// Combine the two already-scaled terms; errors name the non-finite part.
pub fn joint_loss(kd: f64, sv: f64, w: &LossWeights) -> Result<f64> {
    if !kd.is_finite() {
        return Err(Error::NonFinite { component: "kd_loss".into(), detail: format!("{kd}") });
    }
    if !sv.is_finite() {
        return Err(Error::NonFinite { component: "sv_loss".into(), detail: format!("{sv}") });
    }
    let j = w.sv_scale * sv + kd;
    if !j.is_finite() {
        return Err(Error::NonFinite { component: "joint_loss".into(), detail: format!("{j}") });
    }
    Ok(j)
}
