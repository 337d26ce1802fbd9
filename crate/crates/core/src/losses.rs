//! Fine-tuning objective terms: per-layer attention distillation, final
//! layer alignment, flow-matching data loss, and their weighted sum.
//!
//! Norms are squared Frobenius norms of difference matrices, computed in
//! `f64`.

use crate::attn::HeadTensor;
use crate::error::{Error, Result};

/// Non-negative coefficients `(alpha, beta, gamma)` for the data, final,
/// and attention terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for value in [alpha, beta, gamma] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::NegativeWeight { value });
            }
        }
        Ok(LossWeights { alpha, beta, gamma })
    }
}

/// Values of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub data: f64,
    pub final_layer: f64,
    pub attn: f64,
}

fn sq_frobenius_diff(a: &HeadTensor<f64>, b: &HeadTensor<f64>) -> Result<f64> {
    a.check_same_shape(b, "loss operands")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum())
}

/// Mean over layers of the squared Frobenius norm of the student-teacher
/// difference at each layer.
pub fn attn_distill_loss(
    student: &[HeadTensor<f64>],
    teacher: &[HeadTensor<f64>],
) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::LayerCountMismatch {
            what: "attention distillation loss",
            expected: student.len(),
            got: teacher.len(),
        });
    }
    if student.is_empty() {
        return Err(Error::LayerCountMismatch {
            what: "attention distillation loss",
            expected: 1,
            got: 0,
        });
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        total += sq_frobenius_diff(s, t)?;
    }
    Ok(total / student.len() as f64)
}

/// Squared Frobenius norm of the final-output difference.
pub fn final_layer_loss(student: &HeadTensor<f64>, teacher: &HeadTensor<f64>) -> Result<f64> {
    sq_frobenius_diff(student, teacher)
}

/// Flow-matching data loss `||(f - x0) - model_out||^2`, with `f` the target
/// endpoint and `x0` the clean latent.
pub fn data_loss(
    model_out: &HeadTensor<f64>,
    f: &HeadTensor<f64>,
    x0: &HeadTensor<f64>,
) -> Result<f64> {
    f.check_same_shape(x0, "data loss target")?;
    f.check_same_shape(model_out, "data loss prediction")?;
    Ok(model_out
        .data()
        .iter()
        .zip(f.data().iter().zip(x0.data()))
        .map(|(m, (fv, x))| {
            let d = (fv - x) - m;
            d * d
        })
        .sum())
}

/// `alpha * data + beta * final + gamma * attn`.
pub fn combined_loss(terms: LossTerms, w: &LossWeights) -> f64 {
    debug_assert!(terms.data >= 0.0 && terms.final_layer >= 0.0 && terms.attn >= 0.0);
    w.alpha * terms.data + w.beta * terms.final_layer + w.gamma * terms.attn
}
