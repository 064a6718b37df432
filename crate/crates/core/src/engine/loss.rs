use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[EPSILON, 1 - EPSILON]` before any log.
pub const EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over classes of the elementwise binary cross-entropy.
    #[default]
    Bce,
    /// Categorical cross-entropy.
    Cce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Cce => "cce",
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_parts(logits.dims().to_vec(), exps.into_iter().map(|e| e / sum).collect())
}

/// Class index of a well-formed one-hot vector.
pub fn onehot_class(onehot: &Tensor) -> Result<usize, EngineError> {
    let mut class = None;
    for (i, &v) in onehot.data().iter().enumerate() {
        if v == 1.0 && class.is_none() {
            class = Some(i);
        } else if v != 0.0 {
            return Err(EngineError::OneHot);
        }
    }
    class.ok_or(EngineError::OneHot)
}

/// Loss of softmax probabilities against a one-hot target, with the gradient
/// taken with respect to the pre-softmax logits.
///
/// The clip has zero derivative outside its range, so a saturated probability
/// contributes no gradient through the log term.
pub fn loss_and_grad(
    probs: &Tensor,
    onehot: &Tensor,
    kind: LossKind,
) -> Result<(f64, Tensor), EngineError> {
    if probs.len() != onehot.len() {
        return Err(EngineError::Shape {
            layer: "loss",
            axis: "classes",
            expected: probs.len(),
            actual: onehot.len(),
        });
    }
    onehot_class(onehot)?;
    let k = probs.len() as f64;
    let p = probs.data();
    let y = onehot.data();
    let mut loss = 0.0;
    let mut dprob = vec![0.0; p.len()];
    for c in 0..p.len() {
        let q = p[c].clamp(EPSILON, 1.0 - EPSILON);
        let inside = p[c] > EPSILON && p[c] < 1.0 - EPSILON;
        match kind {
            LossKind::Bce => {
                loss -= (y[c] * q.ln() + (1.0 - y[c]) * (1.0 - q).ln()) / k;
                if inside {
                    dprob[c] = -(y[c] / q - (1.0 - y[c]) / (1.0 - q)) / k;
                }
            }
            LossKind::Cce => {
                loss -= y[c] * q.ln();
                if inside {
                    dprob[c] = -y[c] / q;
                }
            }
        }
    }
    // Softmax Jacobian: dz_j = p_j (g_j - Σ_c g_c p_c).
    let dot: f64 = dprob.iter().zip(p).map(|(g, p)| g * p).sum();
    let dlogits = p.iter().zip(&dprob).map(|(&pj, &gj)| pj * (gj - dot)).collect();
    Ok((loss, Tensor::from_parts(probs.dims().to_vec(), dlogits)))
}
