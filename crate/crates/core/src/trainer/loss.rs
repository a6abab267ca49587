use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

/// Probability clamp for the log terms.
pub const BCE_EPS: f64 = 1e-12;

/// How the two loss terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBlend {
    /// `L_BCE + L_SBCL`.
    #[default]
    Sum,
    /// `α·L_BCE + (1-α)·L_SBCL`.
    Alpha,
}

impl LossBlend {
    /// Weights applied to `(L_BCE, L_SBCL)`.
    pub fn weights(self, alpha: f64) -> (f64, f64) {
        match self {
            LossBlend::Sum => (1.0, 1.0),
            LossBlend::Alpha => (alpha, 1.0 - alpha),
        }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss(probs: &[f64], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, l)| {
            let p = clamp_prob(p);
            let y = l.target();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Derivative of the per-sample clamped BCE with respect to the logit;
/// zero where the clamp is active.
pub fn bce_logit_grad(p: f64, label: Label) -> f64 {
    if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        p - label.target()
    } else {
        0.0
    }
}

pub fn combined_loss(l_bce: f64, l_sbcl: f64, blend: LossBlend, alpha: f64) -> f64 {
    let (wb, ws) = blend.weights(alpha);
    wb * l_bce + ws * l_sbcl
}
