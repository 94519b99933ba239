use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::memory::{codebook_loss, commitment_loss};
use crate::{Error, Result};

/// Quadratic-to-linear transition point of the Smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[inline]
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

#[inline]
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        d / SMOOTH_L1_BETA
    } else {
        d.signum()
    }
}

/// Mean Smooth-L1 over paired predictions and targets.
pub fn prediction_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, y)| smooth_l1(p - y))
        .sum::<f64>()
        / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub commitment: f64,
    pub codebook: f64,
}

impl LossBreakdown {
    pub fn compose(prediction: f64, commitment: f64, codebook: f64, beta: f64) -> Self {
        Self {
            total: prediction + beta * commitment + codebook,
            prediction,
            commitment,
            codebook,
        }
    }
}

/// `L_pred + beta * L_commit + L_codebook` with the per-term values.
pub fn total_loss(
    pred: &[f64],
    target: &[f64],
    z: ArrayView2<'_, f64>,
    zq: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<LossBreakdown> {
    let prediction = prediction_loss(pred, target)?;
    let commitment = commitment_loss(z, zq)?.value;
    let codebook = codebook_loss(z, zq)?.value;
    Ok(LossBreakdown::compose(
        prediction, commitment, codebook, beta,
    ))
}
