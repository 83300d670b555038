use ndarray::{Array2, ArrayView, Dimension, Zip};

use crate::autodiff::PROB_EPS;
use crate::error::{Error, Result};

fn check<D: Dimension>(pred: &ArrayView<f64, D>, gt: &ArrayView<bool, D>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!(
            "soft mask value {v} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of a soft mask against a binary mask.
pub fn bce_mask_loss<D: Dimension>(pred: ArrayView<f64, D>, gt: ArrayView<bool, D>) -> Result<f64> {
    check(&pred, &gt)?;
    let mut s = 0.0;
    Zip::from(&pred).and(&gt).for_each(|&p, &y| {
        let q = if y { p } else { 1.0 - p };
        s -= q.max(PROB_EPS).ln();
    });
    Ok(s / pred.len().max(1) as f64)
}

/// `1 - (2Σ p·y + eps) / (Σp + Σy + eps)`
pub fn dice_loss<D: Dimension>(pred: ArrayView<f64, D>, gt: ArrayView<bool, D>, eps: f64) -> Result<f64> {
    check(&pred, &gt)?;
    if eps <= 0.0 {
        return Err(Error::Config("dice eps must be positive".into()));
    }
    let (mut inter, mut total) = (0.0, 0.0);
    Zip::from(&pred).and(&gt).for_each(|&p, &y| {
        let y = if y { 1.0 } else { 0.0 };
        inter += p * y;
        total += p + y;
    });
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

/// Class index of a matched query.
pub const CLASS_TRACK: usize = 0;
/// Class index of an unmatched query.
pub const CLASS_NO_OBJECT: usize = 1;

/// Softmax cross-entropy over `N×2` logits; no-object rows are weighted by
/// `no_object_weight` and the sum is normalized by the total weight.
pub fn class_loss(logits: &Array2<f64>, targets: &[usize], no_object_weight: f64) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut g = crate::autodiff::Graph::new();
    let z = g.constant(logits.clone());
    let weights = class_weights(targets, no_object_weight);
    let l = g.softmax_ce(z, targets.to_vec(), weights);
    Ok(g.scalar(l))
}

pub(crate) fn class_weights(targets: &[usize], no_object_weight: f64) -> Vec<f64> {
    targets
        .iter()
        .map(|&t| {
            if t == CLASS_NO_OBJECT {
                no_object_weight
            } else {
                1.0
            }
        })
        .collect()
}
