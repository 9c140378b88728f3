//! Soft Dice loss for optimization and thresholded IoU / Dice-F metrics
//! for evaluation.
//!
//! The loss operates on continuous probability maps and is differentiable;
//! the metrics operate on binarized masks and are what the reports quote.
//! The two are related but not interchangeable: a Dice *loss* value is not
//! one minus the Dice *coefficient* of the thresholded prediction.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Default numerical-stability constant for the soft Dice loss.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Which channels enter the soft Dice loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    /// Foreground (polyp) channel only. The default for binary segmentation.
    #[default]
    Foreground,
    /// Mean of the per-channel soft Dice losses, for ablation.
    ClassMean,
}

/// Result of a soft Dice loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub value: f64,
    pub eps: f64,
}

/// Scope of an aggregated metric record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScope {
    PerImage,
    EpochMean,
    SplitMean,
}

/// A row of IoU / Dice-F values at some aggregation scope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iou: f64,
    pub f_dice: f64,
    pub n_images: usize,
    pub scope: MetricScope,
}

impl MetricRecord {
    /// Arithmetic mean of per-image records.
    pub fn mean_of(records: &[(f64, f64)], scope: MetricScope) -> MetricRecord {
        let n = records.len();
        let (si, sf) = records
            .iter()
            .fold((0.0, 0.0), |(a, b), (i, f)| (a + i, b + f));
        MetricRecord {
            iou: if n == 0 { f64::NAN } else { si / n as f64 },
            f_dice: if n == 0 { f64::NAN } else { sf / n as f64 },
            n_images: n,
            scope,
        }
    }
}

fn check_pair_shape<T, U>(pred: &Array2<T>, gt: &Array2<U>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Validation(format!(
            "mask shape mismatch: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn channel_dice_terms(pred: &Array3<f64>, gt: &Array3<f64>, channel: usize) -> (f64, f64, f64) {
    let p = pred.index_axis(ndarray::Axis(0), channel);
    let g = gt.index_axis(ndarray::Axis(0), channel);
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    ndarray::Zip::from(&p).and(&g).for_each(|&pv, &gv| {
        inter += pv * gv;
        psum += pv;
        gsum += gv;
    });
    (inter, psum, gsum)
}

/// Soft Dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)` on
/// probability maps of shape `(2, H, W)`.
///
/// `pred` must hold channel probabilities in `[0, 1]`; `gt` is the one-hot
/// target. In [`DiceMode::Foreground`] only the polyp channel (index 1)
/// enters the loss.
pub fn soft_dice_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    eps: f64,
    mode: DiceMode,
) -> Result<LossValue> {
    if pred.dim() != gt.dim() {
        return Err(Error::Validation(format!(
            "soft dice shape mismatch: prediction {:?} vs target {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let channels: &[usize] = match mode {
        DiceMode::Foreground => &[1],
        DiceMode::ClassMean => &[0, 1],
    };
    let mut total = 0.0;
    for &c in channels {
        let (inter, psum, gsum) = channel_dice_terms(pred, gt, c);
        total += 1.0 - (2.0 * inter + eps) / (psum + gsum + eps);
    }
    Ok(LossValue {
        value: total / channels.len() as f64,
        eps,
    })
}

/// Soft Dice loss plus its gradient with respect to the probability map.
///
/// Returns `(loss, dL/dpred)` where the gradient has the same `(2, H, W)`
/// shape as `pred`. For [`DiceMode::Foreground`] the background channel's
/// gradient is zero.
pub fn soft_dice_loss_grad(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    eps: f64,
    mode: DiceMode,
) -> Result<(f64, Array3<f64>)> {
    let loss = soft_dice_loss(pred, gt, eps, mode)?;
    let channels: &[usize] = match mode {
        DiceMode::Foreground => &[1],
        DiceMode::ClassMean => &[0, 1],
    };
    let scale = 1.0 / channels.len() as f64;
    let mut grad = Array3::<f64>::zeros(pred.dim());
    for &c in channels {
        let (inter, psum, gsum) = channel_dice_terms(pred, gt, c);
        let numer = 2.0 * inter + eps;
        let denom = psum + gsum + eps;
        // d/dp_i [1 - numer/denom] = (numer - 2*g_i*denom) / denom^2
        let inv_d2 = 1.0 / (denom * denom);
        let g = gt.index_axis(ndarray::Axis(0), c);
        let mut gr = grad.index_axis_mut(ndarray::Axis(0), c);
        ndarray::Zip::from(&mut gr).and(&g).for_each(|out, &gv| {
            *out = scale * (numer - 2.0 * gv * denom) * inv_d2;
        });
    }
    Ok((loss.value, grad))
}

/// Soft Dice loss and its gradient with respect to the *logits* that
/// produced `probs` through a channel softmax.
///
/// Chains [`soft_dice_loss_grad`] through the softmax Jacobian:
/// `dL/dz_c = p_c * (dL/dp_c - sum_k dL/dp_k * p_k)` per pixel.
pub fn soft_dice_loss_logit_grad(
    probs: &Array3<f64>,
    gt: &Array3<f64>,
    eps: f64,
    mode: DiceMode,
) -> Result<(f64, Array3<f64>)> {
    let (loss, dp) = soft_dice_loss_grad(probs, gt, eps, mode)?;
    let (c, h, w) = probs.dim();
    let mut dz = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            for k in 0..c {
                dot += dp[[k, y, x]] * probs[[k, y, x]];
            }
            for k in 0..c {
                dz[[k, y, x]] = probs[[k, y, x]] * (dp[[k, y, x]] - dot);
            }
        }
    }
    Ok((loss, dz))
}

/// Per-pixel argmax over the channel axis of a `(2, H, W)` probability map.
///
/// Exact ties go to background (class 0).
pub fn binarize_prediction(probs: &Array3<f64>) -> Array2<u8> {
    let (_, h, w) = probs.dim();
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if probs[[1, y, x]] > probs[[0, y, x]] {
                mask[[y, x]] = 1;
            }
        }
    }
    mask
}

/// Intersection-over-Union of two binary masks. Both masks empty scores 1.
pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_pair_shape(pred, gt)?;
    let mut inter = 0u64;
    let mut union = 0u64;
    ndarray::Zip::from(pred).and(gt).for_each(|&p, &g| {
        let p = p != 0;
        let g = g != 0;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    });
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dice coefficient (F-score) of two binary masks. Both masks empty scores 1.
pub fn dice_f(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_pair_shape(pred, gt)?;
    let mut inter = 0u64;
    let mut psum = 0u64;
    let mut gsum = 0u64;
    ndarray::Zip::from(pred).and(gt).for_each(|&p, &g| {
        let p = p != 0;
        let g = g != 0;
        if p && g {
            inter += 1;
        }
        if p {
            psum += 1;
        }
        if g {
            gsum += 1;
        }
    });
    if psum + gsum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (psum + gsum) as f64)
}
