//! Grad-CAM heatmaps for the segmentation network.
//!
//! The classifier recipe is adapted to dense prediction: the scalar
//! objective is the sum of foreground (polyp) logits over the pixels the
//! model actually predicts as foreground, falling back to all pixels when
//! nothing is predicted. Working on logits rather than probabilities
//! avoids vanished gradients at saturated softmax outputs. Channel
//! weights are the spatial means of the objective's gradient at a named
//! activation tap (default: the last decoder block), and the weighted,
//! ReLU-rectified combination is upsampled and min-max normalized.
//!
//! Overlays map heatmap values through a bundled 256-entry blue→green→red
//! lookup table so rendered images are bit-reproducible across platforms.

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::UNet;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Axis};
use std::path::Path;
use std::sync::OnceLock;

/// Objective class for a heatmap. Only the foreground class carries a
/// localization question; background CAMs are out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamTarget {
    Polyp,
}

/// A class-discriminative localization map at input resolution.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// `(H, W)` values in `[0, 1]`; all-zero marks a degenerate map.
    pub values: Array2<f64>,
    /// Tap the activations were taken from.
    pub source_tap: String,
    pub target: CamTarget,
}

/// Fraction of heatmap mass that falls inside the ground-truth region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    /// True when the heatmap carried no mass at all (fraction is then 0).
    pub degenerate: bool,
}

/// Compute the Grad-CAM heatmap for one image. `tap` defaults to the
/// last decoder block, the highest-resolution feature map.
pub fn gradcam(model: &UNet, image: &Array3<f64>, tap: Option<&str>) -> Result<Heatmap> {
    let tap_name = match tap {
        Some(name) => {
            if !model.has_tap(name) {
                return Err(Error::Validation(format!(
                    "unknown tap '{name}', expected one of {:?}",
                    model.tap_names()
                )));
            }
            name.to_string()
        }
        None => model.last_decoder_tap(),
    };

    let (pred, taps, capture) = model.forward_with_taps(image)?;
    let bin = metrics::binarize_prediction(&pred.probs);
    let (classes, h, w) = pred.logits.dim();
    debug_assert_eq!(classes, 2);

    // d(objective)/d(logits): one for the foreground logit at each pixel
    // in the objective's support, zero elsewhere.
    let mut grad_logits = Array3::zeros((classes, h, w));
    let mut any_foreground = false;
    {
        let mut fg = grad_logits.index_axis_mut(Axis(0), 1);
        for ((y, x), &b) in bin.indexed_iter() {
            if b == 1 {
                fg[[y, x]] = 1.0;
                any_foreground = true;
            }
        }
        if !any_foreground {
            fg.fill(1.0);
        }
    }

    let tap_grads = model.tap_gradients(&capture, &grad_logits);
    let cam = cam_from_activations(&taps[&tap_name], &tap_grads[&tap_name])?;
    let (_, ih, iw) = image.dim();
    Ok(Heatmap {
        values: normalize_minmax(bilinear_upsample(&cam, ih, iw)),
        source_tap: tap_name,
        target: CamTarget::Polyp,
    })
}

/// Steps 4–5 of the recipe: per-channel weights are the spatial means of
/// the gradients; the weighted activation sum is ReLU-rectified.
pub fn cam_from_activations(acts: &Array3<f64>, grads: &Array3<f64>) -> Result<Array2<f64>> {
    if acts.dim() != grads.dim() {
        return Err(Error::Validation(format!(
            "activation shape {:?} does not match gradient shape {:?}",
            acts.dim(),
            grads.dim()
        )));
    }
    let (c, h, w) = acts.dim();
    let mut cam = Array2::zeros((h, w));
    for k in 0..c {
        let alpha = grads.index_axis(Axis(0), k).mean().unwrap_or(0.0);
        cam.scaled_add(alpha, &acts.index_axis(Axis(0), k));
    }
    cam.mapv_inplace(|v| v.max(0.0));
    Ok(cam)
}

/// Bilinear upsampling with center-aligned sampling (the resize
/// convention: source coordinate = (dst + ½)·scale − ½, edge-clamped).
pub fn bilinear_upsample(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = map.dim();
    if (sh, sw) == (h, w) {
        return map.clone();
    }
    let scale_y = sh as f64 / h as f64;
    let scale_x = sw as f64 / w as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Min-max normalize to `[0, 1]`; a constant map carries no localization
/// signal and collapses to all zeros.
fn normalize_minmax(map: Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

/// The bundled 256-entry blue→green→red lookup table.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[0u8; 3]; 256];
        for (i, line) in include_str!("../assets/colormap.csv").lines().enumerate() {
            let mut parts = line.split(',').map(|p| p.trim().parse::<u8>());
            for channel in &mut table[i] {
                *channel = parts
                    .next()
                    .and_then(std::result::Result::ok)
                    .expect("colormap asset: 3 u8 fields per row");
            }
        }
        table
    })
}

/// Blend the colormapped heatmap over the image:
/// `out = (1 − alpha)·image + alpha·colormapped`, rounded per channel.
pub fn overlay(image: &RgbImage, heatmap: &Heatmap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!(
            "overlay alpha must be in [0, 1], got {alpha}"
        )));
    }
    let (h, w) = heatmap.values.dim();
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::Validation(format!(
            "image is {}x{}, heatmap is {w}x{h}",
            image.width(),
            image.height()
        )));
    }
    let table = colormap();
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = heatmap.values[[y as usize, x as usize]];
        let color = table[((v * 255.0).round() as usize).min(255)];
        for ch in 0..3 {
            let blended = (1.0 - alpha) * px.0[ch] as f64 + alpha * color[ch] as f64;
            px.0[ch] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// How much of the heatmap's mass lies inside the ground-truth mask.
pub fn attention_coverage(heatmap: &Heatmap, gt_mask: &Array2<u8>) -> Result<Coverage> {
    if heatmap.values.dim() != gt_mask.dim() {
        return Err(Error::Validation(format!(
            "heatmap shape {:?} does not match mask shape {:?}",
            heatmap.values.dim(),
            gt_mask.dim()
        )));
    }
    if gt_mask.iter().all(|&m| m == 0) {
        return Err(Error::Validation(
            "attention coverage is undefined for an empty ground-truth mask".into(),
        ));
    }
    let mut total = 0.0;
    let mut inside = 0.0;
    for (v, &m) in heatmap.values.iter().zip(gt_mask.iter()) {
        total += v;
        if m == 1 {
            inside += v;
        }
    }
    if total == 0.0 {
        return Ok(Coverage {
            fraction: 0.0,
            degenerate: true,
        });
    }
    Ok(Coverage {
        fraction: inside / total,
        degenerate: false,
    })
}

/// Render the heatmap as 8-bit grayscale (`round(255·v)`).
pub fn heatmap_to_gray(heatmap: &Heatmap) -> GrayImage {
    let (h, w) = heatmap.values.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(heatmap.values[[y as usize, x as usize]] * 255.0).round() as u8])
    })
}

pub fn write_heatmap_png(path: &Path, heatmap: &Heatmap) -> Result<()> {
    heatmap_to_gray(heatmap)
        .save(path)
        .map_err(|e| Error::io(path, format!("writing heatmap: {e}")))
}
