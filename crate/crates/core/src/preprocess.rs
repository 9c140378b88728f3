//! Resizing, normalization, one-hot encoding, and training-time
//! augmentation.
//!
//! All tensors are channel-first: images are `(3, H, W)` in `[0, 1]`,
//! one-hot targets `(2, H, W)` with channel 1 the polyp class, masks
//! `(H, W)` over `{0, 1}`. Augmentation takes an explicit generator so
//! callers control both the draw stream and its isolation per sample.

use crate::dataset::RawSample;
use crate::error::{Error, Result};
use image::imageops::{self, FilterType};
use ndarray::{s, Array2, Array3};
use rand::Rng;

/// A sample in model coordinates: normalized image plus aligned mask and
/// one-hot target at a common square resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSample {
    pub id: String,
    /// `(3, side, side)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// `(side, side)`, values in `{0, 1}`.
    pub mask: Array2<u8>,
    /// `(2, side, side)`; channel 0 background, channel 1 polyp; channels
    /// sum to exactly 1 at every pixel.
    pub onehot: Array3<f64>,
}

impl ProcessedSample {
    pub fn side(&self) -> usize {
        self.mask.nrows()
    }
}

/// Stochastic transform policy for training samples.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Rotation is drawn uniformly from `[-rot_degrees, +rot_degrees]`.
    pub rot_degrees: f64,
    /// Zoom factor drawn uniformly from this closed interval.
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            rot_degrees: 15.0,
            scale_range: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_hflip", self.p_hflip), ("p_vflip", self.p_vflip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        if self.rot_degrees < 0.0 || !self.rot_degrees.is_finite() {
            return Err(Error::Validation(format!(
                "rot_degrees must be a finite non-negative half-range, got {}",
                self.rot_degrees
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Validation(format!(
                "scale_range must be a positive interval, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// A policy whose every draw is a no-op; useful as a control.
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            rot_degrees: 0.0,
            scale_range: [1.0, 1.0],
            seed: 0,
        }
    }
}

/// Resize an image/mask pair to `side`x`side`: bicubic for the image,
/// nearest-neighbor for the mask so it stays binary. Resizing to the
/// current size is the identity.
pub fn resize_pair(sample: &RawSample, side: u32) -> Result<RawSample> {
    if side < crate::dataset::synth::MIN_SIDE {
        return Err(Error::Validation(format!(
            "target side must be at least {}, got {side}",
            crate::dataset::synth::MIN_SIDE
        )));
    }
    if sample.image.dimensions() == (side, side) {
        return Ok(sample.clone());
    }
    let image = imageops::resize(&sample.image, side, side, FilterType::CatmullRom);
    let mask = imageops::resize(&sample.mask, side, side, FilterType::Nearest);
    Ok(RawSample {
        id: sample.id.clone(),
        image,
        mask,
    })
}

/// Map 8-bit channel values onto `[0, 1]` by dividing by 255. The `u8`
/// pixel type makes the `[0, 255]` input precondition structural.
pub fn normalize(image: &image::RgbImage) -> Array3<f64> {
    let (w, h) = image.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    out
}

/// Expand a `{0, 1}` mask into (background, polyp) channels.
pub fn one_hot(mask: &Array2<u8>) -> Result<Array3<f64>> {
    let (h, w) = mask.dim();
    let mut out = Array3::zeros((2, h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        match v {
            0 => out[[0, y, x]] = 1.0,
            1 => out[[1, y, x]] = 1.0,
            other => {
                return Err(Error::Validation(format!(
                    "mask must be binary; found value {other} at ({y}, {x})"
                )))
            }
        }
    }
    Ok(out)
}

fn mask_to_array(mask: &image::GrayImage) -> Array2<u8> {
    let (w, h) = mask.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in mask.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    out
}

/// Full deterministic pipeline: resize, normalize, one-hot.
pub fn process(sample: &RawSample, side: u32) -> Result<ProcessedSample> {
    let resized = resize_pair(sample, side)?;
    let image = normalize(&resized.image);
    let mask = mask_to_array(&resized.mask);
    let onehot = one_hot(&mask)?;
    Ok(ProcessedSample {
        id: resized.id,
        image,
        mask,
        onehot,
    })
}

/// Catmull-Rom kernel weights for fractional offset `t` over the four
/// taps at offsets -1..=2.
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic sample of one channel at real coordinates, clamping taps to the
/// frame so out-of-frame reads replicate the edge.
fn sample_bicubic(plane: ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = catmull_rom_weights(x - x0);
    let wy = catmull_rom_weights(y - y0);
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let yy = clamp(y0 + j as f64 - 1.0, h);
        for (i, wxi) in wx.iter().enumerate() {
            let xx = clamp(x0 + i as f64 - 1.0, w);
            acc += wyj * wxi * plane[[yy, xx]];
        }
    }
    acc
}

/// What one augmentation draw decided; applied identically to image, mask,
/// and one-hot target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_degrees: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        vflip: false,
        angle_degrees: 0.0,
        scale: 1.0,
    };

    /// Fixed draw order so a seed identifies a transform regardless of
    /// which policy fields are active.
    pub fn sample(policy: &AugmentPolicy, rng: &mut impl Rng) -> Self {
        let hflip = rng.gen_bool(policy.p_hflip);
        let vflip = rng.gen_bool(policy.p_vflip);
        let angle_degrees = rng.gen_range(-policy.rot_degrees..=policy.rot_degrees);
        let scale = rng.gen_range(policy.scale_range[0]..=policy.scale_range[1]);
        Self {
            hflip,
            vflip,
            angle_degrees,
            scale,
        }
    }

    fn needs_warp(&self) -> bool {
        self.angle_degrees != 0.0 || self.scale != 1.0
    }
}

fn flip_image(image: &Array3<f64>, hflip: bool, vflip: bool) -> Array3<f64> {
    let mut view = image.view();
    if hflip {
        view = view.slice_move(s![.., .., ..;-1]);
    }
    if vflip {
        view = view.slice_move(s![.., ..;-1, ..]);
    }
    view.to_owned()
}

fn flip_mask(mask: &Array2<u8>, hflip: bool, vflip: bool) -> Array2<u8> {
    let mut view = mask.view();
    if hflip {
        view = view.slice_move(s![.., ..;-1]);
    }
    if vflip {
        view = view.slice_move(s![..;-1, ..]);
    }
    view.to_owned()
}

/// Rotate+zoom about the frame center by inverse mapping: bicubic with
/// edge replication for the image, nearest with zero fill for the mask.
fn warp(
    image: &Array3<f64>,
    mask: &Array2<u8>,
    angle_degrees: f64,
    scale: f64,
) -> (Array3<f64>, Array2<u8>) {
    let (c, h, w) = image.dim();
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    let mut out_image = Array3::zeros((c, h, w));
    let mut out_mask = Array2::zeros((h, w));
    for oy in 0..h {
        for ox in 0..w {
            // Inverse of "rotate by theta then zoom by scale".
            let dy = (oy as f64 - cy) / scale;
            let dx = (ox as f64 - cx) / scale;
            let sy = cy + (-sin * dx + cos * dy);
            let sx = cx + (cos * dx + sin * dy);
            for ch in 0..c {
                let v = sample_bicubic(image.index_axis(ndarray::Axis(0), ch), sy, sx);
                out_image[[ch, oy, ox]] = v.clamp(0.0, 1.0);
            }
            let ny = sy.round();
            let nx = sx.round();
            let inside = ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64;
            out_mask[[oy, ox]] = if inside {
                mask[[ny as usize, nx as usize]]
            } else {
                0
            };
        }
    }
    (out_image, out_mask)
}

/// Apply a concrete draw to a sample. Flips are exact index permutations;
/// rotation/zoom warp the frame in place (same output size). The one-hot
/// target is rebuilt from the transformed mask, which keeps its channel
/// invariants exact.
pub fn apply_draw(sample: &ProcessedSample, draw: &AugmentDraw) -> ProcessedSample {
    if *draw == AugmentDraw::IDENTITY {
        return sample.clone();
    }
    let mut image = flip_image(&sample.image, draw.hflip, draw.vflip);
    let mut mask = flip_mask(&sample.mask, draw.hflip, draw.vflip);
    if draw.needs_warp() {
        (image, mask) = warp(&image, &mask, draw.angle_degrees, draw.scale);
    }
    let onehot = one_hot(&mask).expect("warped mask stays binary");
    ProcessedSample {
        id: sample.id.clone(),
        image,
        mask,
        onehot,
    }
}

/// Draw a transform from the policy and apply it.
pub fn augment(
    sample: &ProcessedSample,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> ProcessedSample {
    apply_draw(sample, &AugmentDraw::sample(policy, rng))
}
