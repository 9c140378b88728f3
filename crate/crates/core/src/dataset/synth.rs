//! Synthetic image/mask generator for self-contained runs and tests.
//!
//! Each sample is a textured background with 1–3 elliptical blobs whose
//! union is the mask. Every sample derives its own generator from the base
//! seed and its index, so sample `i` has the same bytes no matter how many
//! samples surround it.

use crate::error::{Error, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

/// Golden-ratio multiplier for decorrelating per-sample seeds.
const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Acceptable blob area as a fraction of the frame, bounds inclusive.
const FG_FRACTION: (f64, f64) = (0.03, 0.45);
const MAX_REDRAWS: usize = 24;

pub const MIN_SIDE: u32 = 32;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    color: [f64; 3],
    stripe_freq: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn draw_ellipse(rng: &mut ChaCha8Rng, side: f64) -> Ellipse {
    Ellipse {
        cx: rng.gen_range(0.2..0.8) * side,
        cy: rng.gen_range(0.2..0.8) * side,
        a: rng.gen_range(0.08..0.30) * side,
        b: rng.gen_range(0.08..0.30) * side,
        theta: rng.gen_range(0.0..std::f64::consts::PI),
        color: [
            rng.gen_range(120.0..220.0),
            rng.gen_range(40.0..95.0),
            rng.gen_range(60.0..140.0),
        ],
        stripe_freq: rng.gen_range(0.05..0.25),
    }
}

/// Deterministic fallback when random draws keep missing the area window:
/// one axis-aligned centered ellipse covering ~= 0.157 of the frame.
fn fallback_ellipse(side: f64) -> Ellipse {
    Ellipse {
        cx: side / 2.0,
        cy: side / 2.0,
        a: side / 4.0,
        b: side / 5.0,
        theta: 0.0,
        color: [190.0, 80.0, 100.0],
        stripe_freq: 0.1,
    }
}

fn coverage(ellipses: &[Ellipse], side: u32) -> f64 {
    let mut inside = 0usize;
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipses.iter().any(|e| e.contains(xf, yf)) {
                inside += 1;
            }
        }
    }
    inside as f64 / (side as f64 * side as f64)
}

/// Render one sample. The mask holds 0/255 (file convention); loading
/// binarizes it back to 0/1.
fn render(rng: &mut ChaCha8Rng, side: u32) -> (RgbImage, GrayImage) {
    let sidef = side as f64;

    // Blob geometry first: redraw until the union area lands in the
    // window, then fall back to a fixed shape so generation cannot fail.
    let mut ellipses: Vec<Ellipse> = Vec::new();
    for _ in 0..MAX_REDRAWS {
        let count = rng.gen_range(1..=3usize);
        let candidate: Vec<Ellipse> = (0..count).map(|_| draw_ellipse(rng, sidef)).collect();
        let frac = coverage(&candidate, side);
        if (FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) {
            ellipses = candidate;
            break;
        }
    }
    if ellipses.is_empty() {
        ellipses = vec![fallback_ellipse(sidef)];
    }

    // Background: two-tone diagonal gradient with low-frequency waves.
    // Green bands stay disjoint between blob and background across the
    // full texture swing (blob <= 95 + 7.2 stripe + 8 noise; background
    // >= 128 - 6 wave - 8 noise), so every blob is separable from its
    // surroundings: these samples exist for plumbing checks, and an
    // unlearnable draw would make those flaky.
    let base = [
        rng.gen_range(150.0..200.0),
        rng.gen_range(128.0..160.0),
        rng.gen_range(90.0..140.0),
    ];
    let wave_freq = rng.gen_range(0.02..0.08);
    let mut image = RgbImage::new(side, side);
    let mut mask = GrayImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = 12.0 * ((xf * wave_freq).sin() + (yf * wave_freq * 1.3).cos());
            let grad = 20.0 * (xf + yf) / (2.0 * sidef);
            let mut px = [
                base[0] + wave + grad,
                base[1] + wave * 0.5 + grad,
                base[2] + wave * 0.6 + grad,
            ];
            let mut hit = false;
            for e in &ellipses {
                if e.contains(xf, yf) {
                    let stripe = 18.0 * ((xf + yf) * e.stripe_freq).sin();
                    px = [
                        e.color[0] + stripe,
                        e.color[1] + stripe * 0.4,
                        e.color[2] + stripe * 0.5,
                    ];
                    hit = true;
                    break;
                }
            }
            let noise: f64 = rng.gen_range(-8.0..8.0);
            let quant = |v: f64| (v + noise).round().clamp(0.0, 255.0) as u8;
            image.put_pixel(x, y, Rgb([quant(px[0]), quant(px[1]), quant(px[2])]));
            mask.put_pixel(x, y, Luma([if hit { 255 } else { 0 }]));
        }
    }
    (image, mask)
}

/// Generate `n` samples of `side`x`side` pixels under `out_dir` using the
/// standard `images/` + `masks/` layout, and return the new ids in order.
/// Rerunning with the same arguments reproduces every file byte for byte.
pub fn generate_synthetic(out_dir: &Path, n: usize, side: u32, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::Validation(
            "synthetic sample count must be at least 1".into(),
        ));
    }
    if side < MIN_SIDE {
        return Err(Error::Validation(format!(
            "synthetic side must be at least {MIN_SIDE}, got {side}"
        )));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::from_io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::from_io(&masks_dir, e))?;

    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth{i:04}");
        let sample_seed = seed.wrapping_mul(SEED_MIX).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let (image, mask) = render(&mut rng, side);
        let image_path = images_dir.join(format!("{id}.png"));
        let mask_path = masks_dir.join(format!("{id}.png"));
        image
            .save(&image_path)
            .map_err(|e| Error::io(&image_path, e.to_string()))?;
        mask.save(&mask_path)
            .map_err(|e| Error::io(&mask_path, e.to_string()))?;
        ids.push(id);
    }
    Ok(ids)
}
