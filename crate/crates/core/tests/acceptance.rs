//! Release acceptance gate. One test per criterion (a01..a11), each
//! asserting its pinned tolerance or budget and printing a `PASS` line
//! with the measured numbers (visible with `--nocapture`).
//!
//! The overfit run (a05) is shared with the attention-coverage check
//! (a08e) through a lazily built fixture, so the suite trains exactly
//! once.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use polypseg::dataset::{self, synth, DatasetManifest, ManifestEntry};
use polypseg::error::Error;
use polypseg::gradcam;
use polypseg::metrics::{self, DiceMode, DEFAULT_EPS};
use polypseg::model::{layers::Conv2d, UNet, UNetConfig};
use polypseg::preprocess::{self, apply_draw, AugmentDraw, AugmentPolicy, ProcessedSample};
use polypseg::report;
use polypseg::train::{self, checkpoint, EpochLog, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- pinned tolerances and budgets ------------------------------------

const ORACLE_PAIRS: usize = 1_000;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(5);
const IDENTITY_TOL: f64 = 1e-12;

const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_TOL: f64 = 1e-4;
// Guards the relative-error denominator where both gradients are ~0 and
// central differences are pure rounding noise. The loss difference
// carries a few ulps of the loss (~1e-16), so the finest step below
// leaves ~1e-10 of gradient noise; the floor sits 10x above the point
// where that noise alone would trip the tolerance, and any absolute
// gradient error >= 1e-9 still registers.
const GRADCHECK_DENOM_FLOOR: f64 = 1e-5;
// Finer steps for entries whose probe interval straddles a ReLU/max-pool
// switch point; the ladder stays far above the f64 rounding floor.
const GRADCHECK_KINK_STEPS: [f64; 2] = [1e-5, 1e-6];
// At most this fraction of parameters may need a kink re-probe.
const GRADCHECK_KINK_FRACTION: f64 = 0.02;
const GRADCHECK_TIME_LIMIT: Duration = Duration::from_secs(120);

const SOFTMAX_TOL: f64 = 1e-5;

const OVERFIT_DICE_TARGET: f64 = 0.95;
const OVERFIT_LOSS_DROP: f64 = 0.05;
const OVERFIT_STEP_BUDGET: usize = 200;
const OVERFIT_TIME_LIMIT: Duration = Duration::from_secs(600);

const FLIP_DRAWS: usize = 10_000;
const FLIP_FREQ_BAND: (f64, f64) = (0.485, 0.515);
const ROTATION_MIN_IOU: f64 = 0.9;

const CAM_TOY_TOL: f64 = 1e-6;
const CAM_SHIFT_MIN: f64 = 0.05;

const SINGLE_CONV_PARAMS: usize = 1_792;
const ROUND_TRIP_INPUTS: usize = 10;
const SMOKE_TIME_LIMIT: Duration = Duration::from_secs(300);

// ---- helpers -----------------------------------------------------------

fn random_masks(side: usize, n: usize, seed: u64) -> Vec<(Array2<u8>, Array2<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let da = rng.gen_range(0.0..=1.0);
            let db = rng.gen_range(0.0..=1.0);
            let a = Array2::from_shape_simple_fn((side, side), || u8::from(rng.gen_bool(da)));
            let b = Array2::from_shape_simple_fn((side, side), || u8::from(rng.gen_bool(db)));
            (a, b)
        })
        .collect()
}

fn random_image(side: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((3, side, side), || rng.gen_range(0.0..=1.0))
}

fn disk_mask(side: usize, radius_frac: f64) -> Array2<u8> {
    let c = (side as f64 - 1.0) / 2.0;
    let r2 = (radius_frac * side as f64).powi(2);
    Array2::from_shape_fn((side, side), |(y, x)| {
        u8::from((y as f64 - c).powi(2) + (x as f64 - c).powi(2) < r2)
    })
}

fn sample_with_disk(side: usize, seed: u64) -> ProcessedSample {
    let mask = disk_mask(side, 0.25);
    ProcessedSample {
        id: "acc".into(),
        image: random_image(side, seed),
        onehot: preprocess::one_hot(&mask).unwrap(),
        mask,
    }
}

fn toy_model(widths: Vec<usize>, bottleneck: usize, seed: u64) -> UNet {
    UNet::build(UNetConfig {
        encoder_widths: widths,
        bottleneck_width: bottleneck,
        seed,
        ..UNetConfig::default()
    })
    .unwrap()
}

// ---- shared overfit fixture (a05, a08e) --------------------------------

struct Overfit {
    model: UNet,
    samples: Vec<ProcessedSample>,
    rows: Vec<EpochLog>,
    converged: bool,
    seconds: f64,
}

static OVERFIT: OnceLock<Overfit> = OnceLock::new();

fn overfit() -> &'static Overfit {
    OVERFIT.get_or_init(|| {
        const CONVERGED: &str = "overfit target reached";
        let dir = tempfile::tempdir().unwrap();
        let ids = synth::generate_synthetic(dir.path(), 4, 128, 5).unwrap();
        let manifest = dataset::scan_dataset(dir.path()).unwrap();

        let mut model = toy_model(vec![16, 32], 64, 42);
        // lr calibrated so the dice target lands well inside the step
        // budget on this fixture (seeds 5/42/9).
        let cfg = TrainConfig {
            lr: 3e-3,
            max_epochs: OVERFIT_STEP_BUDGET,
            batch_size: 4,
            early_stop_patience: 0,
            seed: 9,
            augment: AugmentPolicy::disabled(),
            ..TrainConfig::default()
        };

        let clock = Instant::now();
        let mut rows: Vec<EpochLog> = Vec::new();
        let mut initial_loss = f64::NAN;
        let result = train::train(
            &mut model,
            &manifest,
            &ids,
            &[],
            &cfg,
            128,
            None,
            &mut |row| {
                if rows.is_empty() {
                    initial_loss = row.train_loss;
                }
                rows.push(row.clone());
                if row.train_f > OVERFIT_DICE_TARGET
                    && row.train_loss < OVERFIT_LOSS_DROP * initial_loss
                {
                    return Err(Error::Runtime(CONVERGED.into()));
                }
                Ok(())
            },
        );
        let seconds = clock.elapsed().as_secs_f64();
        let converged = match result {
            Err(Error::Runtime(msg)) if msg == CONVERGED => true,
            Ok(_) => false,
            Err(e) => panic!("overfit training failed: {e}"),
        };

        let samples = ids
            .iter()
            .map(|id| {
                let raw = dataset::load_sample(manifest.entry(id).unwrap()).unwrap();
                preprocess::process(&raw, 128).unwrap()
            })
            .collect();

        Overfit {
            model,
            samples,
            rows,
            converged,
            seconds,
        }
    })
}

// ---- criteria -----------------------------------------------------------

#[test]
fn a01_iou_and_dice_match_a_pixel_counting_oracle_exactly() {
    let clock = Instant::now();
    for (pred, gt) in random_masks(8, ORACLE_PAIRS, 101) {
        let (mut inter, mut union, mut psum, mut gsum) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..8 {
            for x in 0..8 {
                let p = pred[[y, x]] != 0;
                let g = gt[[y, x]] != 0;
                inter += u64::from(p && g);
                union += u64::from(p || g);
                psum += u64::from(p);
                gsum += u64::from(g);
            }
        }
        let oracle_iou = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        let oracle_dice = if psum + gsum == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (psum + gsum) as f64
        };
        assert_eq!(metrics::iou(&pred, &gt).unwrap(), oracle_iou);
        assert_eq!(metrics::dice_f(&pred, &gt).unwrap(), oracle_dice);
    }
    let elapsed = clock.elapsed();
    assert!(elapsed < ORACLE_TIME_LIMIT, "took {elapsed:.2?}");
    println!("PASS a01: {ORACLE_PAIRS} mask pairs matched the counting oracle exactly in {elapsed:.2?}");
}

#[test]
fn a02_dice_equals_two_iou_over_one_plus_iou() {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (pred, gt) in random_masks(8, ORACLE_PAIRS, 202) {
        if pred.iter().all(|&v| v == 0) && gt.iter().all(|&v| v == 0) {
            continue; // both-empty convention: both scores are defined as 1
        }
        let iou = metrics::iou(&pred, &gt).unwrap();
        let dice = metrics::dice_f(&pred, &gt).unwrap();
        worst = worst.max((dice - 2.0 * iou / (1.0 + iou)).abs());
        checked += 1;
    }
    assert!(checked > ORACLE_PAIRS / 2);
    assert!(worst <= IDENTITY_TOL, "max identity deviation {worst:e}");
    println!("PASS a02: dice = 2*iou/(1+iou) on {checked} pairs, max deviation {worst:e}");
}

#[test]
fn a03_analytic_gradients_match_central_differences_for_every_parameter() {
    let clock = Instant::now();
    let mut model = toy_model(vec![8, 16], 32, 31);
    let image = random_image(32, 32);
    let mask = disk_mask(32, 0.3);
    let onehot = preprocess::one_hot(&mask).unwrap();

    let loss_of = |model: &UNet| {
        let pred = model.forward_one(&image).unwrap();
        metrics::soft_dice_loss(&pred.probs, &onehot, DEFAULT_EPS, DiceMode::Foreground)
            .unwrap()
            .value
    };

    let (pred, trace) = model.forward_one_traced(&image).unwrap();
    let (_, grad_logits) =
        metrics::soft_dice_loss_logit_grad(&pred.probs, &onehot, DEFAULT_EPS, DiceMode::Foreground)
            .unwrap();
    let analytic = model.backward_param_grads(&trace, &grad_logits);

    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |name, p| layout.push((name.to_string(), p.len())));

    fn nudge(model: &mut UNet, name: &str, idx: usize, delta: f64) {
        model.visit_params_mut(&mut |n, mut p| {
            if n == name {
                p.as_slice_memory_order_mut().unwrap()[idx] += delta;
            }
        });
    }

    let probe = |model: &mut UNet, name: &str, idx: usize, step: f64| {
        nudge(model, name, idx, step);
        let plus = loss_of(model);
        nudge(model, name, idx, -2.0 * step);
        let minus = loss_of(model);
        nudge(model, name, idx, step);
        (plus - minus) / (2.0 * step)
    };
    let rel_err = |a: f64, numeric: f64| {
        (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_DENOM_FLOOR)
    };

    // The net is piecewise linear in each weight (ReLU, max-pool), so a
    // probe interval of width 2h occasionally straddles a switch point and
    // the central difference measures an average of two subgradients
    // instead of the derivative. Those entries are re-probed at a finer
    // step where the interval no longer crosses the kink; a genuine
    // backward bug would not shrink with h, and the fallback is capped to
    // a small fraction of parameters so systematic disagreement still
    // fails.
    let mut n_checked = 0usize;
    let mut n_reprobed = 0usize;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, len) in layout {
        let grads = analytic[&name].as_slice_memory_order().unwrap().to_vec();
        for idx in 0..len {
            let a = grads[idx];
            let mut rel = rel_err(a, probe(&mut model, &name, idx, GRADCHECK_STEP));
            if rel > GRADCHECK_TOL {
                n_reprobed += 1;
                for step in GRADCHECK_KINK_STEPS {
                    rel = rel_err(a, probe(&mut model, &name, idx, step));
                    if rel <= GRADCHECK_TOL {
                        break;
                    }
                }
            }
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{idx}]");
            }
            n_checked += 1;
        }
    }

    let elapsed = clock.elapsed();
    assert!(
        worst < GRADCHECK_TOL,
        "max relative error {worst:e} at {worst_at}"
    );
    let reprobe_cap = (n_checked as f64 * GRADCHECK_KINK_FRACTION) as usize;
    assert!(
        n_reprobed <= reprobe_cap,
        "{n_reprobed} of {n_checked} entries needed the fine step (cap {reprobe_cap})"
    );
    assert!(elapsed < GRADCHECK_TIME_LIMIT, "took {elapsed:.2?}");
    println!(
        "PASS a03: {n_checked} parameter gradients within {GRADCHECK_TOL:e} \
         (worst {worst:e} at {worst_at}, {n_reprobed} kink re-probes) in {elapsed:.2?}"
    );
}

#[test]
fn a04_softmax_probabilities_sum_to_one_per_pixel() {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let model = toy_model(vec![4, 8], 16, seed);
        let pred = model.forward_one(&random_image(32, 40 + seed)).unwrap();
        let sums = pred.probs.sum_axis(Axis(0));
        worst = worst.max(
            sums.iter()
                .map(|s| (s - 1.0).abs())
                .fold(0.0f64, f64::max),
        );
    }
    assert!(worst <= SOFTMAX_TOL, "max |sum - 1| = {worst:e}");
    println!("PASS a04: per-pixel probability sums within {SOFTMAX_TOL:e} of 1 (worst {worst:e})");
}

#[test]
fn a05_overfits_four_synthetic_samples_within_the_step_budget() {
    let fix = overfit();
    // One optimizer step per epoch: full-batch over the 4 samples.
    let crossing = fix
        .rows
        .iter()
        .position(|r| r.train_f > OVERFIT_DICE_TARGET)
        .map(|i| i + 1);
    let initial = fix.rows.first().unwrap().train_loss;
    let last = fix.rows.last().unwrap();

    assert!(
        fix.converged,
        "never reached dice {OVERFIT_DICE_TARGET} + loss drop within {OVERFIT_STEP_BUDGET} steps \
         (best dice {:.4})",
        fix.rows.iter().map(|r| r.train_f).fold(0.0, f64::max)
    );
    let crossing = crossing.unwrap();
    assert!(crossing <= OVERFIT_STEP_BUDGET);
    assert!(
        last.train_loss < OVERFIT_LOSS_DROP * initial,
        "final loss {} vs initial {initial}",
        last.train_loss
    );
    assert!(
        fix.seconds < OVERFIT_TIME_LIMIT.as_secs_f64(),
        "took {:.1}s",
        fix.seconds
    );
    println!(
        "PASS a05: train dice {:.4} > {OVERFIT_DICE_TARGET} at step {crossing} (budget \
         {OVERFIT_STEP_BUDGET}); loss {:.4} < {OVERFIT_LOSS_DROP} x {initial:.4}; {:.1}s",
        last.train_f, last.train_loss, fix.seconds
    );
}

#[test]
fn a06_splits_are_exact_partitions_at_the_published_ratios() {
    let manifest_of = |n: usize| {
        let entries: Vec<ManifestEntry> = (0..n)
            .map(|i| ManifestEntry {
                id: format!("s{i:05}"),
                image_path: format!("mem/images/s{i:05}.png").into(),
                mask_path: format!("mem/masks/s{i:05}.png").into(),
            })
            .collect();
        DatasetManifest {
            entries,
            root: "mem".into(),
            checksum: String::new(),
        }
    };

    let split = dataset::split_manifest(&manifest_of(1000), 0).unwrap();
    assert_eq!(
        (split.train.len(), split.val.len(), split.test.len()),
        (792, 88, 120)
    );

    for n in 3..=2000usize {
        let manifest = manifest_of(n);
        let a = dataset::split_manifest(&manifest, 7).unwrap();
        let b = dataset::split_manifest(&manifest, 7).unwrap();
        assert_eq!(a, b, "same seed must reproduce the split (n={n})");

        assert_eq!(a.train.len() + a.val.len() + a.test.len(), n);
        let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n, "splits overlap or drop ids (n={n})");
    }
    println!("PASS a06: 1000 -> 792/88/120; partition + determinism for all n in [3, 2000]");
}

#[test]
fn a07_augmentation_draws_are_calibrated_and_mask_consistent() {
    // Flip frequency over seeded draws from the full default policy.
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let flips = (0..FLIP_DRAWS)
        .filter(|_| AugmentDraw::sample(&policy, &mut rng).hflip)
        .count();
    let freq = flips as f64 / FLIP_DRAWS as f64;
    assert!(
        (FLIP_FREQ_BAND.0..=FLIP_FREQ_BAND.1).contains(&freq),
        "hflip frequency {freq}"
    );

    // Flip twice is the identity, exactly, for image, mask, and one-hot.
    let sample = sample_with_disk(64, 7);
    let hflip = AugmentDraw {
        hflip: true,
        ..AugmentDraw::IDENTITY
    };
    let twice = apply_draw(&apply_draw(&sample, &hflip), &hflip);
    assert_eq!(twice.image, sample.image);
    assert_eq!(twice.mask, sample.mask);
    assert_eq!(twice.onehot, sample.onehot);

    // Joint transform: a flipped sample's mask equals the mask flipped by
    // an independent index-reversal.
    let flipped = apply_draw(&sample, &hflip);
    let (h, w) = sample.mask.dim();
    for y in 0..h {
        for x in 0..w {
            assert_eq!(flipped.mask[[y, x]], sample.mask[[y, w - 1 - x]]);
            for c in 0..3 {
                assert_eq!(flipped.image[[c, y, x]], sample.image[[c, y, w - 1 - x]]);
            }
        }
    }

    // Rotations: the warped mask agrees with a forward-mapped rasterized
    // oracle of the same rotation.
    for angle in [-15.0, 15.0] {
        let draw = AugmentDraw {
            angle_degrees: angle,
            ..AugmentDraw::IDENTITY
        };
        let out = apply_draw(&sample, &draw);
        let oracle = forward_mapped_mask(&sample.mask, angle);
        let iou = metrics::iou(&out.mask, &oracle).unwrap();
        assert!(
            iou >= ROTATION_MIN_IOU,
            "angle {angle}: mask/oracle IoU {iou}"
        );
    }
    println!(
        "PASS a07: hflip frequency {freq:.4} in [{}, {}]; flip identities exact; \
         rotation mask IoU >= {ROTATION_MIN_IOU}",
        FLIP_FREQ_BAND.0, FLIP_FREQ_BAND.1
    );
}

/// Rotate every foreground pixel of `mask` about the image center and
/// rasterize by rounding: an oracle independent of the warp implementation.
fn forward_mapped_mask(mask: &Array2<u8>, angle_degrees: f64) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array2::zeros((h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let oy = (cy + sin * dx + cos * dy).round();
        let ox = (cx + cos * dx - sin * dy).round();
        if oy >= 0.0 && ox >= 0.0 && (oy as usize) < h && (ox as usize) < w {
            out[[oy as usize, ox as usize]] = 1;
        }
    }
    out
}

#[test]
fn a08_gradcam_zeroes_matches_toy_stays_bounded_moves_and_localizes() {
    // (a) zero output head -> all-zero heatmap.
    let mut zeroed = toy_model(vec![4, 8], 16, 1);
    zeroed.visit_params_mut(&mut |name, mut p| {
        if name.starts_with("out.") {
            p.fill(0.0);
        }
    });
    let hm = gradcam::gradcam(&zeroed, &random_image(16, 2), None).unwrap();
    assert!(hm.values.iter().all(|&v| v == 0.0), "(a) nonzero heatmap");

    // (b) one decoder channel, unit objective gradient: the heatmap is the
    // normalized ReLU of the tap activation itself.
    let mut toy = toy_model(vec![1, 2], 4, 7);
    toy.visit_params_mut(&mut |name, mut p| {
        if name == "out.weight" {
            p.fill(0.0);
            p[[1, 0, 0, 0]] = 1.0;
        }
        if name == "out.bias" {
            p[[0]] = 1e6; // background wins everywhere: objective covers all pixels
            p[[1]] = 0.0;
        }
    });
    let image = random_image(16, 3);
    let (_, taps, _) = toy.forward_with_taps(&image).unwrap();
    let act = taps[&toy.last_decoder_tap()].index_axis(Axis(0), 0).to_owned();
    let relu = act.mapv(|v| v.max(0.0));
    let (lo, hi) = (
        relu.iter().cloned().fold(f64::INFINITY, f64::min),
        relu.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let expected = if hi > lo {
        relu.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(relu.dim())
    };
    let hm = gradcam::gradcam(&toy, &image, None).unwrap();
    let toy_dev = hm
        .values
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(toy_dev < CAM_TOY_TOL, "(b) toy deviation {toy_dev:e}");

    // (c) range and shape, at every tap.
    let model = toy_model(vec![4, 8], 16, 4);
    let image = random_image(16, 5);
    for tap in model.tap_names() {
        let hm = gradcam::gradcam(&model, &image, Some(&tap)).unwrap();
        assert_eq!(hm.values.dim(), (16, 16), "(c) {tap}");
        assert!(
            hm.values.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "(c) {tap} out of range"
        );
    }

    // (d) weight randomization moves the heatmap.
    let other = toy_model(vec![4, 8], 16, 400);
    let mut shift = 0.0;
    let n_inputs = 4;
    for seed in 0..n_inputs {
        let image = random_image(16, 60 + seed);
        let a = gradcam::gradcam(&model, &image, None).unwrap();
        let b = gradcam::gradcam(&other, &image, None).unwrap();
        shift += a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.values.len() as f64;
    }
    shift /= n_inputs as f64;
    assert!(shift > CAM_SHIFT_MIN, "(d) mean |delta| {shift}");

    // (e) the overfit model attends its own polyps better than a uniform
    // heatmap would.
    let fix = overfit();
    let mut localized = 0usize;
    let mut detail = Vec::new();
    for s in &fix.samples {
        let hm = gradcam::gradcam(&fix.model, &s.image, None).unwrap();
        let cov = gradcam::attention_coverage(&hm, &s.mask).unwrap();
        let gt_frac = s.mask.iter().filter(|&&v| v != 0).count() as f64 / s.mask.len() as f64;
        localized += usize::from(cov.fraction > gt_frac);
        detail.push(format!("{:.3}>{:.3}", cov.fraction, gt_frac));
    }
    assert!(
        localized >= 3,
        "(e) only {localized}/4 samples beat the uniform baseline ({})",
        detail.join(", ")
    );
    println!(
        "PASS a08: zero-head zeros; toy dev {toy_dev:e}; taps bounded; \
         randomization shift {shift:.3}; coverage beats baseline on {localized}/4"
    );
}

#[test]
fn a09_parameter_and_flop_accounting_is_closed_form_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::new(3, 64, 3, &mut rng);
    assert_eq!(conv.param_count(), SINGLE_CONV_PARAMS);

    let first = UNet::build(UNetConfig::default()).unwrap();
    let params = first.count_params();
    let flops = first.count_flops(256).unwrap();
    drop(first);
    let second = UNet::build(UNetConfig::default()).unwrap();
    assert_eq!(second.count_params(), params);
    assert_eq!(second.count_flops(256).unwrap().flops, flops.flops);

    // Informational comparison point, not an equality assertion.
    println!(
        "PASS a09: single conv = {SINGLE_CONV_PARAMS} params; default config {params} params / \
         {} FLOPs at 256x256 (reference operating point: {} params / {} FLOPs)",
        flops.flops,
        report::REFERENCE_PARAMS,
        report::REFERENCE_FLOPS
    );
}

#[test]
fn a10_checkpoint_round_trip_preserves_forward_outputs_bitwise() {
    let model = toy_model(vec![4, 8], 16, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save_checkpoint(&path, &model, None).unwrap();
    let (loaded, state) = checkpoint::load_checkpoint(&path).unwrap();
    assert!(state.is_none());

    for seed in 0..ROUND_TRIP_INPUTS as u64 {
        let image = random_image(16, 1000 + seed);
        let a = model.forward_one(&image).unwrap();
        let b = loaded.forward_one(&image).unwrap();
        assert_eq!(a.logits, b.logits, "input {seed}");
        assert_eq!(a.probs, b.probs, "input {seed}");
    }
    println!("PASS a10: save/load reproduced forwards bitwise on {ROUND_TRIP_INPUTS} inputs");
}

#[test]
fn a11_cli_pipeline_runs_end_to_end_and_writes_every_artifact() {
    let clock = Instant::now();
    let bin = env!("CARGO_BIN_EXE_polypseg");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            r#"
[dataset]
root = "{}"

[preprocess]
side = 64

[model]
encoder_widths = [8, 16]
bottleneck_width = 32

[train]
max_epochs = 2
early_stop_patience = 2
batch_size = 4

[output]
dir = "{}"
"#,
            data.display(),
            out.display()
        ),
    )
    .unwrap();

    let run = |args: &[&str]| {
        let output = Command::new(bin).args(args).output().unwrap();
        assert!(
            output.status.success(),
            "`{}` failed:\n{}",
            args.join(" "),
            String::from_utf8_lossy(&output.stderr)
        );
    };
    let data_str = data.to_str().unwrap();
    run(&["synth", "--out", data_str, "--n", "16", "--side", "64", "--seed", "1"]);
    let cfg_str = config.to_str().unwrap();
    run(&["prepare", "--config", cfg_str]);
    run(&["train", "--config", cfg_str]);
    run(&["eval", "--config", cfg_str]);
    run(&["explain", "--config", cfg_str]);

    for required in ["epoch_log.csv", "test_report.csv"] {
        assert!(out.join(required).is_file(), "missing {required}");
    }
    let pngs = |sub: &str| {
        std::fs::read_dir(out.join(sub))
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().and_then(|x| x.to_str()) == Some("png")
            })
            .count()
    };
    let n_panels = pngs("panels");
    let n_heatmaps = pngs("cam");
    assert!(n_panels >= 1, "no panel PNGs");
    assert!(n_heatmaps >= 1, "no heatmap PNGs");

    let elapsed = clock.elapsed();
    assert!(elapsed < SMOKE_TIME_LIMIT, "took {elapsed:.2?}");
    println!(
        "PASS a11: synth/prepare/train/eval/explain all exited 0; {n_panels} panels, \
         {n_heatmaps} heatmaps in {elapsed:.2?}"
    );
}
