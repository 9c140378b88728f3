//! Held-out evaluation, qualitative result panels, and metric tables.
//!
//! Everything written here is deterministic: identical inputs produce
//! byte-identical CSVs and PNGs, so report artifacts can be diffed across
//! runs.

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::gradcam::{self, Heatmap};
use crate::metrics::{self, MetricScope};
use crate::model::UNet;
use crate::preprocess::{self, ProcessedSample};
use crate::train::{self, EpochLog};
use image::RgbImage;
use ndarray::{Array2, Array3};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Comparison operating point printed next to the measured counts in the
/// run summary. Informational only — not asserted anywhere.
pub const REFERENCE_PARAMS: u64 = 32_521_250;
pub const REFERENCE_FLOPS: u64 = 50_902_000_000;

/// Thresholded metrics for one held-out image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub f_dice: f64,
}

/// Test-split evaluation results plus model cost accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_iou: f64,
    pub mean_f: f64,
    pub n: usize,
    pub model_params: usize,
    pub model_flops: u64,
}

impl TestReport {
    /// Aggregate per-image rows; means are arithmetic means over images.
    pub fn from_rows(per_image: Vec<ImageMetrics>, model_params: usize, model_flops: u64) -> Self {
        let pairs: Vec<(f64, f64)> = per_image.iter().map(|r| (r.iou, r.f_dice)).collect();
        let rec = metrics::MetricRecord::mean_of(&pairs, MetricScope::SplitMean);
        Self {
            n: per_image.len(),
            per_image,
            mean_iou: rec.iou,
            mean_f: rec.f_dice,
            model_params,
            model_flops,
        }
    }
}

/// Evaluate the model on the test split: per-image thresholded IoU and
/// Dice-F, with no augmentation anywhere on this path.
pub fn evaluate(
    model: &UNet,
    manifest: &DatasetManifest,
    test_ids: &[String],
    side: u32,
) -> Result<TestReport> {
    evaluate_with(
        |sample| {
            let pred = model.forward_one(&sample.image)?;
            Ok(metrics::binarize_prediction(&pred.probs))
        },
        manifest,
        test_ids,
        side,
        model.count_params(),
        model.count_flops(side as usize)?.flops,
    )
}

/// Evaluation loop over an arbitrary predictor, so the aggregation path
/// can be exercised with stub predictors in tests.
fn evaluate_with(
    predict: impl Fn(&ProcessedSample) -> Result<Array2<u8>>,
    manifest: &DatasetManifest,
    test_ids: &[String],
    side: u32,
    model_params: usize,
    model_flops: u64,
) -> Result<TestReport> {
    if test_ids.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let mut rows = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| Error::Validation(format!("id '{id}' not in dataset manifest")))?;
        let raw = crate::dataset::load_sample(entry).map_err(|e| match e {
            Error::Io { path, msg } => Error::Io {
                path,
                msg: format!("test sample '{id}': {msg}"),
            },
            other => other,
        })?;
        let sample = preprocess::process(&raw, side)?;
        let bin = predict(&sample)?;
        rows.push(ImageMetrics {
            id: id.clone(),
            iou: metrics::iou(&bin, &sample.mask)?,
            f_dice: metrics::dice_f(&bin, &sample.mask)?,
        });
    }
    Ok(TestReport::from_rows(rows, model_params, model_flops))
}

/// Inputs for one qualitative panel.
pub struct PanelInput<'a> {
    pub id: &'a str,
    /// `(3, S, S)` in `[0, 1]`.
    pub image: &'a Array3<f64>,
    pub gt: &'a Array2<u8>,
    pub pred: &'a Array2<u8>,
    /// Adds a fifth Grad-CAM tile when present.
    pub heatmap: Option<&'a Heatmap>,
}

/// Translucent green marking predicted-foreground pixels in the overlay
/// tile.
const PRED_TINT: [f64; 3] = [0.0, 255.0, 0.0];
const PANEL_ALPHA: f64 = 0.5;

fn image_to_rgb(image: &Array3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[[c, y as usize, x as usize]] * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn mask_to_rgb(mask: &Array2<u8>) -> RgbImage {
    let (h, w) = mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mask[[y as usize, x as usize]] * 255;
        image::Rgb([v, v, v])
    })
}

fn prediction_overlay(base: &RgbImage, pred: &Array2<u8>) -> RgbImage {
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if pred[[y as usize, x as usize]] == 1 {
            for ch in 0..3 {
                let blended =
                    (1.0 - PANEL_ALPHA) * px.0[ch] as f64 + PANEL_ALPHA * PRED_TINT[ch];
                px.0[ch] = blended.round() as u8;
            }
        }
    }
    out
}

/// Render one composite PNG per sample: original | ground truth |
/// prediction | prediction-overlay, plus a Grad-CAM overlay tile when a
/// heatmap is given. Tiles are equal-size with no gutter, so the panel is
/// `n_tiles·S` wide. Returns the written paths, one per input.
pub fn render_panels(out_dir: &Path, items: &[PanelInput]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::from_io(out_dir, e))?;
    let mut written = Vec::with_capacity(items.len());
    for item in items {
        let (c, h, w) = item.image.dim();
        if c != 3 || h != w {
            return Err(Error::Validation(format!(
                "panel '{}': image must be (3, S, S), got {:?}",
                item.id,
                item.image.dim()
            )));
        }
        if item.gt.dim() != (h, w) || item.pred.dim() != (h, w) {
            return Err(Error::Validation(format!(
                "panel '{}': mask shapes must match the image",
                item.id
            )));
        }
        let base = image_to_rgb(item.image);
        let mut tiles = vec![
            base.clone(),
            mask_to_rgb(item.gt),
            mask_to_rgb(item.pred),
            prediction_overlay(&base, item.pred),
        ];
        if let Some(hm) = item.heatmap {
            tiles.push(gradcam::overlay(&base, hm, PANEL_ALPHA)?);
        }

        let side = h as u32;
        let mut panel = RgbImage::new(side * tiles.len() as u32, side);
        for (t, tile) in tiles.iter().enumerate() {
            for (x, y, px) in tile.enumerate_pixels() {
                panel.put_pixel(t as u32 * side + x, y, *px);
            }
        }
        let path = out_dir.join(format!("{}.png", item.id));
        panel
            .save(&path)
            .map_err(|e| Error::io(&path, format!("writing panel: {e}")))?;
        written.push(path);
    }
    Ok(written)
}

/// Epochs highlighted in the selected-epochs table (plus the final row).
const SELECTED_EPOCHS: [usize; 5] = [0, 10, 20, 30, 40];

/// Rows of `logs` at the selected milestone epochs plus the last row,
/// deduplicated and in epoch order.
pub fn select_epochs(logs: &[EpochLog]) -> Vec<EpochLog> {
    let mut picked: Vec<EpochLog> = logs
        .iter()
        .filter(|l| SELECTED_EPOCHS.contains(&l.epoch))
        .cloned()
        .collect();
    if let Some(last) = logs.last() {
        if picked.last().map(|l| l.epoch) != Some(last.epoch) {
            picked.push(last.clone());
        }
    }
    picked
}

/// Write `epoch_log.csv`, `selected_epochs.csv`, `test_report.csv`, and
/// `summary.txt` into `out_dir`. Returns the written paths.
pub fn export_tables(
    out_dir: &Path,
    logs: &[EpochLog],
    report: &TestReport,
) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::Validation("cannot export tables from an empty epoch log".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::from_io(out_dir, e))?;
    let mut written = Vec::new();

    let epoch_log = out_dir.join("epoch_log.csv");
    train::write_epoch_log_csv(&epoch_log, logs)?;
    written.push(epoch_log);

    let selected = out_dir.join("selected_epochs.csv");
    train::write_epoch_log_csv(&selected, &select_epochs(logs))?;
    written.push(selected);

    written.extend(export_test_report(out_dir, report)?);
    Ok(written)
}

/// The test-split half of [`export_tables`]: `test_report.csv` plus
/// `summary.txt`, usable when no epoch log exists.
pub fn export_test_report(out_dir: &Path, report: &TestReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::from_io(out_dir, e))?;
    let mut written = Vec::new();

    let mut table = String::from("id,iou,f_dice\n");
    for row in &report.per_image {
        let _ = writeln!(table, "{},{},{}", row.id, row.iou, row.f_dice);
    }
    let report_csv = out_dir.join("test_report.csv");
    std::fs::write(&report_csv, table).map_err(|e| Error::from_io(&report_csv, e))?;
    written.push(report_csv);

    let summary = format!(
        "n_test: {}\nmean_iou: {}\nmean_f: {}\nmodel_params: {}\nmodel_flops: {}\nreference_params: {}\nreference_flops: {}\n",
        report.n,
        report.mean_iou,
        report.mean_f,
        report.model_params,
        report.model_flops,
        REFERENCE_PARAMS,
        REFERENCE_FLOPS,
    );
    let summary_path = out_dir.join("summary.txt");
    std::fs::write(&summary_path, summary).map_err(|e| Error::from_io(&summary_path, e))?;
    written.push(summary_path);

    Ok(written)
}
