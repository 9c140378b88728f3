//! Optimization loop: Adam on the soft Dice objective with per-epoch
//! train/val metrics, early stopping on a validation metric, and best-model
//! tracking.
//!
//! Determinism contract: all randomness (epoch shuffles, per-sample
//! augmentation draws) derives from config seeds, and the numeric kernels
//! are single-threaded and bitwise deterministic, so identical
//! config/data/seed reruns produce identical epoch logs except for the
//! wall-time column.

pub mod checkpoint;

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::metrics::{self, DiceMode, MetricScope};
use crate::model::{GradStore, UNet};
use crate::preprocess::{self, AugmentPolicy, ProcessedSample};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Which validation quantity drives early stopping and best-model
/// selection. Loss improves downward, the metrics upward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    ValIou,
    ValDice,
    ValLoss,
}

impl StopMetric {
    fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            StopMetric::ValIou | StopMetric::ValDice => candidate > incumbent,
            StopMetric::ValLoss => candidate < incumbent,
        }
    }

    fn pick(self, log: &EpochLog) -> f64 {
        match self {
            StopMetric::ValIou => log.val_iou,
            StopMetric::ValDice => log.val_f,
            StopMetric::ValLoss => log.val_loss,
        }
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 50,
            batch_size: 8,
            early_stop_patience: 10,
            early_stop_metric: StopMetric::ValIou,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        self.augment.validate()
    }
}

/// One completed epoch's metrics. Validation columns are NaN when the
/// validation split is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_iou: f64,
    pub train_f: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,train_iou,train_f,train_loss,val_iou,val_f,val_loss,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_iou,
            self.train_f,
            self.train_loss,
            self.val_iou,
            self.val_f,
            self.val_loss,
            self.seconds
        )
    }
}

/// Write the full epoch log as CSV (header + one row per epoch).
pub fn write_epoch_log_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from(EPOCH_LOG_HEADER);
    text.push('\n');
    for log in logs {
        let _ = writeln!(text, "{}", log.csv_row());
    }
    std::fs::write(path, text).map_err(|e| Error::from_io(path, e))
}

/// Line-delimited JSON mirror of the epoch log. NaN (empty validation
/// split) serializes as null.
pub fn write_epoch_log_jsonl(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for log in logs {
        let value = serde_json::json!({
            "epoch": log.epoch,
            "train_iou": finite_or_null(log.train_iou),
            "train_f": finite_or_null(log.train_f),
            "train_loss": finite_or_null(log.train_loss),
            "val_iou": finite_or_null(log.val_iou),
            "val_f": finite_or_null(log.val_f),
            "val_loss": finite_or_null(log.val_loss),
            "seconds": log.seconds,
        });
        let _ = writeln!(text, "{value}");
    }
    std::fs::write(path, text).map_err(|e| Error::from_io(path, e))
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Parse a CSV written by [`write_epoch_log_csv`].
pub fn read_epoch_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from_io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EPOCH_LOG_HEADER => {}
        other => {
            return Err(Error::Validation(format!(
                "{}: bad epoch log header {other:?}",
                path.display()
            )))
        }
    }
    let mut logs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Validation(format!(
                "{}:{}: expected 8 columns, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Validation(format!("{}:{}: bad number '{s}'", path.display(), i + 2))
            })
        };
        logs.push(EpochLog {
            epoch: fields[0].parse().map_err(|_| {
                Error::Validation(format!("{}:{}: bad epoch index", path.display(), i + 2))
            })?,
            train_iou: parse(fields[1])?,
            train_f: parse(fields[2])?,
            train_loss: parse(fields[3])?,
            val_iou: parse(fields[4])?,
            val_f: parse(fields[5])?,
            val_loss: parse(fields[6])?,
            seconds: parse(fields[7])?,
        });
    }
    Ok(logs)
}

/// Adam with standard moment defaults; state is keyed by parameter name
/// so it can be checkpointed next to the model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

/// Serializable optimizer state for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_state(lr: f64, state: AdamState) -> Self {
        Self {
            step: state.step,
            m: state.m,
            v: state.v,
            ..Self::new(lr)
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One update over all parameters present in `grads`.
    pub fn apply(&mut self, model: &mut UNet, grads: &GradStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        model.visit_params_mut(&mut |name, mut p| {
            let Some(g) = grads.get(name) else { return };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        });
    }
}

/// Pure early-stopping rule: stop after `patience` consecutive
/// non-improving observations (patience 0 disables stopping).
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    metric: StopMetric,
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(metric: StopMetric, patience: usize) -> Self {
        Self {
            metric,
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Feed one observation; returns true when the improvement streak is
    /// exhausted and training should stop.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, incumbent)) => self.metric.improves(value, incumbent),
        };
        if improved {
            self.best = Some((epoch, value));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters the model now holds (best by the stop
    /// metric; last epoch when there is no validation split).
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    /// Optimizer state as of the parameters the model now holds, for
    /// resumable checkpoints.
    pub adam_state: AdamState,
    /// Instrumentation: augmentation invocations attributed to each
    /// split. The validation counter must stay zero.
    pub train_augment_calls: u64,
    pub val_augment_calls: u64,
}

fn snapshot_params(model: &UNet) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    model.visit_params(&mut |name, p| {
        out.insert(name.to_string(), p.to_owned());
    });
    out
}

fn restore_params(model: &mut UNet, snapshot: &BTreeMap<String, ArrayD<f64>>) {
    model.visit_params_mut(&mut |name, mut p| {
        p.assign(&snapshot[name]);
    });
}

fn load_processed(
    manifest: &DatasetManifest,
    ids: &[String],
    side: u32,
) -> Result<BTreeMap<String, ProcessedSample>> {
    let mut out = BTreeMap::new();
    for id in ids {
        if out.contains_key(id) {
            continue;
        }
        let entry = manifest
            .entry(id)
            .ok_or_else(|| Error::Validation(format!("id '{id}' not in dataset manifest")))?;
        let raw = crate::dataset::load_sample(entry)?;
        out.insert(id.clone(), preprocess::process(&raw, side)?);
    }
    Ok(out)
}

struct EvalStats {
    iou: f64,
    f: f64,
    loss: f64,
}

fn nan_stats() -> EvalStats {
    EvalStats {
        iou: f64::NAN,
        f: f64::NAN,
        loss: f64::NAN,
    }
}

/// Mean thresholded metrics and mean loss of `ids` under the current
/// parameters, without augmentation.
fn evaluate_split(
    model: &UNet,
    data: &BTreeMap<String, ProcessedSample>,
    ids: &[String],
) -> Result<EvalStats> {
    if ids.is_empty() {
        return Ok(nan_stats());
    }
    let mut pairs = Vec::with_capacity(ids.len());
    let mut loss_sum = 0.0;
    for id in ids {
        let s = &data[id];
        let pred = model.forward_one(&s.image)?;
        let bin = metrics::binarize_prediction(&pred.probs);
        pairs.push((metrics::iou(&bin, &s.mask)?, metrics::dice_f(&bin, &s.mask)?));
        loss_sum += metrics::soft_dice_loss(
            &pred.probs,
            &s.onehot,
            metrics::DEFAULT_EPS,
            DiceMode::Foreground,
        )?
        .value;
    }
    let rec = metrics::MetricRecord::mean_of(&pairs, MetricScope::EpochMean);
    Ok(EvalStats {
        iou: rec.iou,
        f: rec.f_dice,
        loss: loss_sum / ids.len() as f64,
    })
}

/// Run the optimization loop. The model is updated in place and ends up
/// holding the best parameters seen (by the configured stop metric; the
/// final parameters when the validation split is empty, in which case
/// early stopping is disabled and a warning is logged).
///
/// `resume` continues epoch numbering and optimizer moments from a loaded
/// checkpoint. `on_epoch` fires after each completed epoch, in order.
pub fn train(
    model: &mut UNet,
    manifest: &DatasetManifest,
    train_ids: &[String],
    val_ids: &[String],
    cfg: &TrainConfig,
    side: u32,
    resume: Option<(usize, AdamState)>,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let val_empty = val_ids.is_empty();
    if val_empty {
        log::warn!("validation split is empty: early stopping disabled, val metrics NaN");
    }

    let mut all_ids: Vec<String> = train_ids.to_vec();
    all_ids.extend_from_slice(val_ids);
    let data = load_processed(manifest, &all_ids, side)?;

    let (start_epoch, mut adam) = match resume {
        Some((epoch, state)) => (epoch + 1, Adam::with_state(cfg.lr, state)),
        None => (0, Adam::new(cfg.lr)),
    };
    let mut stopper = EarlyStopper::new(cfg.early_stop_metric, cfg.early_stop_patience);
    let mut best: Option<(usize, f64, BTreeMap<String, ArrayD<f64>>, AdamState)> = None;
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: start_epoch,
        best_metric: f64::NAN,
        stopped_early: false,
        adam_state: adam.state(),
        train_augment_calls: 0,
        val_augment_calls: 0,
    };

    let base_order: Vec<&String> = train_ids.iter().collect();
    for epoch in start_epoch..start_epoch + cfg.max_epochs {
        let clock = Instant::now();
        // Each epoch's order is a pure function of (ids, seed, epoch) so a
        // resumed run visits samples exactly as the uninterrupted run
        // would have.
        let mut order = base_order.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(SEED_MIX).wrapping_add(epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);

        let mut train_pairs = Vec::with_capacity(order.len());
        let mut train_loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_grads = GradStore::new();
            for (i, id) in batch.iter().enumerate() {
                let sample_no = batch_no * cfg.batch_size + i;
                // Augmentation draws are keyed by (policy seed, epoch,
                // position) so they are independent of batch size.
                let draw_seed = cfg
                    .augment
                    .seed
                    .wrapping_mul(SEED_MIX)
                    .wrapping_add(epoch as u64)
                    .wrapping_mul(SEED_MIX)
                    .wrapping_add(sample_no as u64);
                let mut draw_rng = ChaCha8Rng::seed_from_u64(draw_seed);
                let sample = preprocess::augment(&data[*id], &cfg.augment, &mut draw_rng);
                outcome.train_augment_calls += 1;

                let (pred, trace) = model.forward_one_traced(&sample.image)?;
                let (loss, grad_logits) = metrics::soft_dice_loss_logit_grad(
                    &pred.probs,
                    &sample.onehot,
                    metrics::DEFAULT_EPS,
                    DiceMode::Foreground,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Runtime(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_no}, sample '{id}'"
                    )));
                }
                train_loss_sum += loss;
                let bin = metrics::binarize_prediction(&pred.probs);
                train_pairs.push((
                    metrics::iou(&bin, &sample.mask)?,
                    metrics::dice_f(&bin, &sample.mask)?,
                ));

                let grads = model.backward_param_grads(&trace, &grad_logits);
                if batch_grads.is_empty() {
                    batch_grads = grads;
                } else {
                    for (name, g) in grads {
                        *batch_grads.get_mut(&name).expect("same param set") += &g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.values_mut() {
                *g *= scale;
            }
            adam.apply(model, &batch_grads);
        }

        let train_rec = metrics::MetricRecord::mean_of(&train_pairs, MetricScope::EpochMean);
        let val = evaluate_split(model, &data, val_ids)?;
        let log = EpochLog {
            epoch,
            train_iou: train_rec.iou,
            train_f: train_rec.f_dice,
            train_loss: train_loss_sum / order.len() as f64,
            val_iou: val.iou,
            val_f: val.f,
            val_loss: val.loss,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log)?;
        outcome.epochs.push(log.clone());

        if !val_empty {
            let value = cfg.early_stop_metric.pick(&log);
            let was_best = match &best {
                None => true,
                Some((_, incumbent, _, _)) => cfg.early_stop_metric.improves(value, *incumbent),
            };
            if was_best {
                best = Some((epoch, value, snapshot_params(model), adam.state()));
            }
            if stopper.observe(epoch, value) {
                outcome.stopped_early = true;
                break;
            }
        }
    }

    match best {
        Some((epoch, value, snapshot, adam_state)) => {
            restore_params(model, &snapshot);
            outcome.best_epoch = epoch;
            outcome.best_metric = value;
            outcome.adam_state = adam_state;
        }
        None => {
            // No validation signal: keep the final parameters and state.
            outcome.best_epoch = outcome.epochs.last().map(|l| l.epoch).unwrap_or(start_epoch);
            outcome.adam_state = adam.state();
        }
    }
    Ok(outcome)
}
