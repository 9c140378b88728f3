//! Run configuration: one TOML file describing a whole experiment, plus
//! dotted-key command-line overrides.
//!
//! Every knob has a default, so an empty file is a valid (if small-scale)
//! experiment, and unknown keys anywhere are rejected to catch typos. The
//! canonical serialization feeds a SHA-256 config hash recorded in
//! `run_meta.json` for reproducibility audits.

use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::preprocess::AugmentPolicy;
use crate::train::{StopMetric, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Kvasir-SEG-layout dataset root (`images/` + `masks/`).
    pub root: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Square working resolution every sample is resized to.
    pub side: u32,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { side: 256 }
    }
}

/// The `[train]` section: the optimizer loop's own knobs. Augmentation
/// lives in the top-level `[augment]` section and is joined in by
/// [`RunConfig::train_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            early_stop_patience: t.early_stop_patience,
            early_stop_metric: t.early_stop_metric,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/out"),
        }
    }
}

/// The whole experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub preprocess: PreprocessSection,
    pub augment: AugmentPolicy,
    pub model: UNetConfig,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Trainer configuration with the `[augment]` section joined in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            max_epochs: self.train.max_epochs,
            batch_size: self.train.batch_size,
            early_stop_patience: self.train.early_stop_patience,
            early_stop_metric: self.train.early_stop_metric,
            seed: self.train.seed,
            augment: self.augment.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        let side = self.preprocess.side;
        if side < crate::dataset::synth::MIN_SIDE {
            return Err(Error::Config(format!(
                "preprocess.side must be at least {}, got {side}",
                crate::dataset::synth::MIN_SIDE
            )));
        }
        let factor = 1u32 << self.model.depth();
        if side % factor != 0 {
            return Err(Error::Config(format!(
                "preprocess.side {side} is not divisible by {factor} \
                 (2^depth for a depth-{} encoder)",
                self.model.depth()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization: equal hashes mean equal
    /// effective configuration.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config always serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Record what this run was: config hash, all seeds, and the crate
    /// version. Deliberately no timestamp, so reruns are byte-identical.
    pub fn write_run_meta(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::from_io(dir, e))?;
        let meta = serde_json::json!({
            "config_hash": self.config_hash(),
            "seeds": {
                "split": self.split.seed,
                "model": self.model.seed,
                "train": self.train.seed,
                "augment": self.augment.seed,
            },
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = dir.join("run_meta.json");
        let mut text = serde_json::to_string_pretty(&meta).expect("static structure");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::from_io(&path, e))?;
        Ok(path)
    }
}

/// Load a config file and apply `key=value` overrides. The
/// `POLYPSEG_OUT` environment variable, when set, overrides `output.dir`
/// (command-line `--set output.dir=...` still wins over it).
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    load_with(path, overrides, std::env::var_os("POLYPSEG_OUT").map(PathBuf::from))
}

/// [`load`] with the environment already resolved, for callers and tests
/// that need it explicit.
pub fn load_with(
    path: &Path,
    overrides: &[String],
    out_dir_env: Option<PathBuf>,
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from_io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;

    if let Some(dir) = out_dir_env {
        set_dotted(
            &mut table,
            "output.dir",
            toml::Value::String(dir.to_string_lossy().into_owned()),
        )?;
    }
    for entry in overrides {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{entry}' is not of the form key=value"))
        })?;
        set_dotted(&mut table, key.trim(), parse_override_value(raw.trim()))?;
    }

    let config: RunConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Interpret an override value as TOML (so numbers, booleans, and arrays
/// type correctly); anything that does not parse is taken as a string.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Assign `value` at a dotted path, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("invalid override key '{key}'")));
    }
    let mut cursor = table;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cursor.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key '{key}': '{part}' is not a table"))
            })?;
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn empty_file_yields_the_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        let cfg = load_with(&path, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.preprocess.side, 256);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.output.dir, PathBuf::from("runs/out"));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = RunConfig::default();
        let once = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&once).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(toml::to_string(&back).unwrap(), once);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_level() {
        assert!(toml::from_str::<RunConfig>("mystery = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nwarmup = 5").is_err());
        assert!(toml::from_str::<RunConfig>("[preprocess]\nsides = 64").is_err());
    }

    #[test]
    fn overrides_apply_with_toml_typing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[train]\nlr = 1e-4\n");
        let cfg = load_with(
            &path,
            &[
                "train.lr=0.001".into(),
                "dataset.root=some/data dir".into(),
                "model.encoder_widths=[8, 16]".into(),
                "model.bottleneck_width=32".into(),
                "preprocess.side=64".into(),
                "augment.p_hflip=0.25".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.dataset.root, PathBuf::from("some/data dir"));
        assert_eq!(cfg.model.encoder_widths, vec![8, 16]);
        assert_eq!(cfg.preprocess.side, 64);
        assert_eq!(cfg.augment.p_hflip, 0.25);
    }

    #[test]
    fn later_overrides_win_and_env_loses_to_explicit_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        let cfg = load_with(
            &path,
            &["train.seed=1".into(), "train.seed=2".into(), "output.dir=cli".into()],
            Some(PathBuf::from("env")),
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 2);
        assert_eq!(cfg.output.dir, PathBuf::from("cli"));

        let cfg = load_with(&path, &[], Some(PathBuf::from("env"))).unwrap();
        assert_eq!(cfg.output.dir, PathBuf::from("env"));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "");
        for bad in ["train.lr", "=1", "train..lr=1", "train.lr.deep=1", "ghost.key=1"] {
            let err = load_with(&path, &[bad.to_string()], None).unwrap_err();
            assert_eq!(err.class(), "config", "{bad}: {err}");
        }
    }

    #[test]
    fn file_and_parse_failures_are_distinguishable() {
        let missing = load_with(Path::new("/nonexistent/run.toml"), &[], None).unwrap_err();
        assert_eq!(missing.class(), "io");

        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "not [valid toml");
        let parse = load_with(&path, &[], None).unwrap_err();
        assert_eq!(parse.class(), "config");
    }

    #[test]
    fn validation_rejects_incompatible_resolution() {
        let mut cfg = RunConfig::default();
        cfg.preprocess.side = 250; // not divisible by 2^depth
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");

        cfg.preprocess.side = 16; // below the working minimum
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.seed = 7;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn run_meta_records_hash_seeds_and_version_without_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.split.seed = 3;
        cfg.model.seed = 4;
        cfg.train.seed = 5;
        cfg.augment.seed = 6;
        let path = cfg.write_run_meta(dir.path()).unwrap();

        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(meta["config_hash"], cfg.config_hash().as_str());
        assert_eq!(meta["seeds"]["split"], 3);
        assert_eq!(meta["seeds"]["model"], 4);
        assert_eq!(meta["seeds"]["train"], 5);
        assert_eq!(meta["seeds"]["augment"], 6);
        assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
        assert!(meta.get("timestamp").is_none());

        // Reruns are byte-identical.
        let first = std::fs::read(&path).unwrap();
        cfg.write_run_meta(dir.path()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn train_config_joins_the_augment_section() {
        let mut cfg = RunConfig::default();
        cfg.augment.p_hflip = 0.75;
        cfg.train.lr = 0.02;
        let t = cfg.train_config();
        assert_eq!(t.augment.p_hflip, 0.75);
        assert_eq!(t.lr, 0.02);
        t.validate().unwrap();
    }
}
