//! Command-line entry point: config-driven, reproducible runs of the
//! whole pipeline (`synth`, `prepare`, `train`, `eval`, `explain`).
//!
//! Failures print one machine-parseable line to stderr,
//! `error[<class>]: <message>`, and exit with the class's code: 2 for
//! config errors, 3 for validation/IO, 4 for runtime/numeric failures.

use clap::{Args, Parser, Subcommand};
use polypseg::config::{self, RunConfig};
use polypseg::dataset::{self, DatasetManifest, SplitTriple};
use polypseg::error::{Error, Result};
use polypseg::gradcam;
use polypseg::model::UNet;
use polypseg::preprocess;
use polypseg::report::{self, PanelInput};
use polypseg::train::{self, checkpoint};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "polypseg", version, about = "Explainable polyp segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment definition (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipse dataset for desk-scale runs.
    Synth {
        /// Dataset directory to create (`images/` + `masks/`).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 256)]
        side: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scan the dataset and write the manifest and split files.
    Prepare(ConfigArgs),
    /// Train a model, writing epoch logs and the best checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Resume from a saved checkpoint instead of initializing fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and export report tables.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (default: `<output.dir>/best.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write Grad-CAM heatmaps and qualitative panels for chosen ids.
    Explain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to explain (default: `<output.dir>/best.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sample ids (default: the whole test split).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, side, seed } => {
            let ids = dataset::synth::generate_synthetic(&out, n, side, seed)?;
            log::info!("wrote {} samples under {}", ids.len(), out.display());
            Ok(())
        }
        Command::Prepare(args) => cmd_prepare(&load_config(&args)?),
        Command::Train { config, checkpoint } => {
            cmd_train(&load_config(&config)?, checkpoint.as_deref())
        }
        Command::Eval { config, checkpoint } => {
            cmd_eval(&load_config(&config)?, checkpoint.as_deref())
        }
        Command::Explain {
            config,
            checkpoint,
            ids,
        } => cmd_explain(&load_config(&config)?, checkpoint.as_deref(), &ids),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    config::load(&args.config, &args.set)
}

/// Scan the dataset and reuse the prepared split when one exists for this
/// exact manifest; otherwise derive the split from the configured seed.
fn manifest_and_split(cfg: &RunConfig) -> Result<(DatasetManifest, SplitTriple)> {
    let manifest = dataset::scan_dataset(&cfg.dataset.root)?;
    let split_path = cfg.output.dir.join("splits.txt");
    if split_path.exists() {
        let (split, checksum) = dataset::read_split_file(&split_path)?;
        if checksum != manifest.checksum {
            return Err(Error::Validation(format!(
                "{}: split file was prepared for a different dataset \
                 (checksum mismatch); re-run prepare",
                split_path.display()
            )));
        }
        return Ok((manifest, split));
    }
    let split = dataset::split_manifest(&manifest, cfg.split.seed)?;
    Ok((manifest, split))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::from_io(out, e))?;
    let manifest = dataset::scan_dataset(&cfg.dataset.root)?;
    let split = dataset::split_manifest(&manifest, cfg.split.seed)?;
    dataset::write_manifest_file(&out.join("manifest.csv"), &manifest)?;
    dataset::write_split_file(&out.join("splits.txt"), &split, &manifest.checksum)?;
    cfg.write_run_meta(out)?;
    log::info!(
        "prepared {} samples: {} train / {} val / {} test",
        manifest.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<()> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::from_io(out, e))?;
    cfg.write_run_meta(out)?;
    let (manifest, split) = manifest_and_split(cfg)?;

    let (mut model, resume) = match resume_from {
        None => (UNet::build(cfg.model.clone())?, None),
        Some(path) => {
            let (model, state) = checkpoint::load_checkpoint(path)?;
            let state = state.ok_or_else(|| {
                Error::Validation(format!(
                    "{}: checkpoint has no training state to resume from",
                    path.display()
                ))
            })?;
            log::info!("resuming from epoch {}", state.epoch);
            (model, Some((state.epoch, state.adam)))
        }
    };

    let csv_path = out.join("epoch_log.csv");
    let jsonl_path = out.join("epoch_log.jsonl");
    // On resume, extend the run's history so epochs stay contiguous from
    // 0 (rows after the resume point are superseded and dropped).
    let mut logs = match (&resume, csv_path.exists()) {
        (Some((epoch, _)), true) => {
            let mut prior = train::read_epoch_log_csv(&csv_path)?;
            prior.retain(|l| l.epoch <= *epoch);
            prior
        }
        _ => Vec::new(),
    };
    let outcome = train::train(
        &mut model,
        &manifest,
        &split.train,
        &split.val,
        &cfg.train_config(),
        cfg.preprocess.side,
        resume,
        &mut |log| {
            logs.push(log.clone());
            // Rewritten whole each epoch so a crash leaves valid files.
            train::write_epoch_log_csv(&csv_path, &logs)?;
            train::write_epoch_log_jsonl(&jsonl_path, &logs)?;
            log::info!(
                "epoch {}: train iou {:.4} loss {:.4} | val iou {:.4}",
                log.epoch,
                log.train_iou,
                log.train_loss,
                log.val_iou
            );
            Ok(())
        },
    )?;

    let state = checkpoint::TrainState {
        epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        adam: outcome.adam_state.clone(),
    };
    let ckpt_path = out.join("best.ckpt");
    checkpoint::save_checkpoint(&ckpt_path, &model, Some(&state))?;
    log::info!(
        "saved {} (epoch {}, best metric {:.4}{})",
        ckpt_path.display(),
        outcome.best_epoch,
        outcome.best_metric,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("best.ckpt"))
}

fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<()> {
    let out = &cfg.output.dir;
    cfg.write_run_meta(out)?;
    let (model, _) = checkpoint::load_checkpoint(&default_checkpoint(cfg, ckpt))?;
    let (manifest, split) = manifest_and_split(cfg)?;
    let test_report = report::evaluate(&model, &manifest, &split.test, cfg.preprocess.side)?;

    let log_path = out.join("epoch_log.csv");
    let written = if log_path.exists() {
        let logs = train::read_epoch_log_csv(&log_path)?;
        report::export_tables(out, &logs, &test_report)?
    } else {
        log::warn!("no epoch log at {}; exporting test tables only", log_path.display());
        report::export_test_report(out, &test_report)?
    };
    for path in &written {
        log::info!("wrote {}", path.display());
    }
    log::info!(
        "test ({} images): mean iou {:.4}, mean dice {:.4}",
        test_report.n,
        test_report.mean_iou,
        test_report.mean_f
    );
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, ckpt: Option<&Path>, ids: &[String]) -> Result<()> {
    let out = &cfg.output.dir;
    cfg.write_run_meta(out)?;
    let (model, _) = checkpoint::load_checkpoint(&default_checkpoint(cfg, ckpt))?;
    let (manifest, split) = manifest_and_split(cfg)?;
    let ids: Vec<String> = if ids.is_empty() {
        split.test.clone()
    } else {
        ids.to_vec()
    };
    if ids.is_empty() {
        return Err(Error::Validation(
            "no ids to explain: test split is empty and none were given".into(),
        ));
    }

    let cam_dir = out.join("cam");
    std::fs::create_dir_all(&cam_dir).map_err(|e| Error::from_io(&cam_dir, e))?;
    let mut prepared = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| Error::Validation(format!("id '{id}' not in dataset manifest")))?;
        let sample = preprocess::process(&dataset::load_sample(entry)?, cfg.preprocess.side)?;
        let heatmap = gradcam::gradcam(&model, &sample.image, None)?;
        gradcam::write_heatmap_png(&cam_dir.join(format!("{id}.png")), &heatmap)?;
        let pred = metrics_binarized(&model, &sample.image)?;
        prepared.push((id.clone(), sample, pred, heatmap));
    }

    let items: Vec<PanelInput> = prepared
        .iter()
        .map(|(id, sample, pred, heatmap)| PanelInput {
            id,
            image: &sample.image,
            gt: &sample.mask,
            pred,
            heatmap: Some(heatmap),
        })
        .collect();
    let panels = report::render_panels(&out.join("panels"), &items)?;
    log::info!("wrote {} heatmaps and {} panels", ids.len(), panels.len());
    Ok(())
}

fn metrics_binarized(model: &UNet, image: &ndarray::Array3<f64>) -> Result<ndarray::Array2<u8>> {
    let pred = model.forward_one(image)?;
    Ok(polypseg::metrics::binarize_prediction(&pred.probs))
}
