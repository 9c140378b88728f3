//! Explainable polyp segmentation toolkit.
//!
//! End-to-end pipeline for binary polyp segmentation on Kvasir-SEG-layout
//! datasets: dataset discovery and splitting, preprocessing and joint
//! image/mask augmentation, a from-scratch U-Net with analytic gradients,
//! soft-Dice training with Adam and early stopping, thresholded IoU/Dice
//! evaluation, and Grad-CAM heatmaps taken from the last decoder block.
//!
//! The crate is organised by pipeline stage:
//! - [`dataset`] — manifest scanning, train/val/test splits, sample loading,
//!   and a synthetic dataset generator for desk-scale runs
//! - [`preprocess`] — resize/normalize/one-hot plus stochastic augmentation
//! - [`model`] — the U-Net itself, with named activation taps and
//!   parameter/FLOP accounting
//! - [`metrics`] — soft Dice loss and thresholded IoU / Dice-F metrics
//! - [`train`] — the optimization loop, Adam, early stopping, checkpoints
//! - [`gradcam`] — heatmap generation, colormap overlays, coverage scoring
//! - [`report`] — held-out evaluation, qualitative panels, metric tables
//! - [`config`] — the run configuration file and CLI override handling

pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod report;
pub mod train;

pub use error::{Error, Result};
