//! Dataset discovery, splitting, loading, and synthetic generation.
//!
//! The on-disk layout is `<root>/images/<id>.<ext>` plus
//! `<root>/masks/<id>.<ext>` with `ext` one of `jpg`/`png` and identical
//! filename stems for an image and its mask. Manifests are ordered
//! lexicographically by id so that scans, checksums, and splits are
//! reproducible across filesystems.

use crate::error::{Error, Result};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub mod synth;

const ALLOWED_EXTS: [&str; 2] = ["jpg", "png"];

/// One image/mask pair, keyed by the shared filename stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// All pairs under a dataset root, sorted by id, with a checksum over the
/// sorted id list. The checksum is the unit of split reproducibility: a
/// split file records it so a split can be detected as stale.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Train/val/test id lists plus the seed that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitTriple {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// A decoded image/mask pair. The mask holds only values 0 and 1.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

fn checksum_of_ids<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

fn stem_map(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    let iter = fs::read_dir(dir).map_err(|e| Error::from_io(dir, e))?;
    for entry in iter {
        let entry = entry.map_err(|e| Error::from_io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let Some(ext) = ext else { continue };
        if !ALLOWED_EXTS.contains(&ext.as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(previous) = map.insert(stem.to_string(), path.clone()) {
            return Err(Error::Validation(format!(
                "duplicate stem '{stem}' in {}: {} and {}",
                dir.display(),
                previous.display(),
                path.display()
            )));
        }
    }
    Ok(map)
}

/// Scan a dataset root and build its manifest.
///
/// Requires `images/` and `masks/` subdirectories; every image must have a
/// mask with the same stem and vice versa. Unmatched stems are all reported
/// in one validation error.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(Error::Validation(format!(
                "missing dataset directory {}",
                dir.display()
            )));
        }
    }
    let images = stem_map(&images_dir)?;
    let masks = stem_map(&masks_dir)?;

    let mut missing_masks: Vec<&str> = Vec::new();
    let mut missing_images: Vec<&str> = Vec::new();
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            missing_masks.push(stem);
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            missing_images.push(stem);
        }
    }
    if !missing_masks.is_empty() || !missing_images.is_empty() {
        let mut msg = String::from("unmatched image/mask stems:");
        if !missing_masks.is_empty() {
            let _ = write!(msg, " images without masks: {}.", missing_masks.join(", "));
        }
        if !missing_images.is_empty() {
            let _ = write!(msg, " masks without images: {}.", missing_images.join(", "));
        }
        return Err(Error::Validation(msg));
    }
    if images.is_empty() {
        return Err(Error::Validation(format!(
            "no image/mask pairs found under {}",
            root.display()
        )));
    }

    // BTreeMap iteration is already lexicographic by id.
    let entries: Vec<ManifestEntry> = images
        .into_iter()
        .map(|(id, image_path)| {
            let mask_path = masks[&id].clone();
            ManifestEntry {
                id,
                image_path,
                mask_path,
            }
        })
        .collect();
    let checksum = checksum_of_ids(entries.iter().map(|e| e.id.as_str()));
    Ok(DatasetManifest {
        entries,
        root: root.to_path_buf(),
        checksum,
    })
}

/// Sizes produced by the split rule for a manifest of `n` entries:
/// `n_test = floor(0.12 n)`, then `n_val = floor(0.10 (n - n_test))`,
/// remainder train. At n = 1000 this yields (792, 88, 120).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let n_test = n * 12 / 100;
    let pool = n - n_test;
    let n_val = pool * 10 / 100;
    let n_train = pool - n_val;
    (n_train, n_val, n_test)
}

/// Shuffle the manifest ids with a seeded generator and partition them by
/// the floor rule. Same seed and same manifest checksum give an identical
/// split. Ids within each split are sorted for stable output.
pub fn split_manifest(manifest: &DatasetManifest, seed: u64) -> Result<SplitTriple> {
    let n = manifest.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "cannot split a manifest of {n} entries; need at least 3"
        )));
    }
    let mut ids: Vec<String> = manifest.ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let (n_train, n_val, n_test) = split_sizes(n);
    let mut test: Vec<String> = ids.drain(..n_test).collect();
    let mut val: Vec<String> = ids.drain(..n_val).collect();
    let mut train = ids;
    debug_assert_eq!(train.len(), n_train);
    train.sort();
    val.sort();
    test.sort();

    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        if split.is_empty() {
            log::warn!("split '{name}' is empty for a manifest of {n} entries");
        }
    }
    Ok(SplitTriple {
        train,
        val,
        test,
        seed,
    })
}

/// Binarize an 8-bit grayscale mask to 0/1 with the midpoint rule: values
/// above 127 map to 1, everything else to 0. Lossy-compression artifacts in
/// nominally 0/255 masks land near those extremes, so the midpoint is the
/// natural cut. A mask whose values are already all in {0, 1} is binary by
/// definition and comes back unchanged, which makes the map idempotent.
pub fn binarize_mask(mask: &GrayImage) -> GrayImage {
    if mask.pixels().all(|p| p.0[0] <= 1) {
        return mask.clone();
    }
    let mut out = mask.clone();
    for px in out.pixels_mut() {
        px.0[0] = u8::from(px.0[0] > 127);
    }
    out
}

/// Decode one manifest entry into a 3-channel image and a binarized
/// single-channel mask with matching dimensions.
pub fn load_sample(entry: &ManifestEntry) -> Result<RawSample> {
    let image = image::open(&entry.image_path)
        .map_err(|e| Error::io(&entry.image_path, format!("undecodable image: {e}")))?
        .to_rgb8();
    let mask = image::open(&entry.mask_path)
        .map_err(|e| Error::io(&entry.mask_path, format!("undecodable mask: {e}")))?
        .to_luma8();
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Validation(format!(
            "sample '{}': image is {:?} but mask is {:?}",
            entry.id,
            image.dimensions(),
            mask.dimensions()
        )));
    }
    Ok(RawSample {
        id: entry.id.clone(),
        image,
        mask: binarize_mask(&mask),
    })
}

/// Write a split file: a seed/checksum header followed by `[train]`,
/// `[val]`, `[test]` sections with one id per line.
pub fn write_split_file(path: &Path, split: &SplitTriple, checksum: &str) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# seed: {}", split.seed);
    let _ = writeln!(out, "# checksum: {checksum}");
    for (name, ids) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let _ = writeln!(out, "[{name}]");
        for id in ids {
            let _ = writeln!(out, "{id}");
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::from_io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::from_io(path, e))?;
    Ok(())
}

/// Parse a split file written by [`write_split_file`].
///
/// Returns the split and the manifest checksum recorded in its header.
pub fn read_split_file(path: &Path) -> Result<(SplitTriple, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::from_io(path, e))?;
    let mut seed: Option<u64> = None;
    let mut checksum: Option<String> = None;
    let mut sections: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("seed:") {
                seed = Some(v.trim().parse().map_err(|_| {
                    Error::Validation(format!("{}: bad seed header", path.display()))
                })?);
            } else if let Some(v) = rest.strip_prefix("checksum:") {
                checksum = Some(v.trim().to_string());
            }
            continue;
        }
        match line {
            "[train]" => current = Some("train"),
            "[val]" => current = Some("val"),
            "[test]" => current = Some("test"),
            id => {
                let Some(section) = current else {
                    return Err(Error::Validation(format!(
                        "{}:{}: id before any section header",
                        path.display(),
                        lineno + 1
                    )));
                };
                sections.entry(section).or_default().push(id.to_string());
            }
        }
    }
    let seed = seed
        .ok_or_else(|| Error::Validation(format!("{}: missing seed header", path.display())))?;
    let checksum = checksum.ok_or_else(|| {
        Error::Validation(format!("{}: missing checksum header", path.display()))
    })?;
    Ok((
        SplitTriple {
            train: sections.remove("train").unwrap_or_default(),
            val: sections.remove("val").unwrap_or_default(),
            test: sections.remove("test").unwrap_or_default(),
            seed,
        },
        checksum,
    ))
}

/// Write a manifest listing (id, image path, mask path) with the checksum
/// in a header comment. Paths are stored relative to the manifest's root.
pub fn write_manifest_file(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# checksum: {}", manifest.checksum);
    let _ = writeln!(out, "# root: {}", manifest.root.display());
    let _ = writeln!(out, "id,image,mask");
    for e in &manifest.entries {
        let rel = |p: &Path| {
            p.strip_prefix(&manifest.root)
                .unwrap_or(p)
                .display()
                .to_string()
        };
        let _ = writeln!(out, "{},{},{}", e.id, rel(&e.image_path), rel(&e.mask_path));
    }
    fs::write(path, out).map_err(|e| Error::from_io(path, e))
}
