//! Self-describing checkpoint archive for models and resumable training
//! state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PSEGCKPT"
//! version u32
//! config  u64 length + UTF-8 TOML of the network config
//! params  tensor map (u64 count, then name/dims/f64 data per tensor)
//! state   u8 flag; when 1: u64 epoch, f64 best metric, u64 optimizer
//!         step, then two tensor maps (first and second moments)
//! digest  32-byte SHA-256 of everything above
//! ```
//!
//! Floats are stored bit-for-bit, so a load reproduces the saved model
//! exactly. Any truncation or flipped byte fails the digest check and the
//! load returns an integrity error without constructing a partial model.

use super::AdamState;
use crate::error::{Error, Result};
use crate::model::{UNet, UNetConfig};
use ndarray::ArrayD;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Training progress stored next to the model so a run can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Last completed epoch for the stored parameters.
    pub epoch: usize,
    pub best_metric: f64,
    pub adam: AdamState,
}

/// Serialize the model (and optionally the training state) to `path`.
pub fn save_checkpoint(path: &Path, model: &UNet, state: Option<&TrainState>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let config_toml = toml::to_string(model.config())
        .map_err(|e| Error::Runtime(format!("serializing checkpoint config: {e}")))?;
    write_bytes(&mut buf, config_toml.as_bytes());
    write_tensor_map(&mut buf, &super::snapshot_params(model));

    match state {
        None => buf.push(0),
        Some(s) => {
            buf.push(1);
            buf.extend_from_slice(&(s.epoch as u64).to_le_bytes());
            buf.extend_from_slice(&s.best_metric.to_le_bytes());
            buf.extend_from_slice(&s.adam.step.to_le_bytes());
            write_tensor_map(&mut buf, &s.adam.m);
            write_tensor_map(&mut buf, &s.adam.v);
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::from_io(path, e))
}

/// Load a checkpoint, rebuilding the model from its embedded config and
/// overwriting the initialized parameters with the stored tensors.
pub fn load_checkpoint(path: &Path) -> Result<(UNet, Option<TrainState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::from_io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(integrity(path, "file shorter than fixed header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity(path, "checksum mismatch (corrupt or truncated)"));
    }

    let mut cur = Cursor {
        bytes: body,
        at: 0,
        path,
    };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(integrity(path, "bad magic, not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(integrity(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }

    let config_toml = String::from_utf8(cur.bytes_block()?.to_vec())
        .map_err(|_| integrity(path, "config block is not UTF-8"))?;
    let config: UNetConfig = toml::from_str(&config_toml)
        .map_err(|e| integrity(path, format!("config block does not parse: {e}")))?;
    let params = read_tensor_map(&mut cur)?;

    let state = match cur.u8()? {
        0 => None,
        1 => {
            let epoch = cur.u64()? as usize;
            let best_metric = cur.f64()?;
            let step = cur.u64()?;
            let m = read_tensor_map(&mut cur)?;
            let v = read_tensor_map(&mut cur)?;
            Some(TrainState {
                epoch,
                best_metric,
                adam: AdamState { step, m, v },
            })
        }
        other => return Err(integrity(path, format!("bad train-state flag {other}"))),
    };
    if cur.at != cur.bytes.len() {
        return Err(integrity(path, "trailing bytes after train state"));
    }

    let mut model = UNet::build(config)?;
    restore_checked(&mut model, &params, path)?;
    Ok((model, state))
}

/// Assign stored tensors onto a freshly built model, verifying the name
/// set and shapes agree exactly.
fn restore_checked(
    model: &mut UNet,
    tensors: &BTreeMap<String, ArrayD<f64>>,
    path: &Path,
) -> Result<()> {
    let mut problem: Option<Error> = None;
    let mut used = 0usize;
    model.visit_params_mut(&mut |name, mut p| {
        if problem.is_some() {
            return;
        }
        match tensors.get(name) {
            None => problem = Some(integrity(path, format!("missing tensor '{name}'"))),
            Some(t) if t.shape() != p.shape() => {
                problem = Some(integrity(
                    path,
                    format!(
                        "tensor '{name}' has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.shape()
                    ),
                ));
            }
            Some(t) => {
                p.assign(t);
                used += 1;
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(integrity(
            path,
            format!("{} stored tensors, model uses {used}", tensors.len()),
        ));
    }
    Ok(())
}

fn integrity(path: &Path, what: impl Display) -> Error {
    Error::Validation(format!("{}: checkpoint integrity: {what}", path.display()))
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn write_tensor_map(buf: &mut Vec<u8>, map: &BTreeMap<String, ArrayD<f64>>) {
    buf.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for (name, tensor) in map {
        write_bytes(buf, name.as_bytes());
        buf.extend_from_slice(&(tensor.ndim() as u64).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in tensor.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_tensor_map(cur: &mut Cursor<'_>) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let count = cur.u64()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(cur.bytes_block()?.to_vec())
            .map_err(|_| integrity(cur.path, "tensor name is not UTF-8"))?;
        let ndim = cur.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(64));
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = cur.u64()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| integrity(cur.path, "tensor dims overflow"))?;
            dims.push(d);
        }
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| {
            integrity(cur.path, "tensor byte length overflow")
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| integrity(cur.path, format!("tensor '{name}' malformed: {e}")))?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(integrity(cur.path, format!("duplicate tensor '{name}'")));
        }
    }
    Ok(map)
}

/// Bounds-checked reader over the digest-verified body.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| integrity(self.path, "unexpected end of archive"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Length-prefixed byte block.
    fn bytes_block(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }
}
