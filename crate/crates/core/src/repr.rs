//! Released-representation files.
//!
//! Layout: the 8-byte magic `FENREPR1`, then `n`, `D′`, `H′`, `W′` and the
//! FEN configuration hash as little-endian `u64`, then `n·D′·H′·W′`
//! little-endian `f32` values, sample-major. Labels go to a CSV sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FENREPR1";
pub const HEADER_BYTES: usize = 8 + 5 * 8;

pub fn encode(reps: &Tensor, config_hash: u64) -> Vec<u8> {
    let (n, c, h, w) = reps.dims();
    let mut out = Vec::with_capacity(HEADER_BYTES + reps.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [n as u64, c as u64, h as u64, w as u64, config_hash] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in reps.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a representations file. With `expected_hash`, a different stored
/// hash is an error.
pub fn decode(bytes: &[u8], path: &Path, expected_hash: Option<u64>) -> Result<(Tensor, u64)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_BYTES || &bytes[..8] != MAGIC {
        return Err(bad("missing representations header".into()));
    }
    let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
    let dims = [field(0), field(1), field(2), field(3)].map(|v| v as usize);
    let hash = field(4);
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: hash,
            });
        }
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let body = &bytes[HEADER_BYTES..];
    if count.and_then(|c| c.checked_mul(4)) != Some(body.len()) {
        return Err(bad(format!("header dims {dims:?} do not match {} data bytes", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let [n, c, h, w] = dims;
    Ok((Tensor::from_vec(n, c, h, w, data)?, hash))
}

pub fn labels_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".labels.csv");
    path.with_file_name(name)
}

/// Writes the representations file and its `<file>.labels.csv` sidecar.
pub fn write_representations(path: &Path, reps: &Tensor, labels: &[usize], config_hash: u64) -> Result<PathBuf> {
    if labels.len() != reps.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            reps.n()
        )));
    }
    fs::write(path, encode(reps, config_hash))?;
    let sidecar = labels_path(path);
    let mut w = csv::Writer::from_path(&sidecar)?;
    w.write_record(["index", "label"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(sidecar)
}

pub fn read_representations(path: &Path, expected_hash: Option<u64>) -> Result<(Tensor, u64)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?, path, expected_hash)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("bad label row {rec:?}"),
                })
        })
        .collect()
}
