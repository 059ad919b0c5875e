//! Flat little-endian `f32` checkpoint files with a plain-text manifest.
//!
//! A checkpoint is a directory holding `tensors.bin` (every tensor's
//! elements as little-endian `f32`, concatenated) and `manifest.txt`:
//!
//! ```text
//! QSATTN-CKPT-1
//! <name> <d0,d1,...|-> <byte offset>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_HEADER: &str = "QSATTN-CKPT-1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DATA_FILE: &str = "tensors.bin";

/// Writes named tensors, in the given order, to the checkpoint directory `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(CHECKPOINT_HEADER);
    manifest.push('\n');
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(TensorError::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        manifest.push_str(&format!("{name} {dims} {}\n", bytes.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    fs::File::create(dir.join(DATA_FILE))?.write_all(&bytes)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads every tensor listed in the manifest, in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bytes = fs::read(dir.join(DATA_FILE))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(TensorError::Checkpoint(format!(
            "missing {CHECKPOINT_HEADER} header in {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| TensorError::Checkpoint(format!("manifest line {}: {what}", lineno + 2));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, offset] = fields[..] else {
            return Err(bad("expected `name shape offset`"));
        };
        let shape: Vec<usize> = if dims == "-" {
            vec![]
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        if offset != expected_offset {
            return Err(bad("offsets are not contiguous"));
        }
        let len = numel(&shape) * 4;
        let chunk = bytes
            .get(offset..offset + len)
            .ok_or_else(|| bad("tensor extends past end of data file"))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
        expected_offset = offset + len;
    }
    if expected_offset != bytes.len() {
        return Err(TensorError::Checkpoint(format!(
            "data file has {} bytes but manifest covers {expected_offset}",
            bytes.len()
        )));
    }
    Ok(out)
}
