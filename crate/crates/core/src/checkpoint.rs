//! Checkpoint files: one JSON header line, then every tensor as
//! little-endian `f32`, concatenated in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint<M: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: Header<M> = serde_json::from_slice(&line)?;
    if header.kind != kind {
        return Err(Error::invalid(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            header.kind
        )));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(Error::invalid(format!(
            "{}: blob has {} bytes, header needs {}",
            path.display(),
            blob.len(),
            total * 4
        )));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let tensors = header
        .tensors
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            (e.name, Tensor::from_vec(e.shape, data))
        })
        .collect();
    Ok((header.meta, tensors))
}
