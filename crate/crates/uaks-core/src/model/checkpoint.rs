//! Model checkpoints: a versioned header, a JSON metadata block (arch,
//! alphabet, seed, tensor directory) and raw little-endian f64 payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ArchConfig, ModelParams};
use crate::corpus::{Alphabet, PAD_TOKEN};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8] = b"UAKS-CKPT v1\n";

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    arch: ArchConfig,
    /// Full token list including the padding token at index 0.
    alphabet: Vec<String>,
    seed: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let named = params.named_tensors();
    let meta = CkptMeta {
        arch: params.arch.clone(),
        alphabet: params.alphabet.tokens().to_vec(),
        seed: params.seed,
        tensors: named
            .iter()
            .map(|(name, data)| TensorMeta {
                name: name.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
    w.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&meta_json).map_err(|e| Error::io(path, e))?;
    for (_, data) in &named {
        for v in *data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(
            "checkpoint header",
            format!("{} is not a UAKS-CKPT v1 file", path.display()),
        ));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json).map_err(|e| Error::io(path, e))?;
    let meta: CkptMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
    if meta.alphabet.first().map(String::as_str) != Some(PAD_TOKEN) {
        return Err(Error::format(
            "checkpoint metadata",
            "alphabet must start with the padding token",
        ));
    }
    let alphabet = Alphabet::new(meta.alphabet[1..].iter().cloned())?;

    // Build a model with the right shapes, then overwrite every tensor.
    let mut params = init_params(&alphabet, &meta.arch, meta.seed)?;
    let names = params.tensors.names();
    if names.len() != meta.tensors.len() {
        return Err(Error::format(
            "checkpoint payload",
            format!("expected {} tensors, found {}", names.len(), meta.tensors.len()),
        ));
    }
    let mut slices = params.tensors.flat_mut();
    for ((expect_name, slice), tensor) in names.iter().zip(slices.iter_mut()).zip(&meta.tensors) {
        if *expect_name != tensor.name || slice.len() != tensor.len {
            return Err(Error::format(
                "checkpoint payload",
                format!(
                    "tensor {} (len {}) does not match expected {} (len {})",
                    tensor.name,
                    tensor.len,
                    expect_name,
                    slice.len()
                ),
            ));
        }
        let mut buf = vec![0u8; tensor.len * 8];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        for (v, chunk) in slice.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    drop(slices);
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(|e| Error::io(path, e))?;
    if !trailing.is_empty() {
        return Err(Error::format(
            "checkpoint payload",
            format!("{} trailing bytes", trailing.len()),
        ));
    }
    Ok(params)
}
