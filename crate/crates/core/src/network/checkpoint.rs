//! Checkpoint files: a versioned binary container holding the network
//! configuration, the training seed and epoch, and every weight tensor in
//! canonical order. Loading fails loudly when the stored configuration or
//! tensor table does not match the requested network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::El;

use super::{NetworkConfig, SegGuidedNet};

const MAGIC: &[u8; 8] = b"SGNCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: NetworkConfig,
    seed: u64,
    epoch: usize,
    val_loss: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// Extra run metadata stored alongside the weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

pub fn save<T: El>(net: &SegGuidedNet<T>, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    net.params.visit(&mut |name, slice| {
        tensors.push(TensorEntry { name: name.to_string(), len: slice.len() });
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::dtype_tag().to_string(),
        config: net.config().clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("checkpoint header serialization: {e}")))?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    let mut io_err: Option<std::io::Error> = None;
    net.params.visit(&mut |_, slice| {
        if io_err.is_some() {
            return;
        }
        for v in slice {
            let res = if T::dtype_tag() == "f32" {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())
            } else {
                w.write_all(&v.as_f64().to_le_bytes())
            };
            if let Err(e) = res {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into a freshly constructed network. The stored config
/// must match `expected` exactly when one is given.
pub fn load<T: El>(path: &Path, expected: Option<&NetworkConfig>) -> Result<(SegGuidedNet<T>, CheckpointMeta)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::FileFormat {
            path: path.to_path_buf(),
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        message: format!("invalid checkpoint header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dtype != T::dtype_tag() {
        return Err(Error::CheckpointMismatch(format!(
            "dtype {} (expected {})",
            header.dtype,
            T::dtype_tag()
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(Error::CheckpointMismatch(format!(
                "network config differs: checkpoint {:?} vs requested {:?}",
                header.config, cfg
            )));
        }
    }
    let mut net = SegGuidedNet::<T>::new(header.config.clone())?;

    // verify the tensor table before reading the payload
    let mut expected_tensors = Vec::new();
    net.params.visit(&mut |name, slice| {
        expected_tensors.push(TensorEntry { name: name.to_string(), len: slice.len() });
    });
    if expected_tensors.len() != header.tensors.len()
        || expected_tensors
            .iter()
            .zip(header.tensors.iter())
            .any(|(a, b)| a.name != b.name || a.len != b.len)
    {
        return Err(Error::CheckpointMismatch("tensor table differs from the network layout".into()));
    }

    let elem_size = if header.dtype == "f32" { 4 } else { 8 };
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut payload = vec![0u8; total * elem_size];
    r.read_exact(&mut payload)?;
    let mut offset = 0usize;
    net.params.visit_mut(&mut |_, slice| {
        for v in slice.iter_mut() {
            if elem_size == 4 {
                let bytes: [u8; 4] = payload[offset..offset + 4].try_into().unwrap();
                *v = T::elem(f32::from_le_bytes(bytes) as f64);
            } else {
                let bytes: [u8; 8] = payload[offset..offset + 8].try_into().unwrap();
                *v = T::elem(f64::from_le_bytes(bytes));
            }
            offset += elem_size;
        }
    });
    Ok((
        net,
        CheckpointMeta { seed: header.seed, epoch: header.epoch, val_loss: header.val_loss },
    ))
}
