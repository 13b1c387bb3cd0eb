//! Single-file checkpoints: magic, JSON manifest, then raw little-endian f64 tensors.
//!
//! Layout: `JIECKPT1` | manifest length (u64 LE) | manifest JSON | tensor bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::encoder::{Aggregation, Vocab};
use crate::error::{Error, Result};
use crate::model::{JointModel, Schema};
use crate::params::ParamGroup;

const MAGIC: &[u8; 8] = b"JIECKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    /// Offset in f64 elements from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub layers: usize,
    pub aggregation: Aggregation,
    pub config: Config,
    pub schema: Schema,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
    pub final_train_loss: Option<f64>,
}

pub fn save(model: &JointModel, path: &Path, final_train_loss: Option<f64>) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        let (rows, cols) = p.value.dim();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    }
    let manifest = Manifest {
        dim: model.config.encoder.dim,
        layers: model.config.encoder.layers,
        aggregation: model.config.encoder.aggregation,
        config: model.config.clone(),
        schema: model.schema.clone(),
        vocab: model.encoder.vocab.clone(),
        tensors,
        final_train_loss,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.store.iter() {
        for x in p.value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(JointModel, Manifest)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let e = &manifest.config.encoder;
    if (manifest.dim, manifest.layers, manifest.aggregation) != (e.dim, e.layers, e.aggregation) {
        return Err(Error::Checkpoint("manifest header disagrees with its encoder config".into()));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor block is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut model = JointModel::new(manifest.config.clone(), manifest.vocab.clone(), manifest.schema.clone())?;
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if entries.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, the configured model has {}",
            entries.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let param = model.store.get_mut(id);
        let entry = entries
            .get(param.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", param.name)))?;
        if (entry.rows, entry.cols) != param.value.dim() || entry.group != param.group {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {}x{}, expected {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                param.value.dim()
            )));
        }
        let end = entry.offset + entry.rows * entry.cols;
        let slice = values
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", entry.name)))?;
        for (dst, src) in param.value.iter_mut().zip(slice) {
            *dst = *src;
        }
    }
    Ok((model, manifest))
}
