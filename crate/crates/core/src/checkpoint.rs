//! Binary checkpoint of a trained model.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFG1"                magic
//! u64                   config fingerprint
//! u32 n, n bytes        JSON header (canonical model, input shape, classes, history)
//! u32                   layer count
//! per layer:  u8 kind, u32 tensor count
//! per tensor: u32 rank, rank × u64 dims, product(dims) × f64 row-major
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{LayerKind, LayerParams, Network};
use crate::modelspec::CanonicalModel;
use crate::tensor::{Tensor, TensorError};
use crate::training::{EpochRecord, TrainedModel};

pub const MAGIC: &[u8; 4] = b"CFG1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: CanonicalModel,
    input_shape: (usize, usize, usize),
    class_names: Vec<String>,
    history: Vec<EpochRecord>,
    seed: u64,
    best_epoch: usize,
    stopped_epoch: usize,
}

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv => 0,
        LayerKind::Pool => 1,
        LayerKind::Flatten => 2,
        LayerKind::Dense => 3,
        LayerKind::Classifier => 4,
    }
}

pub fn encode(model: &TrainedModel, config_hash: u64) -> Vec<u8> {
    let header = Header {
        model: model.model.clone(),
        input_shape: model.input_shape,
        class_names: model.class_names.clone(),
        history: model.history.clone(),
        seed: model.seed,
        best_epoch: model.best_epoch,
        stopped_epoch: model.stopped_epoch,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let layers = model.network.layers();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.push(kind_code(layer.kind()));
        let tensors = layer.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rank = self.u32()?;
        if rank == 0 || rank > 4 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(dims, data)?)
    }
}

/// Decodes a checkpoint, returning the model and the stored config
/// fingerprint.
pub fn decode(bytes: &[u8]) -> Result<(TrainedModel, u64), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let config_hash = r.u64()?;
    let len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let count = r.u32()?;
    if count != header.model.layers().len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} parameter layers for a {}-layer model",
            header.model.layers().len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for spec in header.model.layers() {
        let code = r.u8()?;
        if code != kind_code(spec.kind) {
            return Err(CheckpointError::Malformed(format!("layer {} has kind code {code}", spec.id)));
        }
        let n = r.u32()?;
        let params = match (spec.kind, n) {
            (LayerKind::Pool, 0) => LayerParams::Pool,
            (LayerKind::Flatten, 0) => LayerParams::Flatten,
            (kind, 2) => {
                let weights = r.tensor()?;
                let biases = r.tensor()?;
                match kind {
                    LayerKind::Conv => LayerParams::Conv { weights, biases },
                    LayerKind::Dense => LayerParams::Dense { weights, biases },
                    _ => LayerParams::Classifier { weights, biases },
                }
            }
            (_, n) => {
                return Err(CheckpointError::Malformed(format!("layer {} has {n} tensors", spec.id)));
            }
        };
        layers.push(params);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let model = TrainedModel {
        model: header.model,
        input_shape: header.input_shape,
        class_names: header.class_names,
        network: Network::new(layers),
        history: header.history,
        seed: header.seed,
        best_epoch: header.best_epoch,
        stopped_epoch: header.stopped_epoch,
        wall_time: Duration::ZERO,
    };
    Ok((model, config_hash))
}

pub fn save(model: &TrainedModel, config_hash: u64, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model, config_hash)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(TrainedModel, u64), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
