//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `HCECKPT1`, a little-endian `u64` header length,
//! a JSON header, then every array as raw little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Sgd;
use super::train::{Trainer, TrainerConfig};
use super::{Detector, ModelConfig};
use crate::error::{HceError, Result};
use crate::nn::Params;

const MAGIC: &[u8; 8] = b"HCECKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    model: ModelConfig,
    trainer: TrainerConfig,
    epoch: usize,
    step: usize,
    params: Vec<Entry>,
    momentum: Vec<Entry>,
}

/// Hex SHA-256 of the canonical JSON of a serialisable config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub epoch: usize,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let model = &self.trainer.model;
        let mut data: Vec<f64> = Vec::with_capacity(model.num_params() * 2);
        let mut params = Vec::new();
        for p in model.params() {
            params.push(Entry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset: data.len(),
                len: p.data.len(),
            });
            data.extend_from_slice(p.data);
        }
        let mut momentum = Vec::new();
        for (name, v) in &self.trainer.optimizer.velocity {
            momentum.push(Entry {
                name: name.clone(),
                shape: vec![v.len()],
                offset: data.len(),
                len: v.len(),
            });
            data.extend_from_slice(v);
        }
        let header = Header {
            config_hash: self.config_hash.clone(),
            model: model.config.clone(),
            trainer: self.trainer.config,
            epoch: self.epoch,
            step: self.trainer.step,
            params,
            momentum,
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| HceError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| HceError::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| HceError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HceError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| HceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| HceError::io(path, e))?;
        let bad = |m: &str| HceError::Checkpoint(format!("{}: {m}", path.display()));
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&buf[16..body])?;
        let raw = &buf[body..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let slice = |e: &Entry| -> Result<&[f64]> {
            data.get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad(&format!("array {} out of range", e.name)))
        };

        let mut model = Detector::new(header.model.clone(), 0)?;
        let entries: BTreeMap<&str, &Entry> = header.params.iter().map(|e| (e.name.as_str(), e)).collect();
        let expected = model.params().len();
        if expected != entries.len() {
            return Err(bad(&format!("expected {expected} arrays, found {}", entries.len())));
        }
        for p in model.params_mut() {
            let e = entries.get(p.name.as_str()).ok_or_else(|| bad(&format!("missing array {}", p.name)))?;
            let src = slice(e)?;
            if src.len() != p.data.len() {
                return Err(bad(&format!("array {} has {} values, model expects {}", p.name, src.len(), p.data.len())));
            }
            p.data.copy_from_slice(src);
        }
        let mut optimizer = Sgd::new(header.trainer.momentum, header.trainer.weight_decay);
        for e in &header.momentum {
            optimizer.velocity.insert(e.name.clone(), slice(e)?.to_vec());
        }
        let mut trainer = Trainer::new(model, header.trainer);
        trainer.optimizer = optimizer;
        trainer.step = header.step;
        Ok(Checkpoint {
            trainer,
            epoch: header.epoch,
            config_hash: header.config_hash,
        })
    }
}
