//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` schema version, `u64` header length (all
//! little-endian), a JSON header, then every parameter tensor as raw
//! little-endian `f32` in census order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::detection::LossBreakdown;
use crate::error::{Error, Result};
use crate::geometry::SensorRig;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"BEVFCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model_config: ModelConfig,
    rig: SensorRig,
    train_config: TrainConfig,
    step: usize,
    loss_history: Vec<LossBreakdown>,
    census: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub rig: SensorRig,
    pub train_config: TrainConfig,
    pub step: usize,
    pub loss_history: Vec<LossBreakdown>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model_config: t.model.config.clone(),
            rig: t.model.rig.clone(),
            train_config: t.config.clone(),
            step: t.step,
            loss_history: t.history.clone(),
            params: t.model.store.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.model_config.clone(), self.rig.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let census = self
            .params
            .iter()
            .map(|(name, p)| TensorEntry { name: name.to_string(), rows: p.value.rows, cols: p.value.cols, frozen: p.frozen })
            .collect();
        let header = Header {
            schema_version: SCHEMA_VERSION,
            model_config: self.model_config.clone(),
            rig: self.rig.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            loss_history: self.loss_history.clone(),
            census,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for &v in &p.value.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Parse { path: path.to_path_buf(), message: m };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { path: path.to_path_buf(), expected: SCHEMA_VERSION, found: Some(version) });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(len)).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut data = &bytes[20 + len..];
        let mut params = ParamStore::new();
        for t in &header.census {
            let n = t.rows * t.cols;
            if data.len() < 4 * n {
                return Err(bad(format!("truncated tensor {}", t.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            data = &data[4 * n..];
            let id = params.add(t.name.clone(), Mat::from_vec(t.rows, t.cols, values));
            params.set_frozen(id, t.frozen);
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensors", data.len())));
        }
        Ok(Self {
            model_config: header.model_config,
            rig: header.rig,
            train_config: header.train_config,
            step: header.step,
            loss_history: header.loss_history,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;

    fn small() -> Trainer {
        let model = ModelConfig { channels: 8, heads: 2, layers: 1, num_queries: 4, backbone_mid: 4, ..ModelConfig::default() };
        let cfg = TrainConfig { model, with_rb: false, ..TrainConfig::default() };
        Trainer::new(cfg, SensorRig::default_rig(), BevGridSpec::new(8, 8, 6.4).unwrap()).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let t = small();
        let c = Checkpoint::from_trainer(&t);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x.ckpt")).unwrap();
        assert_eq!(back, c);
        assert!(back.params.iter().any(|(_, p)| p.frozen));
    }

    #[test]
    fn rejects_damage() {
        let c = Checkpoint::from_trainer(&small());
        let bytes = c.to_bytes();
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", p).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v, p), Err(Error::SchemaVersion { .. })));
    }
}
