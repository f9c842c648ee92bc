//! Versioned model checkpoints.
//!
//! JSON containers with the config, vocabulary fingerprints, and raw
//! parameter arrays. `f64` values round-trip exactly through the shortest
//! decimal representation, so save/load is bit-precise.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::optim::ParamMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    pub params: ParamMap,
}

impl Checkpoint {
    pub fn new(model: &Transformer, src_vocab_hash: String, tgt_vocab_hash: String) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            src_vocab_hash,
            tgt_vocab_hash,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Transformer> {
        Transformer::from_parts(self.config, self.params)
    }

    pub fn to_model(&self) -> Result<Transformer> {
        Transformer::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {}) in {}",
                ckpt.format_version,
                CHECKPOINT_VERSION,
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn model() -> Transformer {
        let mut cfg = ModelConfig::desk(16, 16);
        cfg.hidden = 8;
        cfg.feed_forward = 8;
        cfg.layers = 1;
        cfg.heads = 2;
        Transformer::init(cfg, &mut RngStream::new(1, 0)).unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let ckpt = Checkpoint::new(&m, "s".into(), "t".into());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.config, m.config);
    }

    #[test]
    fn version_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let mut ckpt = Checkpoint::new(&m, "s".into(), "t".into());
        ckpt.format_version = 999;
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("999"), "{err}");
    }
}
