//! Self-describing model checkpoints: config + vocabulary + parameters.
//!
//! Serialized as JSON; f64 values round-trip exactly, so a reloaded model
//! reproduces forward passes bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use symreg_core::Vocab;

use crate::transformer::{Model, ModelConfig, ParamLayout};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub layout: ParamLayout,
    pub names: Vec<String>,
    pub params: Vec<Array2<f64>>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            layout: model.layout.clone(),
            names: model.names.clone(),
            params: model.params.clone(),
            step,
        }
    }

    pub fn into_model(self) -> Result<(Model, u64), CheckpointError> {
        if self.names.len() != self.params.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} names for {} parameters",
                self.names.len(),
                self.params.len()
            )));
        }
        let model = Model {
            config: self.config,
            vocab: self.vocab.reindex(),
            layout: self.layout,
            params: self.params,
            names: self.names,
        };
        Ok((model, self.step))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let r = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::Forward;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            d_emb: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 32,
            d_embedder_hidden: 16,
            ..ModelConfig::toy(2)
        };
        let model = Model::new(cfg, Vocab::new(2), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_model(&model, 42).save(&path).unwrap();
        let (back, step) = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(step, 42);
        assert_eq!(model.params, back.params);
        assert_eq!(model.names, back.names);

        // Forward outputs identical bit for bit.
        let rows = vec![vec![2u32, 5, 10_010, 1, 1, 1, 1, 1, 1]];
        let input = vec![model.vocab.bos()];
        let mut fa = Forward::new(&model);
        let ma = fa.encode(&rows);
        let la_node = fa.decode_logits(ma, &input);
        let la = fa.tape.value(la_node).clone();
        let mut fb = Forward::new(&back);
        let mb = fb.encode(&rows);
        let lb_node = fb.decode_logits(mb, &input);
        let lb = fb.tape.value(lb_node).clone();
        assert_eq!(la, lb);
    }
}
