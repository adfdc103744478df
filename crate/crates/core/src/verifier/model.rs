//! Model configuration, parameter initialization, and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;

use super::VerifierError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Architecture and training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Sentence-embedding dimension n.
    pub embed_dim: usize,
    /// Stance-feature dimension s.
    pub stance_dim: usize,
    pub hidden_branch: usize,
    pub hidden_stance: usize,
    pub sage_layers: usize,
    pub gat_layers: usize,
    pub attention_heads: usize,
    pub edge_dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-default hyperparameters for the given input dimensions.
    pub fn with_dims(embed_dim: usize, stance_dim: usize) -> Self {
        Self {
            embed_dim,
            stance_dim,
            hidden_branch: 256,
            hidden_stance: 32,
            sage_layers: 2,
            gat_layers: 1,
            attention_heads: 8,
            edge_dropout: 0.1,
            epochs: 300,
            lr: 1e-5,
            batch_size: 20,
            seed: 0,
        }
    }

    /// A small configuration for tests and fixtures.
    pub fn small(embed_dim: usize, stance_dim: usize) -> Self {
        Self {
            embed_dim,
            stance_dim,
            hidden_branch: 16,
            hidden_stance: 4,
            sage_layers: 2,
            gat_layers: 1,
            attention_heads: 2,
            edge_dropout: 0.1,
            epochs: 300,
            lr: 1e-3,
            batch_size: 20,
            seed: 0,
        }
    }

    /// Width of a stance-enriched branch token.
    pub fn token_dim(&self) -> usize {
        self.hidden_branch + self.hidden_stance
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("stance_dim", self.stance_dim),
            ("hidden_branch", self.hidden_branch),
            ("hidden_stance", self.hidden_stance),
            ("sage_layers", self.sage_layers),
            ("attention_heads", self.attention_heads),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(VerifierError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_branch % self.attention_heads != 0 {
            return Err(VerifierError::Config(format!(
                "hidden_branch {} not divisible by attention_heads {}",
                self.hidden_branch, self.attention_heads
            )));
        }
        if self.token_dim() % self.attention_heads != 0 {
            return Err(VerifierError::Config(format!(
                "token width {} not divisible by attention_heads {}",
                self.token_dim(),
                self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(VerifierError::Config(format!(
                "edge_dropout {} outside [0, 1)",
                self.edge_dropout
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(VerifierError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Shapes of every trainable tensor, derivable from the config alone.
    pub fn param_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let mut shapes = BTreeMap::new();
        for branch in ["prop", "disp"] {
            let mut dim = self.embed_dim;
            for i in 0..self.sage_layers {
                shapes.insert(format!("{branch}.sage{i}.w"), (2 * dim, self.hidden_branch));
                shapes.insert(format!("{branch}.sage{i}.b"), (1, self.hidden_branch));
                dim = self.hidden_branch;
            }
            for i in 0..self.gat_layers {
                shapes.insert(format!("{branch}.gat{i}.w"), (dim, self.hidden_branch));
                shapes.insert(format!("{branch}.gat{i}.a_src"), (self.hidden_branch, 1));
                shapes.insert(format!("{branch}.gat{i}.a_dst"), (self.hidden_branch, 1));
                dim = self.hidden_branch;
            }
        }
        shapes.insert("stance.w".into(), (self.stance_dim, self.hidden_stance));
        shapes.insert("stance.b".into(), (1, self.hidden_stance));

        let d_model = self.token_dim();
        let d_head = d_model / self.attention_heads;
        for h in 0..self.attention_heads {
            shapes.insert(format!("mha.h{h}.wq"), (d_model, d_head));
            shapes.insert(format!("mha.h{h}.wk"), (d_model, d_head));
            shapes.insert(format!("mha.h{h}.wv"), (d_model, d_head));
        }
        shapes.insert("mha.wo".into(), (d_model, d_model));
        shapes.insert("mha.bo".into(), (1, d_model));
        shapes.insert("classifier.w".into(), (2 * d_model, 3));
        shapes.insert("classifier.b".into(), (1, 3));
        shapes
    }
}

/// All trainable weights of the verifier plus its configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelParams {
    pub format_version: u32,
    pub config: ModelConfig,
    pub weights: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform initialization for weight matrices, zeros for biases,
    /// drawn deterministically from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, VerifierError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut weights = BTreeMap::new();
        for (name, (rows, cols)) in config.param_shapes() {
            let tensor = if name.ends_with(".b") || name.ends_with(".bo") {
                Tensor::zeros(rows, cols)
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Tensor::from_flat(rows, cols, data)?
            };
            weights.insert(name, tensor);
        }
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            weights,
        })
    }

    /// Verify that the stored weights exactly match the shapes the config
    /// derives.
    pub fn validate(&self) -> Result<(), VerifierError> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if self.weights.len() != expected.len() {
            return Err(VerifierError::Config(format!(
                "checkpoint has {} tensors, config derives {}",
                self.weights.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let tensor = self
                .weights
                .get(&name)
                .ok_or_else(|| VerifierError::Config(format!("missing weight '{name}'")))?;
            if tensor.shape() != shape {
                return Err(VerifierError::Config(format!(
                    "weight '{name}' has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, mut writer: impl Write) -> Result<(), VerifierError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| VerifierError::Config(format!("serialize checkpoint: {e}")))?;
        writer.write_all(json.as_bytes())?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(mut reader: impl Read) -> Result<Self, VerifierError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let params: ModelParams = serde_json::from_str(&text)
            .map_err(|e| VerifierError::Config(format!("parse checkpoint: {e}")))?;
        if params.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(VerifierError::Config(format!(
                "unsupported checkpoint format_version {}",
                params.format_version
            )));
        }
        params.validate()?;
        Ok(params)
    }

    /// Hex digest identifying this exact checkpoint; used to key attribution
    /// caches.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_string(self).expect("checkpoint serialization");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
