//! The jointly trained encoder pair plus the masked-token head.

use autograd::{ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gnn::{Activation, Gat, GnnConfig};
use crate::lm::{LmConfig, LmEncoder};

pub const HEAD_PREFIX: &str = "head.";

/// Architecture shared by the LM and the GNN; the vocabulary size and
/// sequence length are supplied when a model is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub ff_mult: usize,
    pub gnn_layers: usize,
    pub gnn_heads: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lm_layers: 2,
            lm_heads: 4,
            ff_mult: 4,
            gnn_layers: 2,
            gnn_heads: 4,
            dropout: 0.1,
        }
    }
}

/// MLP over `[h_i; o_t]` with the output projection tied to the token
/// embedding `E`: `logits = (gelu(z·W1 + b1)·W2 + b2)·Eᵀ + out_bias`.
#[derive(Clone, Debug)]
pub struct MlmHead {
    pub hidden: usize,
    pub vocab_size: usize,
}

impl MlmHead {
    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let (d, v) = (self.hidden, self.vocab_size);
        store.xavier("head.w1", 2 * d, 2 * d, rng);
        store.zeros("head.b1", &[2 * d]);
        store.xavier("head.w2", 2 * d, d, rng);
        store.zeros("head.b2", &[d]);
        store.zeros("head.out_bias", &[v]);
    }

    /// Logits `[m, V]` for head inputs `z` `[m, 2d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let w1 = tape.param(store, "head.w1")?;
        let b1 = tape.param(store, "head.b1")?;
        let w2 = tape.param(store, "head.w2")?;
        let b2 = tape.param(store, "head.b2")?;
        let emb = tape.param(store, "lm.tok_emb")?;
        let bias = tape.param(store, "head.out_bias")?;
        let y = tape.matmul(z, w1, false)?;
        let y = tape.add_row(y, b1)?;
        let y = tape.gelu(y)?;
        let y = tape.matmul(y, w2, false)?;
        let y = tape.add_row(y, b2)?;
        let logits = tape.matmul(y, emb, true)?;
        Ok(tape.add_row(logits, bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub lm: LmEncoder,
    pub gnn: Gat,
    pub head: MlmHead,
}

impl Model {
    pub fn new(config: &ModelConfig, vocab_size: usize, max_len: usize) -> Result<Self> {
        let lm = LmEncoder::new(LmConfig {
            vocab_size,
            hidden: config.hidden,
            layers: config.lm_layers,
            heads: config.lm_heads,
            ff_mult: config.ff_mult,
            max_len,
            dropout: config.dropout,
        })?;
        let gnn = Gat::new(GnnConfig {
            layers: config.gnn_layers,
            hidden: config.hidden,
            heads: config.gnn_heads,
            activation: Activation::Elu,
            dropout: config.dropout,
        })?;
        Ok(Self {
            config: config.clone(),
            lm,
            gnn,
            head: MlmHead {
                hidden: config.hidden,
                vocab_size,
            },
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.lm.init_params(&mut store, rng);
        self.gnn.init_params(&mut store, rng);
        self.head.init_params(&mut store, rng);
        store
    }
}
