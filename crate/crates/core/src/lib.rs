//! Joint language-model and graph-network pre-training on text-attributed
//! graphs, with graph-text prompt tuning for few-shot node classification.

pub mod checkpoint;
mod error;
pub mod fewshot;
pub mod gnn;
pub mod graph;
pub mod lm;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod sampler;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use graph::{extract_ego_graph, EgoGraph, TextAttributedGraph, EGO_CAP};
pub use synth::{edge_homophily, generate_synthetic_tag, SynthConfig};
pub use text::{mask_tokens, MaskedSequence, Vocabulary};
