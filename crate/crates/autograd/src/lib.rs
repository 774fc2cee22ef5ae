//! Minimal dense reverse-mode autodiff.
//!
//! Values live on a [`Tape`]; parameters live in a [`ParamStore`] and are
//! bound onto a fresh tape for every forward pass. After
//! [`Tape::backward`], [`Gradients::params`] yields per-name gradients
//! for [`AdamW::step`].

pub mod archive;
mod error;
pub mod gradcheck;
mod params;
mod real;
mod tape;

pub use error::{AutogradError, Result};
pub use params::{AdamW, AdamWConfig, ParamStore, ParamTensor};
pub use real::{DType, Real};
pub use tape::{softmax_rows, Gradients, Tape, Var};
