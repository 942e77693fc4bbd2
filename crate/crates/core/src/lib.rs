//! Nuisance-invariant end-to-end speech recognition.
//!
//! An attention-based sequence-to-sequence recogniser whose encoder output is
//! split into a task representation `h1` and a nuisance representation `h2`.
//! A reconstructor and a pair of adversarial disentanglers push everything
//! the transcript does not need out of `h1`, without nuisance labels.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tape`]) in
//! `f64`.

pub mod attention;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use params::{Graph, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
