//! Structure-aware masked expression modeling over multi-scale gene
//! regulatory networks.
//!
//! Pipeline, end to end: build regulatory graphs from paired expression and
//! accessibility-style annotations ([`grn`]), score per-cell regulon
//! activity and threshold it with a two-component Gaussian mixture
//! ([`activity`]), encode the resulting cell-type and cell-specific graphs
//! with a sampling-based graph network ([`sage`]), fuse the structural
//! embeddings into a masked-expression transformer via multi-head
//! cross-attention ([`fusion`], [`backbone`]), train the whole thing
//! ([`trainer`]), and analyze attention patterns and metrics ([`analysis`]).
//! Synthetic data with planted regulatory structure lives in [`synth`].

pub mod activity;
pub mod analysis;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grn;
pub mod io;
pub mod optim;
pub mod rng;
pub mod sage;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
