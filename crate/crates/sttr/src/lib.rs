//! A desk-scale laboratory for skeleton-based action recognition built on
//! spatial and temporal self-attention over skeleton graphs.
//!
//! The crate is self-contained: a dense-tensor reverse-mode autodiff engine
//! (`tensor`), skeleton topologies and partitioned adjacency (`graph`),
//! graph-convolution and attention layers (`layers`), stream assembly,
//! training and parameter accounting (`net`), file formats and a synthetic
//! skeleton generator (`data`), and a named gradient-check suite (`verify`).

pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod layers;
pub mod net;
pub mod tensor;
pub mod verify;

pub use error::Error;
