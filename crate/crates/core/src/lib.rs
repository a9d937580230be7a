//! Training and evaluation engine for a self-supervised graph
//! collaborative-filtering recommender that learns which user–item
//! subgraphs to mask and reconstruct.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod experiments;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod toy;
pub mod train;
