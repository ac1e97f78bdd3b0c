//! HGLMRec-style recommendation pipeline: a trainable hypergraph encoder
//! over multi-behaviour interactions, graph-token/prompt fusion, a
//! hierarchical mixture-of-agents refinement stack with pluggable frozen
//! agents, and training/evaluation/cost-accounting harnesses.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod hypergraph;
pub mod moa;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
