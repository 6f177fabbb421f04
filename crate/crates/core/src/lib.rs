//! Reverse-mode automatic differentiation over explicit computational graphs,
//! applied to compact-model parameter extraction for SiC power MOSFETs.

pub mod bench;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcalc;
pub mod graph;
pub mod initparams;
pub mod models;
pub mod optimize;

pub use error::{Error, Result};
pub use exec::Exec;
