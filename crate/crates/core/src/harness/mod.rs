//! Everything around the model: data, configuration, loops and reports.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gradcheck;
pub mod infer;
pub mod memory;
pub mod netpbm;
pub mod opcheck;
pub mod synth;
pub mod train;
