pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod expert3d;
pub mod expert_ctx;
pub mod expert_slice;
pub mod ledger;
pub mod manifest;
pub mod metrics;
pub mod predictions;
pub mod pipeline;
pub mod prep;
pub mod rng;
pub mod source;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
