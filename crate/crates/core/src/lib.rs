//! Universal checkpoint reconfiguration.
//!
//! Model state is partitioned under a simulated parallel configuration into
//! per-rank shards, consolidated into per-parameter atomic checkpoints, and
//! reloaded under any compatible target configuration.

pub mod atomic;
pub mod error;
pub mod io;
pub mod loader;
pub mod model;
pub mod parallel;
pub mod partition;
pub mod reconfig;
pub mod tensor;

pub use error::{Result, UcpError};
pub use tensor::{DType, Tensor};
