//! Verification tooling: an independent consolidation oracle, shard-level
//! training, the round-trip grid and a conversion bench.

pub mod bench;
pub mod grid;
pub mod oracle;
pub mod train;

pub use bench::{bench, BenchReport, BenchRow};
pub use grid::{resume_equivalence, verify_roundtrip, GridReport, GridSpec};
pub use oracle::{consolidate_oracle, consolidate_world};
pub use train::train_world;
