//! Experiment harness: datasets, training, robustness sweeps, attack
//! campaigns and position-embedding exports on top of `mjp-core`.

pub mod campaign;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod manifest;
pub mod report;
pub mod sweep;
pub mod synth;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};

// Training allocates and frees megabyte-sized buffers every op; the system
// allocator keeps handing those pages back to the kernel.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
