//! Memory-aware cluster configuration selection for data-processing jobs.
//!
//! The pipeline profiles a job on five small dataset samples on a single
//! machine, fits peak memory against input size, extrapolates the cluster
//! memory needed for the full dataset, and then picks the historically most
//! cost-efficient configuration that has enough total memory. When memory
//! does not grow linearly with input size the selection falls back to the
//! "best for all" (BFA) ranking of past jobs.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod memmodel;
pub mod model;
pub mod profiler;
pub mod sampler;
pub mod scout;
pub mod selector;

pub use error::{Error, Result};
pub use model::{
    execution_cost, total_cluster_memory, Catalog, ClusterConfig, ConfigKey, ExecutionRecord,
    Family, Framework, MachineType, MemoryModel, MemorySample, ProfilingRun, Recommendation,
    RunStatus, Strategy,
};

pub const GIB: u64 = 1024 * 1024 * 1024;
pub const MIB: u64 = 1024 * 1024;
