//! Planning toolkit for GPU microservice pipelines.
//!
//! The crate models spatial-multitasking GPUs and microservice pipelines,
//! trains per-stage performance predictors from solo-run profiles, solves two
//! constrained resource-allocation problems (maximize supported peak load,
//! minimize resource usage at low load) with simulated annealing, packs the
//! resulting instances onto concrete GPUs, and validates plans with a
//! discrete-event tail-latency simulator.
//!
//! The usual flow mirrors the lifecycle of an experiment:
//!
//! 1. [`workload`] — define GPUs and pipelines, or generate synthetic ones.
//! 2. [`predictor`] — profile each stage and train regression models.
//! 3. [`allocator`] — solve for instance counts and compute shares.
//! 4. [`placement`] — map instances onto GPUs.
//! 5. [`simulator`] — replay an open-loop trace and measure 99%-ile latency.

pub mod allocator;
pub mod comm;
pub mod config;
pub mod placement;
pub mod predictor;
pub mod report;
pub mod simulator;
pub mod workload;

pub use allocator::{Allocation, FeasibilityConfig, SaParams};
pub use comm::CommConfig;
pub use placement::PlacementPlan;
pub use predictor::{PerfModel, ProfileSample};
pub use simulator::{SimulationResult, WorkloadTrace};
pub use workload::{GpuSpec, MicroserviceSpec, PipelineSpec};
