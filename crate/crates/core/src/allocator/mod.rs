//! Constrained resource allocation for microservice pipelines.
//!
//! Two problems are solved over the decision vector `[N_1..N_n, p_1..p_n]`
//! (instance count and per-instance compute share for each stage):
//!
//! * max-load: maximize the smallest per-stage throughput `min_i N_i * f(p_i)`
//!   subject to compute, instance, memory-bandwidth, memory-capacity and QoS
//!   budgets across the cluster;
//! * min-resource: fix the GPU count at the lower bound implied by total work
//!   and footprint, then minimize `sum_i N_i * p_i` while still supporting an
//!   offered load.
//!
//! Both are solved by restart simulated annealing ([`solve_max_load`],
//! [`solve_min_resource`]) and validated against an exhaustive grid search
//! ([`brute_force_max_load`]) plus the even-allocation baseline.

mod brute;
mod sa;

pub use brute::brute_force_max_load;
pub use sa::{solve_max_load, solve_min_resource, solve_min_resource_with_headroom};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{
    comm_time_global_memory, comm_time_main_memory, comm_time_main_memory_pinned, CommConfig,
};
use crate::predictor::PerfModel;
use crate::workload::{GpuSpec, PipelineSpec};

/// Headroom applied to the offered load when min-resource solving, so the
/// solved capacity leaves room for queueing on top of the mean service rate.
pub const DEFAULT_THROUGHPUT_HEADROOM: f64 = 1.25;

const REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("no feasible allocation found; dominant violated constraint: {0:?}")]
    Infeasible(Constraint),
    #[error("search space of {points} grid points exceeds the {limit} limit")]
    SearchSpaceTooLarge { points: u128, limit: u128 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// The constraints of the two optimization problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constraint {
    /// `sum N_i * p_i <= C * 100`, each `0 < p_i <= 100`.
    ComputeBudget,
    /// `sum N_i <= C * I`, each `1 <= N_i <= I`.
    InstanceCap,
    /// `sum N_i * b(p_i) <= sum BW`.
    MemoryBandwidth,
    /// `sum N_i * M(i,s) <= sum F`.
    MemoryCapacity,
    /// `sum d(p_i) (+ inter-stage comm) <= QoS`.
    QosBudget,
    /// min-resource only: `min_i N_i * f(p_i) >= offered load`.
    ThroughputFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub used: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Every violated constraint, in check order, not just the first.
    pub violations: Vec<Violation>,
    /// Remaining slack per satisfied constraint (budget minus usage).
    pub slack: Vec<(Constraint, f64)>,
}

/// One solution of either optimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Instances per stage (`N_i`).
    pub instance_counts: Vec<u32>,
    /// Compute share granted to every instance of a stage (`p_i`, percent).
    pub shares: Vec<f64>,
    /// GPUs the allocation assumes.
    pub gpu_count: u32,
    /// `min_i N_i * f(p_i)` for max-load, `sum_i N_i * p_i` for min-resource.
    pub objective: f64,
}

impl Allocation {
    pub fn total_share_usage(&self) -> f64 {
        self.instance_counts
            .iter()
            .zip(&self.shares)
            .map(|(&n, &p)| n as f64 * p)
            .sum()
    }

    pub fn total_instances(&self) -> u32 {
        self.instance_counts.iter().sum()
    }
}

/// Annealing schedule and move sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaParams {
    pub iterations: u32,
    pub initial_temperature: f64,
    pub cooling_rate: f64,
    /// Largest share move in percentage points (moves pick 1..=step).
    pub move_share_step: u32,
    /// Largest instance-count move (moves pick 1..=step).
    pub move_instance_step: u32,
    pub seed: u64,
    pub restarts: u32,
}

impl Default for SaParams {
    fn default() -> Self {
        SaParams {
            iterations: 2000,
            initial_temperature: 1.0,
            cooling_rate: 0.97,
            move_share_step: 5,
            move_instance_step: 1,
            seed: 0,
            restarts: 200,
        }
    }
}

impl SaParams {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.iterations < 1 {
            return Err(SolveError::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return Err(SolveError::InvalidArgument(
                "cooling_rate must be in (0, 1)".into(),
            ));
        }
        if self.restarts < 1 {
            return Err(SolveError::InvalidArgument("restarts must be >= 1".into()));
        }
        if self.move_share_step < 1 || self.move_instance_step < 1 {
            return Err(SolveError::InvalidArgument("move steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which constraints feasibility enforces and how QoS accounts for
/// communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityConfig {
    /// Enforce the aggregate memory-bandwidth constraint. Disabling it yields
    /// the no-contention-constraint ablation.
    pub enforce_bandwidth: bool,
    /// Add inter-stage communication time to the QoS budget. Off in
    /// strict-paper mode, where QoS sums predicted durations only.
    pub include_comm_in_qos: bool,
    pub comm: CommConfig,
}

impl FeasibilityConfig {
    pub fn standard(comm: CommConfig) -> Self {
        FeasibilityConfig {
            enforce_bandwidth: true,
            include_comm_in_qos: true,
            comm,
        }
    }

    pub fn strict_paper(comm: CommConfig) -> Self {
        FeasibilityConfig {
            enforce_bandwidth: true,
            include_comm_in_qos: false,
            comm,
        }
    }

    /// The ablation that drops the bandwidth constraint.
    pub fn no_bandwidth_constraint(comm: CommConfig) -> Self {
        FeasibilityConfig {
            enforce_bandwidth: false,
            include_comm_in_qos: true,
            comm,
        }
    }
}

/// Precomputed per-stage prediction tables over the 1% share grid, plus the
/// cluster budgets. Solvers evaluate thousands of states; predictions at
/// integer shares become table lookups.
pub(crate) struct AllocContext<'a> {
    pub pipeline: &'a PipelineSpec,
    pub gpus: &'a [GpuSpec],
    /// Lowest share the models were trained on; solvers stay inside it.
    pub min_share: u32,
    thr: Vec<Vec<f64>>,
    bw: Vec<Vec<f64>>,
    dur: Vec<Vec<f64>>,
    pub mem_per_instance: Vec<f64>,
    /// Payload of one batch per hop, in MB.
    hop_payload_mb: Vec<f64>,
    /// Hops use the global-memory path when one instance of every stage fits
    /// the largest GPU together; placement will then co-locate.
    global_comm_fit: bool,
    pub cfg: FeasibilityConfig,
}

impl<'a> AllocContext<'a> {
    pub fn new(
        pipeline: &'a PipelineSpec,
        gpus: &'a [GpuSpec],
        models: &[PerfModel],
        batch: u32,
        cfg: FeasibilityConfig,
    ) -> Result<Self, SolveError> {
        if models.len() != pipeline.stages.len() {
            return Err(SolveError::InvalidArgument(format!(
                "{} models for {} stages",
                models.len(),
                pipeline.stages.len()
            )));
        }
        if gpus.is_empty() {
            return Err(SolveError::InvalidArgument("no GPUs given".into()));
        }
        let min_share = models
            .iter()
            .map(|m| m.share_range.0.ceil() as u32)
            .max()
            .unwrap_or(1)
            .clamp(1, 100);
        let n = pipeline.stages.len();
        let mut thr = Vec::with_capacity(n);
        let mut bw = Vec::with_capacity(n);
        let mut dur = Vec::with_capacity(n);
        for model in models {
            let mut t = vec![0.0; 101];
            let mut b = vec![0.0; 101];
            let mut d = vec![0.0; 101];
            for p in 1..=100u32 {
                t[p as usize] = model.predict_throughput(batch, p as f64).value;
                b[p as usize] = model.predict_bandwidth(batch, p as f64).value;
                d[p as usize] = model.predict_duration(batch, p as f64).value;
            }
            thr.push(t);
            bw.push(b);
            dur.push(d);
        }
        let mem_per_instance: Vec<f64> =
            models.iter().map(|m| m.predict_footprint(batch)).collect();
        let hop_payload_mb: Vec<f64> = pipeline
            .stages
            .iter()
            .take(n.saturating_sub(1))
            .map(|s| s.payload_out * batch as f64)
            .collect();
        let single_instance_mem: f64 = mem_per_instance.iter().sum();
        let largest_gpu_mem = gpus.iter().map(|g| g.mem_capacity).fold(0.0, f64::max);
        Ok(AllocContext {
            pipeline,
            gpus,
            min_share,
            thr,
            bw,
            dur,
            mem_per_instance,
            hop_payload_mb,
            global_comm_fit: single_instance_mem <= largest_gpu_mem,
            cfg,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.pipeline.stages.len()
    }

    pub fn instance_cap(&self) -> u32 {
        self.gpus.iter().map(|g| g.instance_cap).min().unwrap()
    }

    fn budgets(&self, gpu_count: u32) -> (f64, f64, f64, f64) {
        let c = (gpu_count as usize).min(self.gpus.len());
        let gpus = &self.gpus[..c];
        let compute: f64 = gpus.iter().map(|g| g.compute_share_total).sum();
        let instances: f64 = gpus.iter().map(|g| g.instance_cap as f64).sum();
        let bandwidth: f64 = gpus.iter().map(|g| g.mem_bandwidth).sum();
        let memory: f64 = gpus.iter().map(|g| g.mem_capacity).sum();
        (compute, instances, bandwidth, memory)
    }

    pub fn throughput_at(&self, stage: usize, share: f64) -> f64 {
        if share.fract() == 0.0 && (1.0..=100.0).contains(&share) {
            self.thr[stage][share as usize]
        } else {
            // Off-grid shares (even-allocation fractions) interpolate the
            // two neighboring grid entries.
            self.interp(&self.thr[stage], share)
        }
    }

    pub fn bandwidth_at(&self, stage: usize, share: f64) -> f64 {
        if share.fract() == 0.0 && (1.0..=100.0).contains(&share) {
            self.bw[stage][share as usize]
        } else {
            self.interp(&self.bw[stage], share)
        }
    }

    pub fn duration_at(&self, stage: usize, share: f64) -> f64 {
        if share.fract() == 0.0 && (1.0..=100.0).contains(&share) {
            self.dur[stage][share as usize]
        } else {
            self.interp(&self.dur[stage], share)
        }
    }

    fn interp(&self, table: &[f64], share: f64) -> f64 {
        let s = share.clamp(1.0, 100.0);
        let lo = s.floor() as usize;
        let hi = s.ceil() as usize;
        if lo == hi {
            return table[lo];
        }
        let w = s - lo as f64;
        table[lo] * (1.0 - w) + table[hi] * w
    }

    /// Allocation-time estimate of inter-stage communication cost, ms.
    pub fn comm_estimate_ms(&self, instance_counts: &[u32]) -> f64 {
        if !self.cfg.include_comm_in_qos {
            return 0.0;
        }
        let gpu = &self.gpus[0];
        let mut total = 0.0;
        for (hop, &payload) in self.hop_payload_mb.iter().enumerate() {
            if self.global_comm_fit {
                total += comm_time_global_memory(&self.cfg.comm, payload, gpu);
            } else {
                let streams = instance_counts[hop].max(1);
                total += if self.pipeline.stages[hop].pinned_memory {
                    comm_time_main_memory_pinned(&self.cfg.comm, payload, streams, gpu)
                } else {
                    comm_time_main_memory(&self.cfg.comm, payload, streams, gpu)
                };
            }
        }
        total
    }

    /// Max-load objective: smallest per-stage aggregate throughput.
    pub fn min_throughput(&self, counts: &[u32], shares: &[f64]) -> f64 {
        counts
            .iter()
            .zip(shares)
            .enumerate()
            .map(|(i, (&n, &p))| n as f64 * self.throughput_at(i, p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check(&self, a: &Allocation) -> FeasibilityReport {
        self.check_with_floor(a, None)
    }

    /// Runs every constraint in order and reports all violations. `floor`
    /// adds the min-resource throughput requirement.
    pub fn check_with_floor(&self, a: &Allocation, floor: Option<f64>) -> FeasibilityReport {
        let mut violations = Vec::new();
        let mut slack = Vec::new();
        let (compute_budget, instance_budget, bw_budget, mem_budget) = self.budgets(a.gpu_count);
        let tol = |budget: f64| budget.abs().max(1.0) * REL_TOL;

        let share_ok = a.shares.iter().all(|&p| p > 0.0 && p <= 100.0);
        let compute_used = a.total_share_usage();
        if !share_ok || compute_used > compute_budget + tol(compute_budget) {
            violations.push(Violation {
                constraint: Constraint::ComputeBudget,
                used: compute_used,
                budget: compute_budget,
            });
        } else {
            slack.push((Constraint::ComputeBudget, compute_budget - compute_used));
        }

        let per_device_cap = self.instance_cap();
        let counts_ok = a
            .instance_counts
            .iter()
            .all(|&n| n >= 1 && n <= per_device_cap);
        let instances_used = a.total_instances() as f64;
        if !counts_ok || instances_used > instance_budget + tol(instance_budget) {
            violations.push(Violation {
                constraint: Constraint::InstanceCap,
                used: instances_used,
                budget: instance_budget,
            });
        } else {
            slack.push((Constraint::InstanceCap, instance_budget - instances_used));
        }

        if self.cfg.enforce_bandwidth {
            let bw_used: f64 = a
                .instance_counts
                .iter()
                .zip(&a.shares)
                .enumerate()
                .map(|(i, (&n, &p))| n as f64 * self.bandwidth_at(i, p))
                .sum();
            if bw_used > bw_budget + tol(bw_budget) {
                violations.push(Violation {
                    constraint: Constraint::MemoryBandwidth,
                    used: bw_used,
                    budget: bw_budget,
                });
            } else {
                slack.push((Constraint::MemoryBandwidth, bw_budget - bw_used));
            }
        }

        let mem_used: f64 = a
            .instance_counts
            .iter()
            .zip(&self.mem_per_instance)
            .map(|(&n, &m)| n as f64 * m)
            .sum();
        if mem_used > mem_budget + tol(mem_budget) {
            violations.push(Violation {
                constraint: Constraint::MemoryCapacity,
                used: mem_used,
                budget: mem_budget,
            });
        } else {
            slack.push((Constraint::MemoryCapacity, mem_budget - mem_used));
        }

        let qos_used: f64 = a
            .shares
            .iter()
            .enumerate()
            .map(|(i, &p)| self.duration_at(i, p))
            .sum::<f64>()
            + self.comm_estimate_ms(&a.instance_counts);
        let qos_budget = self.pipeline.qos_target_ms;
        if qos_used > qos_budget + tol(qos_budget) {
            violations.push(Violation {
                constraint: Constraint::QosBudget,
                used: qos_used,
                budget: qos_budget,
            });
        } else {
            slack.push((Constraint::QosBudget, qos_budget - qos_used));
        }

        if let Some(floor) = floor {
            let got = self.min_throughput(&a.instance_counts, &a.shares);
            if got + tol(floor) < floor {
                violations.push(Violation {
                    constraint: Constraint::ThroughputFloor,
                    used: got,
                    budget: floor,
                });
            } else {
                slack.push((Constraint::ThroughputFloor, got - floor));
            }
        }

        FeasibilityReport {
            feasible: violations.is_empty(),
            violations,
            slack,
        }
    }
}

/// Checks an allocation against every constraint of the max-load problem and
/// returns all violations, not just the first.
pub fn feasible(
    a: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    cfg: &FeasibilityConfig,
) -> Result<FeasibilityReport, SolveError> {
    let ctx = AllocContext::new(pipeline, gpus, models, batch, cfg.clone())?;
    Ok(ctx.check(a))
}

/// Lower bound on the GPUs needed to host the pipeline at all: total work
/// must fit one QoS deadline of aggregate compute, and total footprint must
/// fit aggregate memory. Ceilings apply because GPUs are integral.
pub fn min_gpu_count(
    pipeline: &PipelineSpec,
    models: &[PerfModel],
    batch: u32,
    gpu: &GpuSpec,
) -> u32 {
    let total_flops: f64 = models.iter().map(|m| m.predict_flops(batch)).sum();
    let total_mem: f64 = models.iter().map(|m| m.predict_footprint(batch)).sum();
    let qos_s = pipeline.qos_target_ms / 1000.0;
    let compute_budget = gpu.gflops * qos_s;
    // Guard against representation noise before the ceiling: a ratio that is
    // an integer up to 1e-9 must not round up.
    let y_compute = (total_flops / compute_budget - 1e-9).ceil();
    let y_mem = (total_mem / gpu.mem_capacity - 1e-9).ceil();
    y_compute.max(y_mem).max(1.0) as u32
}

/// Grants every stage the same slice of the cluster: one `C*100/n` budget per
/// stage, split into the fewest instances with shares at most 100.
pub fn even_allocation_baseline(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
) -> Result<Allocation, SolveError> {
    if gpus.is_empty() {
        return Err(SolveError::InvalidArgument("no GPUs given".into()));
    }
    let n = pipeline.stages.len();
    let c = gpus.len() as u32;
    let budget_per_stage = c as f64 * 100.0 / n as f64;
    let instances = (budget_per_stage / 100.0).ceil().max(1.0) as u32;
    let share = budget_per_stage / instances as f64;
    let counts = vec![instances; n];
    let shares = vec![share; n];
    let cfg = FeasibilityConfig::standard(CommConfig::default());
    let ctx = AllocContext::new(pipeline, gpus, models, batch, cfg)?;
    let objective = ctx.min_throughput(&counts, &shares);
    Ok(Allocation {
        instance_counts: counts,
        shares,
        gpu_count: c,
        objective,
    })
}
