//! Discrete-event validation of placed allocations.
//!
//! [`simulate`] replays an open-loop trace through the placed pipeline and
//! reports tail latency with a per-stage breakdown. [`find_peak_load`]
//! searches for the highest arrival rate whose simulated 99%-ile latency
//! still meets the QoS target. [`validate_allocation`] contrasts the
//! bandwidth-constrained allocation against the ablation that drops the
//! constraint.

mod engine;
mod trace;

pub use trace::{ArrivalProcess, WorkloadTrace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{
    solve_max_load, Allocation, FeasibilityConfig, SaParams, SolveError,
};
use crate::comm::CommConfig;
use crate::placement::{place_with_options, PlaceOptions, PlacementError, PlacementPlan};
use crate::predictor::PerfModel;
use crate::workload::{GpuSpec, PipelineSpec};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("non-finite time computed: {0}")]
    NonFinite(String),
    #[error("simulation setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}

/// When a dispatcher issues a partial batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchPolicy {
    /// Dispatch as soon as an instance is idle and queries wait. Batches
    /// grow naturally under load; a lone query never waits.
    WorkConserving,
    /// Hold for a full batch, flushing early once the head query's slack
    /// (QoS minus elapsed minus estimated remaining time) runs out.
    HoldUntilSlack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub batch_policy: BatchPolicy,
    /// Completed queries arriving in this leading fraction of the trace are
    /// excluded from the latency statistics.
    pub warmup_fraction: f64,
    /// The clock may run this factor past the trace end to drain in-flight
    /// work before the simulation stops.
    pub drain_factor: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            batch_policy: BatchPolicy::WorkConserving,
            warmup_fraction: 0.1,
            drain_factor: 3.0,
        }
    }
}

/// How service times stretch when co-located instances demand more global
/// memory bandwidth than the GPU offers.
pub trait ContentionPolicy: Sync {
    fn multiplier(&self, demanded_bw_mbps: f64, capacity_bw_mbps: f64) -> f64;
}

/// Service times scale with the oversubscription ratio and are never faster
/// than solo.
pub struct LinearOversubscription;

impl ContentionPolicy for LinearOversubscription {
    fn multiplier(&self, demanded: f64, capacity: f64) -> f64 {
        (demanded / capacity).max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub queue_ms_mean: f64,
    pub service_ms_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub offered_qps: f64,
    pub achieved_qps: f64,
    pub p99_latency_ms: f64,
    pub mean_latency_ms: f64,
    pub arrived: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub per_stage: Vec<StageStats>,
    pub comm_ms_mean: f64,
    pub seed: u64,
}

impl SimulationResult {
    pub fn csv_header(n_stages: usize) -> String {
        let mut cols = vec![
            "label".to_string(),
            "rate_qps".into(),
            "achieved_qps".into(),
            "p99_ms".into(),
            "mean_ms".into(),
            "arrived".into(),
            "completed".into(),
            "in_flight".into(),
            "comm_ms_mean".into(),
        ];
        for s in 0..n_stages {
            cols.push(format!("stage{s}_queue_ms"));
            cols.push(format!("stage{s}_service_ms"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut cols = vec![
            label.to_string(),
            format!("{:.6}", self.offered_qps),
            format!("{:.6}", self.achieved_qps),
            format!("{:.6}", self.p99_latency_ms),
            format!("{:.6}", self.mean_latency_ms),
            self.arrived.to_string(),
            self.completed.to_string(),
            self.in_flight.to_string(),
            format!("{:.6}", self.comm_ms_mean),
        ];
        for s in &self.per_stage {
            cols.push(format!("{:.6}", s.queue_ms_mean));
            cols.push(format!("{:.6}", s.service_ms_mean));
        }
        cols.join(",")
    }
}

/// Replays the trace through the placed pipeline with default options.
pub fn simulate(
    plan: &PlacementPlan,
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    trace: &WorkloadTrace,
    comm_cfg: &CommConfig,
) -> Result<SimulationResult, SimulationError> {
    simulate_with_options(
        plan,
        allocation,
        pipeline,
        gpus,
        trace,
        comm_cfg,
        &SimOptions::default(),
        &LinearOversubscription,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_with_options(
    plan: &PlacementPlan,
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    trace: &WorkloadTrace,
    comm_cfg: &CommConfig,
    options: &SimOptions,
    contention: &dyn ContentionPolicy,
) -> Result<SimulationResult, SimulationError> {
    if plan.assignments.len() != pipeline.stages.len() {
        return Err(SimulationError::Setup(
            "plan does not cover every stage".into(),
        ));
    }
    if plan.assignments.iter().any(|a| a.is_empty()) {
        return Err(SimulationError::Setup("a stage has no instances".into()));
    }
    let arrivals = trace.arrivals_ms();
    let horizon_ms = trace.duration_s * 1000.0 * options.drain_factor.max(1.0);
    let out = engine::run(
        plan, allocation, pipeline, gpus, &arrivals, comm_cfg, options, contention, horizon_ms,
    )?;

    let warmup_ms = trace.duration_s * 1000.0 * options.warmup_fraction;
    let mut kept: Vec<f64> = out
        .latencies
        .iter()
        .filter(|(arrival, _)| *arrival >= warmup_ms)
        .map(|&(_, l)| l)
        .collect();
    kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (p99, mean) = if kept.is_empty() {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let idx = ((0.99 * kept.len() as f64).ceil() as usize).clamp(1, kept.len()) - 1;
        (kept[idx], kept.iter().sum::<f64>() / kept.len() as f64)
    };

    Ok(SimulationResult {
        offered_qps: trace.rate_qps,
        achieved_qps: out.completed as f64 / trace.duration_s,
        p99_latency_ms: p99,
        mean_latency_ms: mean,
        arrived: out.arrived,
        completed: out.completed,
        in_flight: out.arrived - out.completed,
        per_stage: engine::stage_stats(&out),
        comm_ms_mean: if out.comm_samples > 0 {
            out.comm_total_ms / out.comm_samples as f64
        } else {
            0.0
        },
        seed: trace.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSearchParams {
    /// First probe rate; doubling proceeds from here.
    pub start_rate_qps: f64,
    pub bisect_iterations: u32,
    pub sim_duration_s: f64,
    pub max_queries: usize,
    pub seed: u64,
    pub options: SimOptions,
}

impl Default for PeakSearchParams {
    fn default() -> Self {
        PeakSearchParams {
            start_rate_qps: 1.0,
            bisect_iterations: 12,
            sim_duration_s: 60.0,
            max_queries: 200_000,
            seed: 0,
            options: SimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakLoadResult {
    /// Highest probed rate meeting the QoS target; 0 when even the minimal
    /// rate misses it.
    pub peak_qps: f64,
    pub p99_at_peak_ms: f64,
    pub probes: u32,
}

/// Finds the supported peak load: bracket the QoS boundary by rate doubling,
/// then bisect it for a fixed number of iterations. Every probe replays a
/// trace with the same seed, so the search is deterministic.
pub fn find_peak_load(
    plan: &PlacementPlan,
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    comm_cfg: &CommConfig,
    qos_ms: f64,
    search: &PeakSearchParams,
) -> Result<PeakLoadResult, SimulationError> {
    let mut probes = 0u32;
    let mut probe = |rate: f64| -> Result<f64, SimulationError> {
        probes += 1;
        let mut trace = WorkloadTrace::poisson(rate, search.sim_duration_s, search.seed);
        trace.max_queries = search.max_queries;
        let result = simulate_with_options(
            plan,
            allocation,
            pipeline,
            gpus,
            &trace,
            comm_cfg,
            &search.options,
            &LinearOversubscription,
        )?;
        Ok(result.p99_latency_ms)
    };

    let start = search.start_rate_qps.max(1e-3);
    let p99_start = probe(start)?;
    if p99_start > qos_ms {
        return Ok(PeakLoadResult {
            peak_qps: 0.0,
            p99_at_peak_ms: p99_start,
            probes,
        });
    }

    // Bracket: double until the QoS target breaks (or a generous cap).
    let mut lo = start;
    let mut p99_lo = p99_start;
    let mut hi = start;
    let mut bracketed = false;
    for _ in 0..24 {
        hi *= 2.0;
        let p99 = probe(hi)?;
        if p99 > qos_ms {
            bracketed = true;
            break;
        }
        lo = hi;
        p99_lo = p99;
    }
    if !bracketed {
        return Ok(PeakLoadResult {
            peak_qps: lo,
            p99_at_peak_ms: p99_lo,
            probes,
        });
    }

    for _ in 0..search.bisect_iterations {
        let mid = 0.5 * (lo + hi);
        let p99 = probe(mid)?;
        if p99 <= qos_ms {
            lo = mid;
            p99_lo = p99;
        } else {
            hi = mid;
        }
    }
    Ok(PeakLoadResult {
        peak_qps: lo,
        p99_at_peak_ms: p99_lo,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcValidationParams {
    /// Probe rate as a fraction of the constrained allocation's predicted
    /// bottleneck throughput.
    pub rate_factor: f64,
    pub sim_duration_s: f64,
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for NcValidationParams {
    fn default() -> Self {
        NcValidationParams {
            rate_factor: 0.8,
            sim_duration_s: 20.0,
            max_queries: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub allocation: Allocation,
    pub p99_ms: f64,
    pub meets_qos: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub rate_qps: f64,
    pub qos_ms: f64,
    pub constrained: VariantOutcome,
    pub unconstrained: VariantOutcome,
    /// At or above 1 when dropping the constraint hurts tail latency.
    pub p99_ratio_nc_over_constrained: f64,
}

/// Solves, places and simulates the pipeline twice at the same offered rate:
/// once with the memory-bandwidth constraint enforced at allocation time and
/// once without it. Both runs share the trace seed so only the allocation
/// differs.
#[allow(clippy::too_many_arguments)]
pub fn validate_allocation(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    sa: &SaParams,
    comm_cfg: &CommConfig,
    params: &NcValidationParams,
) -> Result<NcReport, SimulationError> {
    let constrained_cfg = FeasibilityConfig::standard(comm_cfg.clone());
    let nc_cfg = FeasibilityConfig::no_bandwidth_constraint(comm_cfg.clone());

    let constrained_alloc = solve_max_load(pipeline, gpus, models, batch, sa, &constrained_cfg)?;
    let nc_alloc = solve_max_load(pipeline, gpus, models, batch, sa, &nc_cfg)?;

    let rate = params.rate_factor * constrained_alloc.objective;
    let run = |alloc: &Allocation, enforce_bw: bool| -> Result<VariantOutcome, SimulationError> {
        let plan = place_with_options(
            alloc,
            pipeline,
            gpus,
            models,
            batch,
            &PlaceOptions {
                enforce_bandwidth: enforce_bw,
            },
        )?;
        let trace = {
            let mut t = WorkloadTrace::poisson(rate, params.sim_duration_s, params.seed);
            t.max_queries = params.max_queries;
            t
        };
        let result = simulate(&plan, alloc, pipeline, gpus, &trace, comm_cfg)?;
        Ok(VariantOutcome {
            allocation: alloc.clone(),
            p99_ms: result.p99_latency_ms,
            meets_qos: result.p99_latency_ms <= pipeline.qos_target_ms,
        })
    };

    let constrained = run(&constrained_alloc, true)?;
    let unconstrained = run(&nc_alloc, false)?;
    let ratio = unconstrained.p99_ms / constrained.p99_ms;
    Ok(NcReport {
        rate_qps: rate,
        qos_ms: pipeline.qos_target_ms,
        constrained,
        unconstrained,
        p99_ratio_nc_over_constrained: ratio,
    })
}
