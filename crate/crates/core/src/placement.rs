//! Maps microservice instances onto concrete GPUs.
//!
//! Stages are placed in pipeline order. Before each stage the GPUs are
//! sorted ascending by residual memory (ties: residual compute, residual
//! bandwidth, index) so the fullest GPUs are tried first and fragmentation
//! stays low. All instances of a stage go to the first GPU that can hold
//! them together; otherwise the stage fills GPUs greedily in sorted order.
//! Instances of one stage sharing a GPU charge the resident model once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::Allocation;
use crate::comm::CommPath;
use crate::predictor::PerfModel;
use crate::workload::{GpuSpec, PipelineSpec};

#[derive(Debug, Error, PartialEq)]
pub enum PlacementError {
    #[error("stage {stage}: no GPU can hold another instance; binding dimension: {dimension:?}")]
    Unplaceable { stage: usize, dimension: Dimension },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// The resource dimension that blocked a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    Memory,
    Compute,
    Bandwidth,
    InstanceSlots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuResidual {
    pub compute_share: f64,
    pub mem_mb: f64,
    pub bandwidth_mbps: f64,
    pub instance_slots: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    /// `assignments[stage][instance]` is the GPU index hosting it.
    pub assignments: Vec<Vec<usize>>,
    pub residuals: Vec<GpuResidual>,
}

impl PlacementPlan {
    pub fn gpus_used(&self) -> usize {
        let mut used: Vec<usize> = self
            .assignments
            .iter()
            .flatten()
            .copied()
            .collect();
        used.sort_unstable();
        used.dedup();
        used.len()
    }
}

/// Per-instance demand of one stage, derived from the allocation and models.
struct StageDemand {
    share: f64,
    bandwidth: f64,
    /// Resident model, charged once per GPU hosting the stage.
    model_mb: f64,
    /// Working set per instance at the planned batch.
    per_instance_mb: f64,
}

struct GpuState {
    residual: GpuResidual,
    /// Stages whose resident model this GPU already holds.
    model_charged: Vec<bool>,
}

/// Knobs for placement variants. The bandwidth dimension is a hard capacity
/// by default; the no-constraint ablation turns it off and lets residual
/// bandwidth go negative, which the simulator then punishes as contention.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceOptions {
    pub enforce_bandwidth: bool,
}

impl Default for PlaceOptions {
    fn default() -> Self {
        PlaceOptions {
            enforce_bandwidth: true,
        }
    }
}

fn can_hold(
    state: &GpuState,
    stage: usize,
    d: &StageDemand,
    options: &PlaceOptions,
) -> (u32, Dimension) {
    const EPS: f64 = 1e-9;
    let by_slots = state.residual.instance_slots;
    let by_compute = if d.share <= 0.0 {
        u32::MAX
    } else {
        ((state.residual.compute_share + EPS) / d.share) as u32
    };
    let by_bw = if !options.enforce_bandwidth || d.bandwidth <= 0.0 {
        u32::MAX
    } else {
        ((state.residual.bandwidth_mbps + EPS) / d.bandwidth) as u32
    };
    let model_need = if state.model_charged[stage] { 0.0 } else { d.model_mb };
    let mem_left = state.residual.mem_mb - model_need;
    let by_mem = if mem_left < -EPS {
        0
    } else if d.per_instance_mb <= 0.0 {
        u32::MAX
    } else {
        ((mem_left + EPS) / d.per_instance_mb) as u32
    };

    let dims = [
        (by_mem, Dimension::Memory),
        (by_compute, Dimension::Compute),
        (by_bw, Dimension::Bandwidth),
        (by_slots, Dimension::InstanceSlots),
    ];
    let (k, dim) = dims
        .iter()
        .copied()
        .min_by_key(|&(k, d)| (k, d))
        .unwrap();
    (k, dim)
}

fn deploy(state: &mut GpuState, stage: usize, d: &StageDemand, k: u32) {
    if !state.model_charged[stage] {
        state.residual.mem_mb -= d.model_mb;
        state.model_charged[stage] = true;
    }
    state.residual.mem_mb -= k as f64 * d.per_instance_mb;
    state.residual.compute_share -= k as f64 * d.share;
    state.residual.bandwidth_mbps -= k as f64 * d.bandwidth;
    state.residual.instance_slots -= k;
}

/// Packs every instance of the allocation onto the cluster.
pub fn place(
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
) -> Result<PlacementPlan, PlacementError> {
    place_with_options(allocation, pipeline, gpus, models, batch, &PlaceOptions::default())
}

pub fn place_with_options(
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    options: &PlaceOptions,
) -> Result<PlacementPlan, PlacementError> {
    let n = pipeline.stages.len();
    if allocation.instance_counts.len() != n || models.len() != n {
        return Err(PlacementError::InvalidArgument(
            "allocation/model count does not match pipeline stages".into(),
        ));
    }
    if gpus.is_empty() {
        return Err(PlacementError::InvalidArgument("no GPUs given".into()));
    }

    let demands: Vec<StageDemand> = (0..n)
        .map(|i| {
            let m = &models[i];
            StageDemand {
                share: allocation.shares[i],
                bandwidth: m.predict_bandwidth(batch, allocation.shares[i]).value,
                model_mb: m.footprint_model.intercept,
                per_instance_mb: m.footprint_model.slope * batch as f64,
            }
        })
        .collect();

    let mut states: Vec<GpuState> = gpus
        .iter()
        .map(|g| GpuState {
            residual: GpuResidual {
                compute_share: g.compute_share_total,
                mem_mb: g.mem_capacity,
                bandwidth_mbps: g.mem_bandwidth,
                instance_slots: g.instance_cap,
            },
            model_charged: vec![false; n],
        })
        .collect();

    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(n);
    for stage in 0..n {
        let d = &demands[stage];
        let needed = allocation.instance_counts[stage];
        let mut order: Vec<usize> = (0..gpus.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = &states[a].residual;
            let rb = &states[b].residual;
            ra.mem_mb
                .partial_cmp(&rb.mem_mb)
                .unwrap()
                .then(ra.compute_share.partial_cmp(&rb.compute_share).unwrap())
                .then(ra.bandwidth_mbps.partial_cmp(&rb.bandwidth_mbps).unwrap())
                .then(a.cmp(&b))
        });

        let mut placed: Vec<usize> = Vec::with_capacity(needed as usize);
        // First try to keep the whole stage together.
        let whole = order
            .iter()
            .copied()
            .find(|&g| can_hold(&states[g], stage, d, options).0 >= needed);
        if let Some(g) = whole {
            deploy(&mut states[g], stage, d, needed);
            placed.extend(std::iter::repeat(g).take(needed as usize));
        } else {
            let mut remaining = needed;
            for &g in &order {
                if remaining == 0 {
                    break;
                }
                let (k, _) = can_hold(&states[g], stage, d, options);
                let k = k.min(remaining);
                if k == 0 {
                    continue;
                }
                deploy(&mut states[g], stage, d, k);
                placed.extend(std::iter::repeat(g).take(k as usize));
                remaining -= k;
            }
            if remaining > 0 {
                // Name the dimension that capped the GPU able to take the
                // most instances; ties resolve to the scarcest dimension.
                let dimension = order
                    .iter()
                    .map(|&g| can_hold(&states[g], stage, d, options))
                    .max_by_key(|&(k, dim)| (k, std::cmp::Reverse(dim)))
                    .map(|(_, dim)| dim)
                    .unwrap_or(Dimension::Memory);
                return Err(PlacementError::Unplaceable { stage, dimension });
            }
        }
        assignments.push(placed);
    }

    let plan = PlacementPlan {
        assignments,
        residuals: states.into_iter().map(|s| s.residual).collect(),
    };
    debug_assert!(
        !options.enforce_bandwidth
            || plan.residuals.iter().all(|r| {
                r.compute_share >= -1e-6 && r.mem_mb >= -1e-6 && r.bandwidth_mbps >= -1e-6
            })
    );
    Ok(plan)
}

/// One producer-to-consumer edge of an adjacent stage pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopRoute {
    pub producer_instance: usize,
    pub consumer_instance: usize,
    pub path: CommPath,
}

/// Routes every producer instance of each hop to a consumer instance and
/// labels the edge with the communication path it can use.
///
/// A producer prefers a consumer on its own GPU (the global-memory path); if
/// none exists the consumers are assigned round-robin over the main-memory
/// path. Split stages therefore produce mixed labels.
pub fn effective_comm_paths(plan: &PlacementPlan, pipeline: &PipelineSpec) -> Vec<Vec<HopRoute>> {
    let n = pipeline.stages.len();
    let mut hops = Vec::with_capacity(n.saturating_sub(1));
    for stage in 0..n.saturating_sub(1) {
        let producers = &plan.assignments[stage];
        let consumers = &plan.assignments[stage + 1];
        let mut routes = Vec::with_capacity(producers.len());
        for (a, &pg) in producers.iter().enumerate() {
            let same_gpu = consumers.iter().position(|&cg| cg == pg);
            let (consumer_instance, path) = match same_gpu {
                Some(c) => (c, CommPath::GlobalMemory),
                None => (a % consumers.len(), CommPath::MainMemory),
            };
            routes.push(HopRoute {
                producer_instance: a,
                consumer_instance,
                path,
            });
        }
        hops.push(routes);
    }
    hops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{collect_profile, default_batch_grid, default_share_grid, train};
    use crate::workload::make_artifact_pipeline;

    fn models_for(pipeline: &PipelineSpec, gpu: &GpuSpec) -> Vec<PerfModel> {
        pipeline
            .stages
            .iter()
            .map(|m| {
                let s =
                    collect_profile(m, gpu, &default_batch_grid(), &default_share_grid()).unwrap();
                train(m.stage_id, &s, 23).unwrap().0
            })
            .collect()
    }

    fn alloc(counts: Vec<u32>, shares: Vec<f64>, gpus: u32) -> Allocation {
        Allocation {
            instance_counts: counts,
            shares,
            gpu_count: gpus,
            objective: 0.0,
        }
    }

    #[test]
    fn fuller_gpu_preferred() {
        // Two GPUs with 4,000 and 10,000 MB of memory; a single instance
        // needing ~3,000 MB must land on the smaller one.
        let pipeline = PipelineSpec {
            stages: vec![crate::workload::MicroserviceSpec {
                stage_id: 0,
                compute_coeff: 0.5,
                mem_traffic_coeff: 1.0,
                payload_out: 0.1,
                model_footprint: 2900.0,
                footprint_per_item: 3.0,
                scaling_exponent: 0.8,
                pinned_memory: false,
            }],
            qos_target_ms: 1000.0,
            batch_size: 32,
        };
        let mut small = GpuSpec::preset_consumer();
        small.mem_capacity = 4000.0;
        let mut big = GpuSpec::preset_consumer();
        big.mem_capacity = 10_000.0;
        let gpus = vec![big, small]; // deliberately out of order
        let models = models_for(&pipeline, &gpus[0]);
        let plan = place(&alloc(vec![1], vec![50.0], 2), &pipeline, &gpus, &models, 32).unwrap();
        assert_eq!(plan.assignments[0], vec![1], "smaller GPU has priority");
    }

    #[test]
    fn oversized_stage_unplaceable() {
        let pipeline = make_artifact_pipeline(1, 1, 1).unwrap();
        let mut tiny = GpuSpec::preset_consumer();
        tiny.mem_capacity = 500.0; // below every model footprint
        let models = models_for(&pipeline, &GpuSpec::preset_consumer());
        let err = place(
            &alloc(vec![1, 1, 1], vec![30.0, 30.0, 30.0], 1),
            &pipeline,
            &[tiny],
            &models,
            32,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PlacementError::Unplaceable {
                dimension: Dimension::Memory,
                ..
            }
        ));
    }

    #[test]
    fn co_located_instances_share_model_memory() {
        let pipeline = make_artifact_pipeline(1, 1, 1).unwrap();
        let gpu = GpuSpec::preset_consumer();
        let models = models_for(&pipeline, &gpu);
        let batch = 32;
        let a = alloc(vec![2, 1, 1], vec![20.0, 20.0, 20.0], 1);
        let plan = place(&a, &pipeline, &[gpu.clone()], &models, batch).unwrap();
        assert_eq!(plan.assignments[0], vec![0, 0]);
        // Residual memory reflects one model charge plus two working sets
        // for stage 0, and one each for the other stages.
        let mut expected = gpu.mem_capacity;
        for (i, m) in models.iter().enumerate() {
            let k = a.instance_counts[i] as f64;
            expected -= m.footprint_model.intercept + k * m.footprint_model.slope * batch as f64;
        }
        assert!((plan.residuals[0].mem_mb - expected).abs() < 1e-6);
    }

    #[test]
    fn deterministic_plan() {
        let pipeline = make_artifact_pipeline(2, 2, 2).unwrap();
        let gpus = vec![GpuSpec::preset_consumer(), GpuSpec::preset_consumer()];
        let models = models_for(&pipeline, &gpus[0]);
        let a = alloc(vec![2, 3, 2], vec![20.0, 25.0, 15.0], 2);
        let p1 = place(&a, &pipeline, &gpus, &models, 32).unwrap();
        let p2 = place(&a, &pipeline, &gpus, &models, 32).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn comm_paths_all_global_when_single_gpu() {
        let pipeline = make_artifact_pipeline(1, 1, 1).unwrap();
        let gpu = GpuSpec::preset_consumer();
        let models = models_for(&pipeline, &gpu);
        let a = alloc(vec![1, 1, 1], vec![30.0, 30.0, 30.0], 1);
        let plan = place(&a, &pipeline, &[gpu], &models, 32).unwrap();
        let hops = effective_comm_paths(&plan, &pipeline);
        assert_eq!(hops.len(), 2);
        for hop in &hops {
            for r in hop {
                assert_eq!(r.path, CommPath::GlobalMemory);
            }
        }
    }

    #[test]
    fn comm_paths_main_memory_when_stages_apart() {
        let pipeline = make_artifact_pipeline(1, 1, 1).unwrap();
        let gpu = GpuSpec::preset_consumer();
        let models = models_for(&pipeline, &gpu);
        let plan = PlacementPlan {
            assignments: vec![vec![0], vec![1], vec![2]],
            residuals: Vec::new(),
        };
        let hops = effective_comm_paths(&plan, &pipeline);
        for hop in &hops {
            for r in hop {
                assert_eq!(r.path, CommPath::MainMemory);
            }
        }
    }

    #[test]
    fn split_stage_produces_both_labels() {
        let pipeline = make_artifact_pipeline(1, 1, 1).unwrap();
        let plan = PlacementPlan {
            assignments: vec![vec![0, 1], vec![0], vec![0]],
            residuals: Vec::new(),
        };
        let hops = effective_comm_paths(&plan, &pipeline);
        let labels: Vec<CommPath> = hops[0].iter().map(|r| r.path).collect();
        assert!(labels.contains(&CommPath::GlobalMemory));
        assert!(labels.contains(&CommPath::MainMemory));
    }

    #[test]
    fn heuristic_close_to_exhaustive_minimum() {
        // Exhaustive oracle over every instance-to-GPU assignment on small
        // instances; the heuristic may use at most one extra GPU.
        let pipeline = make_artifact_pipeline(2, 2, 2).unwrap();
        let base = GpuSpec::preset_consumer();
        let models = models_for(&pipeline, &base);
        let batch = 32;
        for (counts, mem_cap) in [
            (vec![1u32, 2, 1], 4_000.0),
            (vec![2, 2, 2], 5_000.0),
            (vec![1, 1, 1], 11_000.0),
            (vec![2, 1, 2], 3_500.0),
        ] {
            let mut gpu = base.clone();
            gpu.mem_capacity = mem_cap;
            let gpus = vec![gpu.clone(), gpu.clone(), gpu.clone()];
            let shares = vec![15.0, 20.0, 15.0];
            let a = alloc(counts.clone(), shares.clone(), 3);
            let Ok(plan) = place(&a, &pipeline, &gpus, &models, batch) else {
                continue;
            };
            let exhaustive = exhaustive_min_gpus(&counts, &shares, &gpus, &models, batch);
            let used = plan.gpus_used();
            assert!(
                used <= exhaustive + 1,
                "heuristic used {used}, exhaustive minimum {exhaustive} for {counts:?}"
            );
        }
    }

    /// Test-side oracle: enumerate all assignments of instances to GPUs and
    /// return the fewest GPUs any valid assignment touches.
    fn exhaustive_min_gpus(
        counts: &[u32],
        shares: &[f64],
        gpus: &[GpuSpec],
        models: &[PerfModel],
        batch: u32,
    ) -> usize {
        let mut slots: Vec<(usize, f64, f64, f64)> = Vec::new(); // stage, share, bw, per-item mem
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                slots.push((
                    i,
                    shares[i],
                    models[i].predict_bandwidth(batch, shares[i]).value,
                    models[i].footprint_model.slope * batch as f64,
                ));
            }
        }
        let mut best = usize::MAX;
        let total = (gpus.len() as u32).pow(slots.len() as u32);
        'outer: for code in 0..total {
            let mut assign = Vec::with_capacity(slots.len());
            let mut c = code;
            for _ in 0..slots.len() {
                assign.push((c % gpus.len() as u32) as usize);
                c /= gpus.len() as u32;
            }
            let mut compute = vec![0.0; gpus.len()];
            let mut bw = vec![0.0; gpus.len()];
            let mut mem = vec![0.0; gpus.len()];
            let mut slots_used = vec![0u32; gpus.len()];
            let mut model_on: Vec<Vec<bool>> = vec![vec![false; counts.len()]; gpus.len()];
            for (slot, &g) in slots.iter().zip(&assign) {
                let (stage, share, b, per_item) = *slot;
                compute[g] += share;
                bw[g] += b;
                mem[g] += per_item;
                if !model_on[g][stage] {
                    mem[g] += models[stage].footprint_model.intercept;
                    model_on[g][stage] = true;
                }
                slots_used[g] += 1;
            }
            for g in 0..gpus.len() {
                if compute[g] > gpus[g].compute_share_total + 1e-9
                    || bw[g] > gpus[g].mem_bandwidth + 1e-9
                    || mem[g] > gpus[g].mem_capacity + 1e-9
                    || slots_used[g] > gpus[g].instance_cap
                {
                    continue 'outer;
                }
            }
            let used = assign.iter().collect::<std::collections::HashSet<_>>().len();
            best = best.min(used);
        }
        best
    }
}
