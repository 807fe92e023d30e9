//! The discrete-event loop.
//!
//! Queries arrive open-loop, are routed round-robin to the first stage's
//! instances, batched per instance, served with a contention-scaled solo
//! duration, and handed to the next stage over the communication path the
//! placement determined. The event heap orders by (time, insertion sequence)
//! so identical inputs replay identically.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::allocator::Allocation;
use crate::comm::{
    comm_time_global_memory, comm_time_main_memory, comm_time_main_memory_pinned, CommConfig,
    CommPath,
};
use crate::placement::{effective_comm_paths, PlacementPlan};
use crate::simulator::{
    BatchPolicy, ContentionPolicy, SimOptions, SimulationError, StageStats,
};
use crate::workload::{oracle_bandwidth, oracle_duration, GpuSpec, PipelineSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival { query: usize },
    ServiceEnd { batch: usize },
    CommEnd { batch: usize },
    Flush { stage: usize, instance: usize },
}

struct Event {
    time_ms: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time_ms == other.time_ms && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap, we want the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time_ms
            .partial_cmp(&self.time_ms)
            .unwrap()
            .then(other.seq.cmp(&self.seq))
    }
}

struct QueryRecord {
    arrival_ms: f64,
    enqueue_ms: f64,
    queue_ms: Vec<f64>,
    service_ms: Vec<f64>,
    comm_ms: Vec<f64>,
    completed_ms: Option<f64>,
}

struct InstanceState {
    gpu: usize,
    busy: bool,
    queue: VecDeque<usize>,
    /// Static route to the consumer instance of the next stage.
    route_to: Option<usize>,
    route_path: Option<CommPath>,
}

struct BatchRecord {
    stage: usize,
    instance: usize,
    queries: Vec<usize>,
    bw_demand: f64,
    /// Set while the batch's output transfer occupies PCIe links.
    pcie_gpus: Vec<usize>,
}

pub(super) struct EngineOutput {
    pub arrived: usize,
    pub completed: usize,
    pub latencies: Vec<(f64, f64)>, // (arrival, latency)
    pub per_stage_queue: Vec<(f64, usize)>,
    pub per_stage_service: Vec<(f64, usize)>,
    pub comm_total_ms: f64,
    pub comm_samples: usize,
}

pub(super) fn run(
    plan: &PlacementPlan,
    allocation: &Allocation,
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    arrivals: &[f64],
    comm_cfg: &CommConfig,
    options: &SimOptions,
    contention: &dyn ContentionPolicy,
    horizon_ms: f64,
) -> Result<EngineOutput, SimulationError> {
    let n_stages = pipeline.stages.len();
    let routes = effective_comm_paths(plan, pipeline);

    let mut instances: Vec<Vec<InstanceState>> = Vec::with_capacity(n_stages);
    for stage in 0..n_stages {
        let mut stage_instances = Vec::new();
        for (i, &gpu) in plan.assignments[stage].iter().enumerate() {
            let (route_to, route_path) = if stage + 1 < n_stages {
                let r = routes[stage][i];
                (Some(r.consumer_instance), Some(r.path))
            } else {
                (None, None)
            };
            stage_instances.push(InstanceState {
                gpu,
                busy: false,
                queue: VecDeque::new(),
                route_to,
                route_path,
            });
        }
        instances.push(stage_instances);
    }

    let mut queries: Vec<QueryRecord> = arrivals
        .iter()
        .map(|&t| QueryRecord {
            arrival_ms: t,
            enqueue_ms: t,
            queue_ms: vec![0.0; n_stages],
            service_ms: vec![0.0; n_stages],
            comm_ms: Vec::new(),
            completed_ms: None,
        })
        .collect();

    // Per-stage remaining-work estimate for the slack-based flush policy:
    // solo durations downstream plus the hop handle costs.
    let remaining_est: Vec<f64> = {
        let mut rem = vec![0.0; n_stages + 1];
        for stage in (0..n_stages).rev() {
            let d = oracle_duration(
                &pipeline.stages[stage],
                pipeline.batch_size,
                allocation.shares[stage],
                &gpus[plan.assignments[stage][0]],
            )
            .map_err(|e| SimulationError::Setup(e.to_string()))?;
            let hop = if stage + 1 < n_stages {
                comm_time_global_memory(comm_cfg, 0.0, &gpus[0])
            } else {
                0.0
            };
            rem[stage] = rem[stage + 1] + d + hop;
        }
        rem
    };

    let mut heap: BinaryHeap<Event> = BinaryHeap::new();
    let mut seq: u64 = 0;
    let push = |heap: &mut BinaryHeap<Event>, seq: &mut u64, time_ms: f64, kind: EventKind| {
        *seq += 1;
        heap.push(Event {
            time_ms,
            seq: *seq,
            kind,
        });
    };
    for (q, &t) in arrivals.iter().enumerate() {
        push(&mut heap, &mut seq, t, EventKind::Arrival { query: q });
    }

    let mut batches: Vec<BatchRecord> = Vec::new();
    let mut gpu_bw_demand = vec![0.0f64; gpus.len()];
    let mut gpu_pcie_streams = vec![0u32; gpus.len()];
    let mut next_stage0 = 0usize;
    let mut completed = 0usize;
    let mut comm_total_ms = 0.0;
    let mut comm_samples = 0usize;
    let mut clock = 0.0f64;

    macro_rules! start_batch {
        ($stage:expr, $inst:expr, $now:expr) => {{
            let stage = $stage;
            let inst = $inst;
            let now: f64 = $now;
            let take = (pipeline.batch_size as usize).min(instances[stage][inst].queue.len());
            let mut members = Vec::with_capacity(take);
            for _ in 0..take {
                members.push(instances[stage][inst].queue.pop_front().unwrap());
            }
            let gpu_idx = instances[stage][inst].gpu;
            let gpu = &gpus[gpu_idx];
            let share = allocation.shares[stage];
            let k = members.len() as u32;
            let solo = oracle_duration(&pipeline.stages[stage], k, share, gpu)
                .map_err(|e| SimulationError::Setup(e.to_string()))?;
            let bw_demand = oracle_bandwidth(&pipeline.stages[stage], k, share, gpu)
                .map_err(|e| SimulationError::Setup(e.to_string()))?;
            gpu_bw_demand[gpu_idx] += bw_demand;
            let mult = contention.multiplier(gpu_bw_demand[gpu_idx], gpu.mem_bandwidth);
            let service = solo * mult;
            if !service.is_finite() {
                return Err(SimulationError::NonFinite(format!(
                    "service time at stage {stage}"
                )));
            }
            for &q in &members {
                queries[q].queue_ms[stage] = now - queries[q].enqueue_ms;
                queries[q].service_ms[stage] = service;
            }
            instances[stage][inst].busy = true;
            let batch_id = batches.len();
            batches.push(BatchRecord {
                stage,
                instance: inst,
                queries: members,
                bw_demand,
                pcie_gpus: Vec::new(),
            });
            push(
                &mut heap,
                &mut seq,
                now + service,
                EventKind::ServiceEnd { batch: batch_id },
            );
        }};
    }

    macro_rules! try_dispatch {
        ($stage:expr, $inst:expr, $now:expr) => {{
            let stage = $stage;
            let inst = $inst;
            let now: f64 = $now;
            let state = &instances[stage][inst];
            if !state.busy && !state.queue.is_empty() {
                match options.batch_policy {
                    BatchPolicy::WorkConserving => start_batch!(stage, inst, now),
                    BatchPolicy::HoldUntilSlack => {
                        if state.queue.len() >= pipeline.batch_size as usize {
                            start_batch!(stage, inst, now);
                        } else {
                            let head = *state.queue.front().unwrap();
                            let deadline = queries[head].arrival_ms + pipeline.qos_target_ms
                                - remaining_est[stage];
                            if deadline <= now + 1e-9 {
                                start_batch!(stage, inst, now);
                            } else {
                                push(
                                    &mut heap,
                                    &mut seq,
                                    deadline,
                                    EventKind::Flush { stage, instance: inst },
                                );
                            }
                        }
                    }
                }
            }
        }};
    }

    while let Some(ev) = heap.pop() {
        let now = ev.time_ms;
        debug_assert!(now >= clock - 1e-9, "clock moved backwards");
        clock = clock.max(now);
        if now > horizon_ms {
            break;
        }
        match ev.kind {
            EventKind::Arrival { query } => {
                let inst = next_stage0 % instances[0].len();
                next_stage0 += 1;
                queries[query].enqueue_ms = now;
                instances[0][inst].queue.push_back(query);
                try_dispatch!(0, inst, now);
            }
            EventKind::Flush { stage, instance } => {
                try_dispatch!(stage, instance, now);
            }
            EventKind::ServiceEnd { batch } => {
                let (stage, inst) = (batches[batch].stage, batches[batch].instance);
                let gpu_idx = instances[stage][inst].gpu;
                gpu_bw_demand[gpu_idx] -= batches[batch].bw_demand;
                if gpu_bw_demand[gpu_idx] < 0.0 {
                    gpu_bw_demand[gpu_idx] = 0.0;
                }
                instances[stage][inst].busy = false;

                if stage + 1 == n_stages {
                    for &q in &batches[batch].queries {
                        queries[q].completed_ms = Some(now);
                        completed += 1;
                    }
                } else {
                    let consumer = instances[stage][inst].route_to.unwrap();
                    let path = instances[stage][inst].route_path.unwrap();
                    let payload =
                        pipeline.stages[stage].payload_out * batches[batch].queries.len() as f64;
                    let producer_gpu = gpu_idx;
                    let consumer_gpu = instances[stage + 1][consumer].gpu;
                    let time = match path {
                        CommPath::GlobalMemory => {
                            comm_time_global_memory(comm_cfg, payload, &gpus[producer_gpu])
                        }
                        CommPath::MainMemory => {
                            // The transfer occupies both ends' PCIe links;
                            // the slower end sets the pace.
                            gpu_pcie_streams[producer_gpu] += 1;
                            let mut ends = vec![producer_gpu];
                            if consumer_gpu != producer_gpu {
                                gpu_pcie_streams[consumer_gpu] += 1;
                                ends.push(consumer_gpu);
                            }
                            batches[batch].pcie_gpus = ends.clone();
                            let pinned = pipeline.stages[stage].pinned_memory;
                            ends.iter()
                                .map(|&g| {
                                    let streams = gpu_pcie_streams[g];
                                    if pinned {
                                        comm_time_main_memory_pinned(
                                            comm_cfg, payload, streams, &gpus[g],
                                        )
                                    } else {
                                        comm_time_main_memory(comm_cfg, payload, streams, &gpus[g])
                                    }
                                })
                                .fold(0.0, f64::max)
                        }
                    };
                    if !time.is_finite() {
                        return Err(SimulationError::NonFinite(format!(
                            "communication time after stage {stage}"
                        )));
                    }
                    for &q in &batches[batch].queries {
                        queries[q].comm_ms.push(time);
                    }
                    comm_total_ms += time * batches[batch].queries.len() as f64;
                    comm_samples += batches[batch].queries.len();
                    push(
                        &mut heap,
                        &mut seq,
                        now + time,
                        EventKind::CommEnd { batch },
                    );
                }
                try_dispatch!(stage, inst, now);
            }
            EventKind::CommEnd { batch } => {
                for &g in &batches[batch].pcie_gpus {
                    gpu_pcie_streams[g] = gpu_pcie_streams[g].saturating_sub(1);
                }
                let stage = batches[batch].stage;
                let inst = batches[batch].instance;
                let consumer = instances[stage][inst].route_to.unwrap();
                let members = std::mem::take(&mut batches[batch].queries);
                for &q in &members {
                    queries[q].enqueue_ms = now;
                    instances[stage + 1][consumer].queue.push_back(q);
                }
                try_dispatch!(stage + 1, consumer, now);
            }
        }
    }

    let mut latencies = Vec::with_capacity(completed);
    let mut per_stage_queue = vec![(0.0, 0usize); n_stages];
    let mut per_stage_service = vec![(0.0, 0usize); n_stages];
    for q in &queries {
        let Some(done) = q.completed_ms else { continue };
        let latency = done - q.arrival_ms;
        let parts: f64 = q.queue_ms.iter().sum::<f64>()
            + q.service_ms.iter().sum::<f64>()
            + q.comm_ms.iter().sum::<f64>();
        debug_assert!(
            (parts - latency).abs() < 1e-6,
            "breakdown {parts} does not sum to latency {latency}"
        );
        latencies.push((q.arrival_ms, latency));
        for s in 0..n_stages {
            per_stage_queue[s].0 += q.queue_ms[s];
            per_stage_queue[s].1 += 1;
            per_stage_service[s].0 += q.service_ms[s];
            per_stage_service[s].1 += 1;
        }
    }

    Ok(EngineOutput {
        arrived: arrivals.len(),
        completed,
        latencies,
        per_stage_queue,
        per_stage_service,
        comm_total_ms,
        comm_samples,
    })
}

pub(super) fn stage_stats(out: &EngineOutput) -> Vec<StageStats> {
    out.per_stage_queue
        .iter()
        .zip(&out.per_stage_service)
        .map(|(&(q, qn), &(s, sn))| StageStats {
            queue_ms_mean: if qn > 0 { q / qn as f64 } else { 0.0 },
            service_ms_mean: if sn > 0 { s / sn as f64 } else { 0.0 },
        })
        .collect()
}
