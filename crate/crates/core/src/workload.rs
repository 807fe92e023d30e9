//! GPU and microservice definitions plus the synthetic performance oracle.
//!
//! The oracle is a closed-form analytic model that stands in for solo-run
//! profiling on real hardware: compute time follows a power law in the
//! granted compute share, memory time is traffic divided by peak bandwidth.
//! It is deterministic and pure, which makes it usable both as a profiling
//! source for the predictor and as a ground-truth reference in tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Capacities of one spatial-multitasking GPU.
///
/// Units are fixed crate-wide: MB for capacity, MB/s for bandwidth, ms for
/// time, GFLOPs for work. `compute_share_total` is always 100: shares granted
/// to instances are percentages of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub compute_share_total: f64,
    /// Peak compute rate in GFLOP/s.
    pub gflops: f64,
    /// Global memory capacity in MB.
    pub mem_capacity: f64,
    /// Peak global memory bandwidth in MB/s.
    pub mem_bandwidth: f64,
    /// Effective PCIe bandwidth of the whole link in MB/s.
    pub pcie_effective_bw: f64,
    /// PCIe bandwidth one pageable-memory copy stream reaches in MB/s.
    pub pcie_per_stream_bw: f64,
    /// Maximum number of resident instances (MPS client cap).
    pub instance_cap: u32,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let caps = [
            ("compute_share_total", self.compute_share_total),
            ("gflops", self.gflops),
            ("mem_capacity", self.mem_capacity),
            ("mem_bandwidth", self.mem_bandwidth),
            ("pcie_effective_bw", self.pcie_effective_bw),
            ("pcie_per_stream_bw", self.pcie_per_stream_bw),
        ];
        for (name, v) in caps {
            if !(v > 0.0) {
                return Err(WorkloadError::InvalidArgument(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.instance_cap < 1 {
            return Err(WorkloadError::InvalidArgument(
                "instance_cap must be at least 1".into(),
            ));
        }
        if self.pcie_per_stream_bw > self.pcie_effective_bw {
            return Err(WorkloadError::InvalidArgument(
                "pcie_per_stream_bw exceeds pcie_effective_bw".into(),
            ));
        }
        Ok(())
    }

    /// Consumer-card preset: 616 GB/s-class memory bandwidth, 11 GB memory.
    ///
    /// PCIe numbers model a 16x gen3 link: 12,160 MB/s effective, 3,150 MB/s
    /// for a single pageable copy stream. GFLOPS and capacity are sized so
    /// that desk-scale experiments stay feasible.
    pub fn preset_consumer() -> Self {
        GpuSpec {
            compute_share_total: 100.0,
            gflops: 13_450.0,
            mem_capacity: 11_000.0,
            mem_bandwidth: 616_000.0,
            pcie_effective_bw: 12_160.0,
            pcie_per_stream_bw: 3_150.0,
            instance_cap: 48,
        }
    }

    /// Datacenter-card preset: 897 GB/s-class memory bandwidth, 32 GB memory.
    pub fn preset_datacenter() -> Self {
        GpuSpec {
            compute_share_total: 100.0,
            gflops: 15_700.0,
            mem_capacity: 32_768.0,
            mem_bandwidth: 897_000.0,
            pcie_effective_bw: 12_160.0,
            pcie_per_stream_bw: 3_150.0,
            instance_cap: 48,
        }
    }
}

/// Cost character of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroserviceSpec {
    pub stage_id: usize,
    /// GFLOPs of work per query item.
    pub compute_coeff: f64,
    /// Global memory traffic per query item, in MB.
    pub mem_traffic_coeff: f64,
    /// Output payload per query passed to the next stage, in MB.
    pub payload_out: f64,
    /// Resident model weights, in MB.
    pub model_footprint: f64,
    /// Per-batch-item working set, in MB.
    pub footprint_per_item: f64,
    /// Exponent of the power-law compute scaling, in (0, 1].
    pub scaling_exponent: f64,
    /// Transfers use pinned host memory (one stream saturates the PCIe bus).
    #[serde(default)]
    pub pinned_memory: bool,
}

impl MicroserviceSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let coeffs = [
            ("compute_coeff", self.compute_coeff),
            ("mem_traffic_coeff", self.mem_traffic_coeff),
            ("payload_out", self.payload_out),
            ("model_footprint", self.model_footprint),
            ("footprint_per_item", self.footprint_per_item),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0) {
                return Err(WorkloadError::InvalidArgument(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(self.scaling_exponent > 0.0 && self.scaling_exponent <= 1.0) {
            return Err(WorkloadError::InvalidArgument(format!(
                "scaling_exponent must be in (0, 1], got {}",
                self.scaling_exponent
            )));
        }
        Ok(())
    }
}

/// Ordered chain of stages with a tail-latency target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<MicroserviceSpec>,
    pub qos_target_ms: f64,
    pub batch_size: u32,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.stages.is_empty() {
            return Err(WorkloadError::InvalidArgument(
                "pipeline needs at least one stage".into(),
            ));
        }
        if !(self.qos_target_ms > 0.0) {
            return Err(WorkloadError::InvalidArgument(
                "qos_target_ms must be positive".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(WorkloadError::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        for stage in &self.stages {
            stage.validate()?;
        }
        Ok(())
    }

    /// Every stage's resident model must fit each GPU of the cluster,
    /// otherwise the stage is unschedulable.
    pub fn check_schedulable(&self, gpus: &[GpuSpec]) -> Result<(), WorkloadError> {
        for stage in &self.stages {
            for (g, gpu) in gpus.iter().enumerate() {
                if stage.model_footprint >= gpu.mem_capacity {
                    return Err(WorkloadError::InvalidArgument(format!(
                        "stage {} model footprint {} MB does not fit GPU {} capacity {} MB",
                        stage.stage_id, stage.model_footprint, g, gpu.mem_capacity
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Base coefficients of the synthetic three-stage pipeline family.
///
/// The family builds pipelines of a PCIe-, a compute- and a memory-intensive
/// stage, each with an intensity level in 1..=3. A level multiplies the base
/// coefficient of its stage; everything else is shared. Absolute values are
/// free parameters: the defaults below are sized for desk-scale experiments
/// on the GPU presets (durations in the tens of ms at batch 32, footprints
/// well under card capacity) and can be overridden from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactParams {
    /// MB per query moved by the PCIe-intensive stage, per level.
    pub payload_base: f64,
    /// GFLOPs per item of the compute-intensive stage, per level.
    pub compute_base: f64,
    /// MB of memory traffic per item of the memory-intensive stage, per level.
    pub mem_traffic_base: f64,
    pub qos_target_ms: f64,
    pub batch_size: u32,
}

impl Default for ArtifactParams {
    fn default() -> Self {
        ArtifactParams {
            payload_base: 1.0,
            compute_base: 3.0,
            mem_traffic_base: 50.0,
            qos_target_ms: 100.0,
            batch_size: 32,
        }
    }
}

/// Builds one of the 27 synthetic benchmark pipelines.
///
/// Stage order is PCIe-, compute-, memory-intensive. A higher level strictly
/// increases the corresponding stage's dominant coefficient, and distinct
/// level triples always produce distinct coefficient sets.
pub fn make_artifact_pipeline(
    compute_level: u32,
    mem_level: u32,
    pcie_level: u32,
) -> Result<PipelineSpec, WorkloadError> {
    make_artifact_pipeline_with(compute_level, mem_level, pcie_level, &ArtifactParams::default())
}

pub fn make_artifact_pipeline_with(
    compute_level: u32,
    mem_level: u32,
    pcie_level: u32,
    params: &ArtifactParams,
) -> Result<PipelineSpec, WorkloadError> {
    for (name, level) in [
        ("compute_level", compute_level),
        ("mem_level", mem_level),
        ("pcie_level", pcie_level),
    ] {
        if !(1..=3).contains(&level) {
            return Err(WorkloadError::InvalidArgument(format!(
                "{name} must be in 1..=3, got {level}"
            )));
        }
    }
    let pcie_stage = MicroserviceSpec {
        stage_id: 0,
        compute_coeff: 0.5,
        mem_traffic_coeff: 5.0,
        payload_out: params.payload_base * pcie_level as f64,
        model_footprint: 600.0,
        footprint_per_item: 4.0,
        scaling_exponent: 0.8,
        pinned_memory: false,
    };
    let compute_stage = MicroserviceSpec {
        stage_id: 1,
        compute_coeff: params.compute_base * compute_level as f64,
        mem_traffic_coeff: 8.0,
        payload_out: 0.8,
        model_footprint: 1000.0,
        footprint_per_item: 6.0,
        scaling_exponent: 0.8,
        pinned_memory: false,
    };
    let mem_stage = MicroserviceSpec {
        stage_id: 2,
        compute_coeff: 0.8,
        mem_traffic_coeff: params.mem_traffic_base * mem_level as f64,
        payload_out: 0.4,
        model_footprint: 800.0,
        footprint_per_item: 5.0,
        scaling_exponent: 0.8,
        pinned_memory: false,
    };
    let pipeline = PipelineSpec {
        stages: vec![pcie_stage, compute_stage, mem_stage],
        qos_target_ms: params.qos_target_ms,
        batch_size: params.batch_size,
    };
    pipeline.validate()?;
    Ok(pipeline)
}

fn check_oracle_args(batch: u32, share: f64) -> Result<(), WorkloadError> {
    if batch < 1 {
        return Err(WorkloadError::InvalidArgument(format!(
            "batch must be at least 1, got {batch}"
        )));
    }
    if !(share > 0.0) {
        return Err(WorkloadError::InvalidArgument(format!(
            "share must be positive, got {share}"
        )));
    }
    if share > 100.0 {
        return Err(WorkloadError::InvalidArgument(format!(
            "share must be at most 100, got {share}"
        )));
    }
    Ok(())
}

/// Solo-run batch duration in ms.
///
/// `duration = compute_work / (gflops * (share/100)^sigma) + traffic / bandwidth`,
/// both terms converted to milliseconds. Strictly increasing in batch,
/// strictly decreasing in share.
pub fn oracle_duration(
    m: &MicroserviceSpec,
    batch: u32,
    share: f64,
    gpu: &GpuSpec,
) -> Result<f64, WorkloadError> {
    check_oracle_args(batch, share)?;
    let frac = (share / gpu.compute_share_total).powf(m.scaling_exponent);
    let compute_s = m.compute_coeff * batch as f64 / (gpu.gflops * frac);
    let mem_s = m.mem_traffic_coeff * batch as f64 / gpu.mem_bandwidth;
    Ok((compute_s + mem_s) * 1000.0)
}

/// Solo-run global memory bandwidth usage in MB/s.
pub fn oracle_bandwidth(
    m: &MicroserviceSpec,
    batch: u32,
    share: f64,
    gpu: &GpuSpec,
) -> Result<f64, WorkloadError> {
    let duration_ms = oracle_duration(m, batch, share, gpu)?;
    Ok(m.mem_traffic_coeff * batch as f64 / duration_ms * 1000.0)
}

/// Solo-run throughput in queries per second.
pub fn oracle_throughput(
    m: &MicroserviceSpec,
    batch: u32,
    share: f64,
    gpu: &GpuSpec,
) -> Result<f64, WorkloadError> {
    let duration_ms = oracle_duration(m, batch, share, gpu)?;
    Ok(batch as f64 / duration_ms * 1000.0)
}

/// Work of one batch in GFLOPs. Exactly linear in batch.
pub fn oracle_flops(m: &MicroserviceSpec, batch: u32) -> f64 {
    m.compute_coeff * batch as f64
}

/// Global memory footprint of one instance at the given batch size, in MB.
/// Exactly linear in batch with intercept `model_footprint`.
pub fn oracle_footprint(m: &MicroserviceSpec, batch: u32) -> f64 {
    m.model_footprint + m.footprint_per_item * batch as f64
}
