//! Experiment configuration file.
//!
//! One TOML file declares GPU presets, the pipeline under study (either an
//! explicit stage list or a synthetic level triple), communication overrides
//! and the experiment plan (batch sizes, load levels, annealing parameters,
//! seed). Seeds are mandatory so no run depends on wall-clock state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::SaParams;
use crate::comm::CommConfig;
use crate::workload::{
    make_artifact_pipeline_with, ArtifactParams, GpuSpec, PipelineSpec, WorkloadError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    /// The underlying parser reports the line and column of the defect.
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSection {
    pub compute_level: u32,
    pub mem_level: u32,
    pub pcie_level: u32,
    #[serde(flatten)]
    pub params: ArtifactParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSection {
    /// Batch grid; defaults to 1..=100.
    pub batches: Option<Vec<u32>>,
    /// Share grid; defaults to 10,20,..,100.
    pub shares: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub gpu_preset: String,
    pub gpu_count: u32,
    pub batch_sizes: Vec<u32>,
    /// Fractions of the solved peak load used for min-resource runs.
    pub load_levels: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub sa: Option<SaParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// GPU presets keyed by name; the built-in `consumer` and `datacenter`
    /// presets are always available.
    #[serde(default)]
    pub gpus: BTreeMap<String, GpuSpec>,
    pub pipeline: Option<PipelineSpec>,
    pub artifact: Option<ArtifactSection>,
    #[serde(default)]
    pub comm: Option<CommConfig>,
    #[serde(default)]
    pub profile: Option<ProfileSection>,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pipeline.is_none() && self.artifact.is_none() {
            return Err(ConfigError::Invalid(
                "either [pipeline] or [artifact] must be given".into(),
            ));
        }
        if self.pipeline.is_some() && self.artifact.is_some() {
            return Err(ConfigError::Invalid(
                "[pipeline] and [artifact] are mutually exclusive".into(),
            ));
        }
        if self.experiment.gpu_count < 1 {
            return Err(ConfigError::Invalid("gpu_count must be at least 1".into()));
        }
        if self.experiment.batch_sizes.is_empty() {
            return Err(ConfigError::Invalid("batch_sizes must be nonempty".into()));
        }
        for &l in &self.experiment.load_levels {
            if !(l > 0.0 && l <= 1.0) {
                return Err(ConfigError::Invalid(format!(
                    "load level {l} outside (0, 1]"
                )));
            }
        }
        self.resolve_preset()?.validate()?;
        self.build_pipeline()?.validate()?;
        Ok(())
    }

    fn resolve_preset(&self) -> Result<GpuSpec, ConfigError> {
        let name = &self.experiment.gpu_preset;
        if let Some(spec) = self.gpus.get(name) {
            return Ok(spec.clone());
        }
        match name.as_str() {
            "consumer" => Ok(GpuSpec::preset_consumer()),
            "datacenter" => Ok(GpuSpec::preset_datacenter()),
            _ => Err(ConfigError::Invalid(format!(
                "gpu preset '{name}' not defined; available: {:?} plus built-ins consumer, datacenter",
                self.gpus.keys().collect::<Vec<_>>()
            ))),
        }
    }

    pub fn build_gpus(&self) -> Result<Vec<GpuSpec>, ConfigError> {
        let preset = self.resolve_preset()?;
        Ok(vec![preset; self.experiment.gpu_count as usize])
    }

    pub fn build_pipeline(&self) -> Result<PipelineSpec, ConfigError> {
        if let Some(p) = &self.pipeline {
            return Ok(p.clone());
        }
        let a = self.artifact.as_ref().expect("validated");
        Ok(make_artifact_pipeline_with(
            a.compute_level,
            a.mem_level,
            a.pcie_level,
            &a.params,
        )?)
    }

    pub fn comm_config(&self) -> CommConfig {
        self.comm.clone().unwrap_or_default()
    }

    pub fn sa_params(&self) -> SaParams {
        let mut sa = self.experiment.sa.clone().unwrap_or_default();
        if self.experiment.sa.is_none() {
            sa.seed = self.experiment.seed;
        }
        sa
    }

    pub fn profile_batches(&self) -> Vec<u32> {
        self.profile
            .as_ref()
            .and_then(|p| p.batches.clone())
            .unwrap_or_else(crate::predictor::default_batch_grid)
    }

    pub fn profile_shares(&self) -> Vec<f64> {
        self.profile
            .as_ref()
            .and_then(|p| p.shares.clone())
            .unwrap_or_else(crate::predictor::default_share_grid)
    }
}
