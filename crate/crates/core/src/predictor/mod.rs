//! Solo-run profiling and per-stage performance models.
//!
//! Duration, bandwidth and throughput are nonlinear in the compute share, so
//! each gets its own regression tree on (batch, share). Work and footprint
//! are exactly linear in batch and get least-squares fits. Training splits
//! the samples 70/30 with a seeded shuffle and reports held-out relative
//! errors per target, alongside the same error for a plain linear baseline
//! on duration so the two model families stay comparable.

mod linear;
mod tree;

pub use linear::{LinearBaseline, LinearModel};
pub use tree::{LeafStats, RegressionTree};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{
    oracle_bandwidth, oracle_duration, oracle_flops, oracle_footprint, oracle_throughput, GpuSpec,
    MicroserviceSpec, WorkloadError,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// One solo-run measurement of a stage at a (batch, share) grid point.
///
/// Besides the three tree targets the sample carries the batch's work and
/// footprint so the linear models can be fit from the same collection pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub batch: u32,
    pub share: f64,
    pub duration_ms: f64,
    pub bandwidth_mbps: f64,
    pub throughput_qps: f64,
    pub flops_gflops: f64,
    pub footprint_mb: f64,
}

/// Profiles a stage over the cartesian grid of batches and shares.
///
/// Samples come from the solo-run oracle, one per grid point in row-major
/// (batch-outer) order. Duplicated grid points produce duplicated identical
/// samples.
pub fn collect_profile(
    m: &MicroserviceSpec,
    gpu: &GpuSpec,
    batches: &[u32],
    shares: &[f64],
) -> Result<Vec<ProfileSample>, PredictorError> {
    if batches.is_empty() || shares.is_empty() {
        return Err(PredictorError::InvalidArgument(
            "profiling grid must be nonempty".into(),
        ));
    }
    for &s in shares {
        if !(s > 0.0 && s <= 100.0) {
            return Err(PredictorError::InvalidArgument(format!(
                "share {s} outside (0, 100]"
            )));
        }
    }
    let mut samples = Vec::with_capacity(batches.len() * shares.len());
    for &batch in batches {
        for &share in shares {
            samples.push(ProfileSample {
                batch,
                share,
                duration_ms: oracle_duration(m, batch, share, gpu)?,
                bandwidth_mbps: oracle_bandwidth(m, batch, share, gpu)?,
                throughput_qps: oracle_throughput(m, batch, share, gpu)?,
                flops_gflops: oracle_flops(m, batch),
                footprint_mb: oracle_footprint(m, batch),
            });
        }
    }
    Ok(samples)
}

/// The default profiling grid: 100 batch sizes by 10 share levels
/// (10% steps from 10 to 100), 1000 points.
pub fn default_batch_grid() -> Vec<u32> {
    (1..=100).collect()
}

pub fn default_share_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrStats {
    pub median_rel_err: f64,
    pub max_rel_err: f64,
}

/// Held-out errors from one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub duration: ErrStats,
    pub bandwidth: ErrStats,
    pub throughput: ErrStats,
    /// Plain linear fit of duration on (batch, share), same held-out set.
    pub duration_linear_baseline: ErrStats,
}

/// Trained predictors for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub stage_id: usize,
    pub duration_model: RegressionTree,
    pub bandwidth_model: RegressionTree,
    pub throughput_model: RegressionTree,
    pub flops_model: LinearModel,
    pub footprint_model: LinearModel,
    pub batch_range: (f64, f64),
    pub share_range: (f64, f64),
}

/// A prediction plus whether the query point had to be clamped into the
/// trained range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub clamped: bool,
}

const MAX_DEPTH: usize = 12;
const MIN_LEAF: usize = 2;

/// Trains the per-stage models on profiling samples.
///
/// Deterministic given `split_seed`: the same seed reproduces the same
/// 70/30 split, models, and error report.
pub fn train(
    stage_id: usize,
    samples: &[ProfileSample],
    split_seed: u64,
) -> Result<(PerfModel, TrainReport), PredictorError> {
    if samples.len() < 10 {
        return Err(PredictorError::Training(format!(
            "need at least 10 samples, got {}",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    idx.shuffle(&mut rng);
    let n_train = ((samples.len() as f64 * 0.7).round() as usize).clamp(1, samples.len() - 1);
    let (train_idx, test_idx) = idx.split_at(n_train);

    let feat = |s: &ProfileSample| [s.batch as f64, s.share];
    let xs: Vec<[f64; 2]> = train_idx.iter().map(|&i| feat(&samples[i])).collect();
    let dur: Vec<f64> = train_idx.iter().map(|&i| samples[i].duration_ms).collect();
    let bw: Vec<f64> = train_idx.iter().map(|&i| samples[i].bandwidth_mbps).collect();
    let thr: Vec<f64> = train_idx.iter().map(|&i| samples[i].throughput_qps).collect();
    let batches: Vec<f64> = train_idx.iter().map(|&i| samples[i].batch as f64).collect();
    let flops: Vec<f64> = train_idx.iter().map(|&i| samples[i].flops_gflops).collect();
    let foot: Vec<f64> = train_idx.iter().map(|&i| samples[i].footprint_mb).collect();

    let duration_model = RegressionTree::fit(&xs, &dur, MAX_DEPTH, MIN_LEAF);
    let bandwidth_model = RegressionTree::fit(&xs, &bw, MAX_DEPTH, MIN_LEAF);
    let throughput_model = RegressionTree::fit(&xs, &thr, MAX_DEPTH, MIN_LEAF);
    let flops_model = LinearModel::fit(&batches, &flops);
    let footprint_model = LinearModel::fit(&batches, &foot);

    let fold = |acc: (f64, f64), v: f64| (acc.0.min(v), acc.1.max(v));
    let batch_range = samples
        .iter()
        .map(|s| s.batch as f64)
        .fold((f64::INFINITY, f64::NEG_INFINITY), fold);
    let share_range = samples
        .iter()
        .map(|s| s.share)
        .fold((f64::INFINITY, f64::NEG_INFINITY), fold);

    let model = PerfModel {
        stage_id,
        duration_model,
        bandwidth_model,
        throughput_model,
        flops_model,
        footprint_model,
        batch_range,
        share_range,
    };

    let linear_dur = LinearBaseline::fit(&xs, &dur);
    let rel = |pred: f64, truth: f64| (pred - truth).abs() / truth.abs().max(1e-12);
    let mut dur_err = Vec::new();
    let mut bw_err = Vec::new();
    let mut thr_err = Vec::new();
    let mut lin_err = Vec::new();
    for &i in test_idx {
        let s = &samples[i];
        let x = feat(s);
        dur_err.push(rel(model.duration_model.predict(x), s.duration_ms));
        bw_err.push(rel(model.bandwidth_model.predict(x), s.bandwidth_mbps));
        thr_err.push(rel(model.throughput_model.predict(x), s.throughput_qps));
        lin_err.push(rel(linear_dur.predict(x), s.duration_ms));
    }
    let report = TrainReport {
        n_train,
        n_test: test_idx.len(),
        split_seed,
        duration: err_stats(&mut dur_err),
        bandwidth: err_stats(&mut bw_err),
        throughput: err_stats(&mut thr_err),
        duration_linear_baseline: err_stats(&mut lin_err),
    };
    Ok((model, report))
}

fn err_stats(errs: &mut [f64]) -> ErrStats {
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if errs.is_empty() {
        0.0
    } else if errs.len() % 2 == 1 {
        errs[errs.len() / 2]
    } else {
        0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
    };
    ErrStats {
        median_rel_err: median,
        max_rel_err: errs.last().copied().unwrap_or(0.0),
    }
}

impl PerfModel {
    fn clamp_point(&self, batch: f64, share: f64) -> ([f64; 2], bool) {
        let b = batch.clamp(self.batch_range.0, self.batch_range.1);
        let s = share.clamp(self.share_range.0, self.share_range.1);
        ([b, s], b != batch || s != share)
    }

    pub fn predict_duration(&self, batch: u32, share: f64) -> Prediction {
        let (x, clamped) = self.clamp_point(batch as f64, share);
        Prediction {
            value: self.duration_model.predict(x),
            clamped,
        }
    }

    pub fn predict_bandwidth(&self, batch: u32, share: f64) -> Prediction {
        let (x, clamped) = self.clamp_point(batch as f64, share);
        Prediction {
            value: self.bandwidth_model.predict(x),
            clamped,
        }
    }

    pub fn predict_throughput(&self, batch: u32, share: f64) -> Prediction {
        let (x, clamped) = self.clamp_point(batch as f64, share);
        Prediction {
            value: self.throughput_model.predict(x),
            clamped,
        }
    }

    /// Work of one batch in GFLOPs. Linear, so extrapolation is exact.
    pub fn predict_flops(&self, batch: u32) -> f64 {
        self.flops_model.predict(batch as f64)
    }

    /// Footprint of one instance in MB. Linear, so extrapolation is exact.
    pub fn predict_footprint(&self, batch: u32) -> f64 {
        self.footprint_model.predict(batch as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::make_artifact_pipeline;

    fn setup() -> (MicroserviceSpec, GpuSpec, Vec<ProfileSample>) {
        let m = make_artifact_pipeline(2, 2, 2).unwrap().stages[1].clone();
        let gpu = GpuSpec::preset_consumer();
        let samples =
            collect_profile(&m, &gpu, &default_batch_grid(), &default_share_grid()).unwrap();
        (m, gpu, samples)
    }

    #[test]
    fn default_grid_yields_1000_samples() {
        let (_, _, samples) = setup();
        assert_eq!(samples.len(), 1000);
    }

    #[test]
    fn single_point_matches_direct_oracle() {
        let m = make_artifact_pipeline(1, 1, 1).unwrap().stages[2].clone();
        let gpu = GpuSpec::preset_consumer();
        let samples = collect_profile(&m, &gpu, &[16], &[40.0]).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.duration_ms, oracle_duration(&m, 16, 40.0, &gpu).unwrap());
        assert_eq!(s.throughput_qps, oracle_throughput(&m, 16, 40.0, &gpu).unwrap());
        assert!((s.throughput_qps * s.duration_ms - 16_000.0).abs() < 1e-9);
    }

    #[test]
    fn duplicated_grid_point_duplicates_sample() {
        let m = make_artifact_pipeline(1, 1, 1).unwrap().stages[0].clone();
        let gpu = GpuSpec::preset_consumer();
        let samples = collect_profile(&m, &gpu, &[8, 8], &[50.0]).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0], samples[1]);
    }

    #[test]
    fn empty_grid_rejected() {
        let m = make_artifact_pipeline(1, 1, 1).unwrap().stages[0].clone();
        let gpu = GpuSpec::preset_consumer();
        assert!(collect_profile(&m, &gpu, &[], &[50.0]).is_err());
        assert!(collect_profile(&m, &gpu, &[1], &[]).is_err());
        assert!(collect_profile(&m, &gpu, &[1], &[0.0]).is_err());
    }

    #[test]
    fn too_few_samples_rejected() {
        let (_, _, samples) = setup();
        assert!(train(0, &samples[..9], 1).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (_, _, samples) = setup();
        let (m1, r1) = train(1, &samples, 42).unwrap();
        let (m2, r2) = train(1, &samples, 42).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        let (m3, _) = train(1, &samples, 43).unwrap();
        assert!(m1 != m3, "different seeds should change the split");
    }

    #[test]
    fn heldout_duration_error_within_5_percent() {
        let (_, _, samples) = setup();
        let (_, report) = train(1, &samples, 7).unwrap();
        assert!(
            report.duration.median_rel_err <= 0.05,
            "median duration error {} too high",
            report.duration.median_rel_err
        );
        assert!(report.bandwidth.median_rel_err <= 0.05);
        assert!(report.throughput.median_rel_err <= 0.05);
    }

    #[test]
    fn tree_beats_linear_baseline_on_duration() {
        let (_, _, samples) = setup();
        let (_, report) = train(1, &samples, 7).unwrap();
        assert!(report.duration.median_rel_err < report.duration_linear_baseline.median_rel_err);
    }

    #[test]
    fn constant_duration_gives_zero_error() {
        let mut samples = Vec::new();
        for b in 1..=20u32 {
            for s in 1..=5 {
                let share = s as f64 * 20.0;
                samples.push(ProfileSample {
                    batch: b,
                    share,
                    duration_ms: 4.0,
                    bandwidth_mbps: 100.0,
                    throughput_qps: b as f64 / 4.0 * 1000.0,
                    flops_gflops: b as f64,
                    footprint_mb: 10.0 + b as f64,
                });
            }
        }
        let (_, report) = train(0, &samples, 3).unwrap();
        assert_eq!(report.duration.max_rel_err, 0.0);
    }

    #[test]
    fn flops_fit_recovers_compute_coeff() {
        let (m, _, samples) = setup();
        let (model, _) = train(1, &samples, 5).unwrap();
        let rel = (model.flops_model.slope - m.compute_coeff).abs() / m.compute_coeff;
        assert!(rel < 1e-6, "slope {} vs coeff {}", model.flops_model.slope, m.compute_coeff);
        assert!(model.flops_model.intercept.abs() < 1e-6);
        let rel = (model.footprint_model.intercept - m.model_footprint).abs() / m.model_footprint;
        assert!(rel < 1e-6);
    }

    #[test]
    fn grid_point_prediction_within_leaf_spread() {
        let (_, _, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        for s in samples.iter().step_by(97) {
            let x = [s.batch as f64, s.share];
            let leaf = model.duration_model.leaf(x);
            let pred = model.duration_model.predict(x);
            let spread = leaf.y_max - leaf.y_min;
            assert!(
                (pred - s.duration_ms).abs() <= spread + 1e-12,
                "prediction {} outside leaf [{}, {}] for truth {}",
                pred,
                leaf.y_min,
                leaf.y_max,
                s.duration_ms
            );
        }
    }

    #[test]
    fn footprint_prediction_at_least_intercept() {
        let (_, _, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        assert!(model.predict_footprint(1) >= model.footprint_model.intercept);
    }

    #[test]
    fn out_of_range_share_clamps_and_flags() {
        let (_, _, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        let p = model.predict_duration(16, 150.0);
        assert!(p.clamped);
        assert_eq!(p.value, model.predict_duration(16, 100.0).value);
        assert!(!model.predict_duration(16, 50.0).clamped);
    }

    #[test]
    fn batch_sweep_prediction_nondecreasing() {
        let (m, gpu, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        // Verified against the oracle sweep: truth is strictly increasing,
        // the tree should follow it up to small plateau wobble.
        let mut prev_truth = 0.0;
        let mut prev_pred = f64::NEG_INFINITY;
        for batch in (1..=100).step_by(3) {
            let truth = oracle_duration(&m, batch, 50.0, &gpu).unwrap();
            assert!(truth > prev_truth);
            prev_truth = truth;
            let pred = model.predict_duration(batch, 50.0).value;
            assert!(
                pred >= prev_pred - 0.01 * prev_pred.abs(),
                "batch {batch}: {pred} dropped below {prev_pred}"
            );
            prev_pred = pred;
        }
    }

    #[test]
    fn throughput_duration_consistency_on_heldout() {
        let (_, _, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        for s in samples.iter().step_by(41) {
            let d = model.predict_duration(s.batch, s.share).value;
            let t = model.predict_throughput(s.batch, s.share).value;
            let implied = s.batch as f64 / d * 1000.0;
            let rel = (t - implied).abs() / implied;
            assert!(rel < 0.15, "consistency off by {rel} at batch {} share {}", s.batch, s.share);
        }
    }

    #[test]
    fn model_roundtrips_through_json() {
        let (_, _, samples) = setup();
        let (model, _) = train(1, &samples, 11).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: PerfModel = serde_json::from_str(&text).unwrap();
        assert_eq!(model, back);
    }
}
