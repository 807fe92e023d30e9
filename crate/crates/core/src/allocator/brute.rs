//! Exhaustive grid search over the allocation vector, used as the oracle the
//! annealing solver is validated against.

use super::{AllocContext, Allocation, Constraint, FeasibilityConfig, SolveError};
use crate::predictor::PerfModel;
use crate::workload::{GpuSpec, PipelineSpec};

const SPACE_LIMIT: u128 = 10_000_000;

/// Exact max-load optimum on the given share grid with at most
/// `max_instances` instances per stage. Refuses search spaces above 10^7
/// points. Ties resolve to the first point in lexicographic enumeration
/// order, so the result is deterministic.
pub fn brute_force_max_load(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    share_step: f64,
    max_instances: u32,
    cfg: &FeasibilityConfig,
) -> Result<Allocation, SolveError> {
    if !(share_step > 0.0 && share_step <= 100.0) {
        return Err(SolveError::InvalidArgument(format!(
            "share_step {share_step} outside (0, 100]"
        )));
    }
    if max_instances < 1 {
        return Err(SolveError::InvalidArgument(
            "max_instances must be >= 1".into(),
        ));
    }
    let ctx = AllocContext::new(pipeline, gpus, models, batch, cfg.clone())?;
    let shares: Vec<f64> = {
        let mut v = Vec::new();
        let mut s = share_step;
        while s <= 100.0 + 1e-9 {
            if s >= ctx.min_share as f64 - 1e-9 {
                v.push(s.min(100.0));
            }
            s += share_step;
        }
        v
    };
    if shares.is_empty() {
        return Err(SolveError::InvalidArgument(
            "share grid is empty below the trained range".into(),
        ));
    }
    let n = pipeline.stages.len();
    let per_stage = (shares.len() as u128) * (max_instances as u128);
    let points = per_stage.pow(n as u32);
    if points > SPACE_LIMIT {
        return Err(SolveError::SearchSpaceTooLarge {
            points,
            limit: SPACE_LIMIT,
        });
    }

    let gpu_count = gpus.len() as u32;
    let mut counts = vec![1u32; n];
    let mut share_idx = vec![0usize; n];
    let mut best: Option<Allocation> = None;
    let mut violation_counts: Vec<(Constraint, u64)> = Vec::new();

    loop {
        let share_vals: Vec<f64> = share_idx.iter().map(|&i| shares[i]).collect();
        let candidate = Allocation {
            instance_counts: counts.clone(),
            shares: share_vals,
            gpu_count,
            objective: 0.0,
        };
        let report = ctx.check(&candidate);
        if report.feasible {
            let objective = ctx.min_throughput(&candidate.instance_counts, &candidate.shares);
            let better = match &best {
                None => true,
                Some(b) => objective > b.objective,
            };
            if better {
                best = Some(Allocation {
                    objective,
                    ..candidate
                });
            }
        } else {
            for v in &report.violations {
                match violation_counts.iter_mut().find(|(c, _)| *c == v.constraint) {
                    Some((_, k)) => *k += 1,
                    None => violation_counts.push((v.constraint, 1)),
                }
            }
        }

        // Odometer over (count, share index) per stage.
        let mut carry = true;
        for i in 0..n {
            if !carry {
                break;
            }
            if counts[i] < max_instances {
                counts[i] += 1;
                carry = false;
            } else {
                counts[i] = 1;
                if share_idx[i] + 1 < shares.len() {
                    share_idx[i] += 1;
                    carry = false;
                } else {
                    share_idx[i] = 0;
                }
            }
        }
        if carry {
            break;
        }
    }

    best.ok_or_else(|| {
        violation_counts.sort_by_key(|&(c, k)| (std::cmp::Reverse(k), c));
        SolveError::Infeasible(
            violation_counts
                .first()
                .map(|&(c, _)| c)
                .unwrap_or(Constraint::QosBudget),
        )
    })
}
