//! Restart simulated annealing over the `[N_1..N_n, p_1..p_n]` vector.
//!
//! Every proposal perturbs one slot of the vector, is discarded when it
//! violates a constraint, accepted when it improves the objective, and
//! otherwise accepted with a probability that decays with the temperature.
//! Restarts are independent (own RNG stream per restart) and run in
//! parallel; the merge picks the best objective with restart-order
//! tie-breaking, so results are deterministic for a given seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    min_gpu_count, AllocContext, Allocation, Constraint, FeasibilityConfig, SaParams, SolveError,
    DEFAULT_THROUGHPUT_HEADROOM,
};
use crate::predictor::PerfModel;
use crate::workload::{GpuSpec, PipelineSpec};

/// Direction and constraint set of one annealing run.
#[derive(Clone, Copy)]
enum Goal {
    /// Maximize `min_i N_i * f(p_i)`.
    MaxLoad,
    /// Minimize `sum_i N_i * p_i` subject to a throughput floor.
    MinResource { floor: f64 },
}

struct State {
    counts: Vec<u32>,
    shares: Vec<u32>,
}

impl State {
    fn shares_f64(&self) -> Vec<f64> {
        self.shares.iter().map(|&p| p as f64).collect()
    }
}

fn score(ctx: &AllocContext, goal: Goal, state: &State) -> f64 {
    let shares = state.shares_f64();
    match goal {
        Goal::MaxLoad => ctx.min_throughput(&state.counts, &shares),
        // Annealing maximizes; negate the usage so lower usage scores higher.
        Goal::MinResource { .. } => {
            -(state
                .counts
                .iter()
                .zip(&state.shares)
                .map(|(&n, &p)| n as f64 * p as f64)
                .sum::<f64>())
        }
    }
}

fn is_feasible(ctx: &AllocContext, goal: Goal, state: &State, gpu_count: u32) -> bool {
    let a = Allocation {
        instance_counts: state.counts.clone(),
        shares: state.shares_f64(),
        gpu_count,
        objective: 0.0,
    };
    let floor = match goal {
        Goal::MaxLoad => None,
        Goal::MinResource { floor } => Some(floor),
    };
    ctx.check_with_floor(&a, floor).feasible
}

struct RunOutcome {
    best: Option<State>,
    best_score: f64,
    /// Best-so-far objective after every accepted improvement.
    #[allow(dead_code)]
    trace: Vec<f64>,
    /// Constraint violation counts seen while searching for a start state.
    violation_counts: Vec<(Constraint, u32)>,
}

/// One annealing run from a given start state (if any was found).
fn run_annealing(
    ctx: &AllocContext,
    goal: Goal,
    gpu_count: u32,
    params: &SaParams,
    restart: u32,
) -> RunOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(
        params
            .seed
            .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let mut violation_counts: Vec<(Constraint, u32)> = Vec::new();
    let Some(mut state) = find_start_state(ctx, goal, gpu_count, restart, &mut rng, &mut violation_counts)
    else {
        return RunOutcome {
            best: None,
            best_score: f64::NEG_INFINITY,
            trace: Vec::new(),
            violation_counts,
        };
    };

    let n = ctx.n_stages();
    let cap = ctx.instance_cap();
    let min_share = ctx.min_share;
    let mut current = score(ctx, goal, &state);
    let mut best = State {
        counts: state.counts.clone(),
        shares: state.shares.clone(),
    };
    let mut best_score = current;
    let mut trace = vec![best_score];
    let mut temperature = params.initial_temperature;

    for _ in 0..params.iterations {
        let slot = rng.random_range(0..2 * n);
        let (old_count, old_share);
        if slot < n {
            let delta = rng.random_range(1..=params.move_instance_step) as i64;
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            old_count = state.counts[slot];
            old_share = 0;
            let moved = (old_count as i64 + sign * delta).clamp(1, cap as i64) as u32;
            if moved == old_count {
                temperature *= params.cooling_rate;
                continue;
            }
            state.counts[slot] = moved;
        } else {
            let stage = slot - n;
            let delta = rng.random_range(1..=params.move_share_step) as i64;
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            old_share = state.shares[stage];
            old_count = 0;
            let moved =
                (old_share as i64 + sign * delta).clamp(min_share as i64, 100) as u32;
            if moved == old_share {
                temperature *= params.cooling_rate;
                continue;
            }
            state.shares[stage] = moved;
        }

        let revert = |state: &mut State| {
            if slot < n {
                state.counts[slot] = old_count;
            } else {
                state.shares[slot - n] = old_share;
            }
        };

        if !is_feasible(ctx, goal, &state, gpu_count) {
            revert(&mut state);
            temperature *= params.cooling_rate;
            continue;
        }
        let candidate = score(ctx, goal, &state);
        let delta = candidate - current;
        let scale = best_score.abs().max(1e-9);
        let accept = delta >= 0.0
            || rng.random_bool((delta / (temperature.max(1e-12) * scale)).exp().clamp(0.0, 1.0));
        if accept {
            current = candidate;
            if candidate > best_score {
                best_score = candidate;
                best.counts.clone_from(&state.counts);
                best.shares.clone_from(&state.shares);
                trace.push(best_score);
            }
        } else {
            revert(&mut state);
        }
        temperature *= params.cooling_rate;
    }

    RunOutcome {
        best: Some(best),
        best_score,
        trace,
        violation_counts,
    }
}

/// Finds a feasible start. Restart 0 tries the even-allocation point snapped
/// to the share grid, later restarts go straight to seeded random sampling.
fn find_start_state(
    ctx: &AllocContext,
    goal: Goal,
    gpu_count: u32,
    restart: u32,
    rng: &mut ChaCha8Rng,
    violation_counts: &mut Vec<(Constraint, u32)>,
) -> Option<State> {
    let n = ctx.n_stages();
    let cap = ctx.instance_cap();
    let min_share = ctx.min_share;
    let mut record = |state: &State| {
        let a = Allocation {
            instance_counts: state.counts.clone(),
            shares: state.shares_f64(),
            gpu_count,
            objective: 0.0,
        };
        let floor = match goal {
            Goal::MaxLoad => None,
            Goal::MinResource { floor } => Some(floor),
        };
        let report = ctx.check_with_floor(&a, floor);
        for v in &report.violations {
            match violation_counts.iter_mut().find(|(c, _)| *c == v.constraint) {
                Some((_, k)) => *k += 1,
                None => violation_counts.push((v.constraint, 1)),
            }
        }
        report.feasible
    };

    if restart == 0 {
        // Deterministic candidates: even splits of the whole budget over
        // 1..=4 instances per stage.
        for k in 1..=4u32 {
            let budget = gpu_count as f64 * 100.0 / n as f64;
            let share = (budget / k as f64).floor().clamp(0.0, 100.0) as u32;
            if share < min_share {
                continue;
            }
            let state = State {
                counts: vec![k.min(cap); n],
                shares: vec![share; n],
            };
            if record(&state) {
                return Some(state);
            }
        }
    }

    let max_count = (gpu_count as u64 * cap as u64 / n as u64).clamp(1, 8) as u32;
    for _ in 0..300 {
        let state = State {
            counts: (0..n).map(|_| rng.random_range(1..=max_count)).collect(),
            shares: (0..n)
                .map(|_| rng.random_range(min_share..=100))
                .collect(),
        };
        if record(&state) {
            return Some(state);
        }
    }
    None
}

fn dominant_violation(counts: Vec<Vec<(Constraint, u32)>>) -> Constraint {
    let mut total: Vec<(Constraint, u32)> = Vec::new();
    for per_run in counts {
        for (c, k) in per_run {
            match total.iter_mut().find(|(tc, _)| *tc == c) {
                Some((_, tk)) => *tk += k,
                None => total.push((c, k)),
            }
        }
    }
    total.sort_by_key(|&(c, k)| (std::cmp::Reverse(k), c));
    total.first().map(|&(c, _)| c).unwrap_or(Constraint::QosBudget)
}

fn solve(
    ctx: &AllocContext,
    goal: Goal,
    gpu_count: u32,
    params: &SaParams,
) -> Result<Allocation, SolveError> {
    params.validate()?;
    let outcomes: Vec<RunOutcome> = (0..params.restarts)
        .into_par_iter()
        .map(|restart| run_annealing(ctx, goal, gpu_count, params, restart))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if o.best.is_none() {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, s)) => o.best_score > s,
        };
        if better {
            best = Some((i, o.best_score));
        }
    }
    match best {
        Some((idx, s)) => {
            let state = outcomes[idx].best.as_ref().unwrap();
            let objective = match goal {
                Goal::MaxLoad => s,
                Goal::MinResource { .. } => -s,
            };
            Ok(Allocation {
                instance_counts: state.counts.clone(),
                shares: state.shares_f64(),
                gpu_count,
                objective,
            })
        }
        None => Err(SolveError::Infeasible(dominant_violation(
            outcomes.into_iter().map(|o| o.violation_counts).collect(),
        ))),
    }
}

/// Solves the max-load problem: find instance counts and shares maximizing
/// the smallest per-stage throughput under the cluster budgets.
pub fn solve_max_load(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    params: &SaParams,
    cfg: &FeasibilityConfig,
) -> Result<Allocation, SolveError> {
    let ctx = AllocContext::new(pipeline, gpus, models, batch, cfg.clone())?;
    solve(&ctx, Goal::MaxLoad, gpus.len() as u32, params)
}

/// Solves the min-resource problem at the default throughput headroom.
pub fn solve_min_resource(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    params: &SaParams,
    cfg: &FeasibilityConfig,
    offered_load_qps: f64,
) -> Result<Allocation, SolveError> {
    solve_min_resource_with_headroom(
        pipeline,
        gpus,
        models,
        batch,
        params,
        cfg,
        offered_load_qps,
        DEFAULT_THROUGHPUT_HEADROOM,
    )
}

/// Min-resource: fixes the GPU count at the work/footprint lower bound, then
/// minimizes total allocated share subject to the same constraints plus a
/// throughput floor of `offered_load_qps * headroom`. Retries once with one
/// extra GPU when the lower bound is infeasible.
#[allow(clippy::too_many_arguments)]
pub fn solve_min_resource_with_headroom(
    pipeline: &PipelineSpec,
    gpus: &[GpuSpec],
    models: &[PerfModel],
    batch: u32,
    params: &SaParams,
    cfg: &FeasibilityConfig,
    offered_load_qps: f64,
    headroom: f64,
) -> Result<Allocation, SolveError> {
    if !(offered_load_qps > 0.0) {
        return Err(SolveError::InvalidArgument(
            "offered load must be positive".into(),
        ));
    }
    let y = min_gpu_count(pipeline, models, batch, &gpus[0]);
    if y as usize > gpus.len() {
        return Err(SolveError::InvalidArgument(format!(
            "need at least {y} GPUs, cluster has {}",
            gpus.len()
        )));
    }
    let floor = offered_load_qps * headroom;
    let ctx = AllocContext::new(pipeline, gpus, models, batch, cfg.clone())?;
    match solve(&ctx, Goal::MinResource { floor }, y, params) {
        Ok(a) => Ok(a),
        Err(SolveError::Infeasible(_)) if (y as usize) < gpus.len() => {
            solve(&ctx, Goal::MinResource { floor }, y + 1, params)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::train_models;
    use super::*;
    use crate::comm::CommConfig;
    use crate::workload::{make_artifact_pipeline, MicroserviceSpec};

    fn quick_params(seed: u64) -> SaParams {
        SaParams {
            iterations: 1200,
            restarts: 24,
            seed,
            ..SaParams::default()
        }
    }

    fn setup() -> (PipelineSpec, Vec<GpuSpec>, Vec<PerfModel>) {
        let pipeline = make_artifact_pipeline(2, 2, 2).unwrap();
        let gpus = vec![GpuSpec::preset_consumer()];
        let models = train_models(&pipeline, &gpus[0]);
        (pipeline, gpus, models)
    }

    #[test]
    fn seed_determinism() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let a = solve_max_load(&pipeline, &gpus, &models, 32, &quick_params(9), &cfg).unwrap();
        let b = solve_max_load(&pipeline, &gpus, &models, 32, &quick_params(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn solution_is_feasible_and_beats_even_allocation() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let a = solve_max_load(&pipeline, &gpus, &models, 32, &quick_params(5), &cfg).unwrap();
        let report =
            super::super::feasible(&a, &pipeline, &gpus, &models, 32, &cfg).unwrap();
        assert!(report.feasible, "{:?}", report.violations);
        let ea = super::super::even_allocation_baseline(&pipeline, &gpus, &models, 32).unwrap();
        assert!(
            a.objective >= ea.objective,
            "SA {} worse than EA {}",
            a.objective,
            ea.objective
        );
    }

    #[test]
    fn symmetric_two_stage_splits_evenly() {
        // Two identical stages, one instance each possible: optimum is an
        // even share split, so SA must land within a few grid steps of it.
        let (pipeline, gpus, models) = setup();
        let two = PipelineSpec {
            stages: vec![pipeline.stages[1].clone(), {
                let mut s = pipeline.stages[1].clone();
                s.stage_id = 1;
                s
            }],
            ..pipeline.clone()
        };
        let two_models = vec![models[1].clone(), models[1].clone()];
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let a = solve_max_load(&two, &gpus, &two_models, 32, &quick_params(3), &cfg).unwrap();
        let spread = (a.total_share_usage() - 100.0).abs();
        assert!(spread <= 2.0, "budget left unused: {a:?}");
    }

    #[test]
    fn best_so_far_trace_is_nondecreasing() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let ctx = AllocContext::new(&pipeline, &gpus, &models, 32, cfg).unwrap();
        let outcome = run_annealing(&ctx, Goal::MaxLoad, 1, &quick_params(1), 0);
        assert!(outcome.best.is_some());
        for w in outcome.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn infeasible_pipeline_reports_dominant_constraint() {
        let (pipeline, gpus, models) = setup();
        let mut tight = pipeline.clone();
        tight.qos_target_ms = 1e-6;
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let err = solve_max_load(&tight, &gpus, &models, 32, &quick_params(2), &cfg).unwrap_err();
        assert_eq!(err, SolveError::Infeasible(Constraint::QosBudget));
    }

    #[test]
    fn min_resource_usage_below_max_load_usage() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let max = solve_max_load(&pipeline, &gpus, &models, 32, &quick_params(7), &cfg).unwrap();
        let low = solve_min_resource(
            &pipeline,
            &gpus,
            &models,
            32,
            &quick_params(7),
            &cfg,
            max.objective * 0.3,
        )
        .unwrap();
        assert!(
            low.total_share_usage() < max.total_share_usage(),
            "low {} vs max {}",
            low.total_share_usage(),
            max.total_share_usage()
        );
        // The solved allocation must actually deliver the floor.
        let ctx = AllocContext::new(
            &pipeline,
            &gpus,
            &models,
            32,
            FeasibilityConfig::standard(CommConfig::default()),
        )
        .unwrap();
        let got = ctx.min_throughput(&low.instance_counts, &low.shares);
        assert!(got >= max.objective * 0.3);
    }

    #[test]
    fn halving_load_never_increases_usage() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let max = solve_max_load(&pipeline, &gpus, &models, 32, &quick_params(7), &cfg).unwrap();
        let hi = solve_min_resource(
            &pipeline, &gpus, &models, 32, &quick_params(7), &cfg,
            max.objective * 0.4,
        )
        .unwrap();
        let lo = solve_min_resource(
            &pipeline, &gpus, &models, 32, &quick_params(7), &cfg,
            max.objective * 0.2,
        )
        .unwrap();
        assert!(lo.total_share_usage() <= hi.total_share_usage() + 1e-9);
    }

    #[test]
    fn vanishing_load_drives_shares_to_grid_minimum() {
        let (pipeline, gpus, models) = setup();
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        // Relax QoS so the smallest trained share is feasible per stage.
        let mut relaxed = pipeline.clone();
        relaxed.qos_target_ms = 10_000.0;
        let low = solve_min_resource(&relaxed, &gpus, &models, 32, &quick_params(4), &cfg, 1e-3)
            .unwrap();
        assert_eq!(low.instance_counts, vec![1, 1, 1]);
        for &p in &low.shares {
            assert_eq!(p, 10.0, "share should hit the trained grid minimum");
        }
    }

    #[test]
    fn pinned_stage_changes_comm_estimate() {
        let (pipeline, gpus, models) = setup();
        let mut pinned = pipeline.clone();
        pinned.stages[0].pinned_memory = true;
        // Force the main-memory estimate by making co-residency impossible.
        let mut small_gpu = gpus[0].clone();
        small_gpu.mem_capacity = models
            .iter()
            .map(|m| m.predict_footprint(32))
            .fold(0.0, f64::max)
            + 1.0;
        let small = vec![small_gpu];
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let ctx_plain = AllocContext::new(&pipeline, &small, &models, 32, cfg.clone()).unwrap();
        let ctx_pinned = AllocContext::new(&pinned, &small, &models, 32, cfg).unwrap();
        let counts = vec![1, 1, 1];
        assert!(ctx_pinned.comm_estimate_ms(&counts) < ctx_plain.comm_estimate_ms(&counts));
    }

    #[test]
    fn strict_paper_mode_drops_comm_from_qos() {
        let (pipeline, gpus, models) = setup();
        let strict = FeasibilityConfig::strict_paper(CommConfig::default());
        let ctx = AllocContext::new(&pipeline, &gpus, &models, 32, strict).unwrap();
        assert_eq!(ctx.comm_estimate_ms(&[1, 1, 1]), 0.0);
    }

    // Keep a tiny two-stage instance with hand-checkable optimum: f1(p)=p,
    // f2(p)=2p, budget 100, one instance each. The grid optimum of
    // min(p1, 2*p2) under p1+p2<=100 sits at p1=66..67, p2=33..34.
    #[test]
    fn known_optimum_reached_on_synthetic_models() {
        use crate::predictor::ProfileSample;
        let mk_samples = |factor: f64| -> Vec<ProfileSample> {
            let mut out = Vec::new();
            for b in (4..=64).step_by(4) {
                for p in 1..=100u32 {
                    let thr = factor * p as f64;
                    let dur = b as f64 / thr * 1000.0;
                    out.push(ProfileSample {
                        batch: b,
                        share: p as f64,
                        duration_ms: dur,
                        bandwidth_mbps: 1.0,
                        throughput_qps: thr,
                        flops_gflops: b as f64 * 0.001,
                        footprint_mb: 100.0,
                    });
                }
            }
            out
        };
        let m1 = crate::predictor::train(0, &mk_samples(1.0), 1).unwrap().0;
        let m2 = crate::predictor::train(1, &mk_samples(2.0), 1).unwrap().0;
        let stage = |id| MicroserviceSpec {
            stage_id: id,
            compute_coeff: 0.001,
            mem_traffic_coeff: 0.0,
            payload_out: 0.0,
            model_footprint: 100.0,
            footprint_per_item: 0.0,
            scaling_exponent: 1.0,
            pinned_memory: false,
        };
        let pipeline = PipelineSpec {
            stages: vec![stage(0), stage(1)],
            qos_target_ms: 1e9,
            batch_size: 32,
        };
        let gpus = vec![GpuSpec::preset_consumer()];
        let cfg = FeasibilityConfig::standard(CommConfig::default());
        let params = SaParams {
            iterations: 3000,
            restarts: 32,
            seed: 11,
            ..SaParams::default()
        };
        let a = solve_max_load(&pipeline, &gpus, &[m1, m2], 32, &params, &cfg).unwrap();
        assert_eq!(a.instance_counts, vec![1, 1]);
        // Optimum min-throughput is ~66.7; the trained trees quantize the
        // share axis so allow a small gap.
        assert!(a.objective >= 0.95 * 66.0, "objective {}", a.objective);
    }
}
