//! Open-loop arrival traces.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrivalProcess {
    /// Exponentially distributed inter-arrival gaps.
    Poisson,
    /// Constant inter-arrival gap `1/rate`.
    FixedInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub process: ArrivalProcess,
    pub rate_qps: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Hard cap on generated arrivals to bound overload probes.
    pub max_queries: usize,
}

impl WorkloadTrace {
    pub fn poisson(rate_qps: f64, duration_s: f64, seed: u64) -> Self {
        WorkloadTrace {
            process: ArrivalProcess::Poisson,
            rate_qps,
            duration_s,
            seed,
            max_queries: 200_000,
        }
    }

    pub fn fixed(rate_qps: f64, duration_s: f64, seed: u64) -> Self {
        WorkloadTrace {
            process: ArrivalProcess::FixedInterval,
            rate_qps,
            duration_s,
            seed,
            max_queries: 200_000,
        }
    }

    /// Arrival timestamps in ms, deterministic for a given seed.
    pub fn arrivals_ms(&self) -> Vec<f64> {
        assert!(self.rate_qps > 0.0, "trace rate must be positive");
        let horizon_ms = self.duration_s * 1000.0;
        let gap_ms = 1000.0 / self.rate_qps;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        let mut t = 0.0;
        while out.len() < self.max_queries {
            let gap = match self.process {
                ArrivalProcess::FixedInterval => gap_ms,
                ArrivalProcess::Poisson => {
                    let u: f64 = rng.random();
                    -(1.0 - u).ln() * gap_ms
                }
            };
            t += gap;
            if t > horizon_ms {
                break;
            }
            out.push(t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = WorkloadTrace::poisson(100.0, 10.0, 7).arrivals_ms();
        let b = WorkloadTrace::poisson(100.0, 10.0, 7).arrivals_ms();
        assert_eq!(a, b);
        let c = WorkloadTrace::poisson(100.0, 10.0, 8).arrivals_ms();
        assert_ne!(a, c);
    }

    #[test]
    fn rate_roughly_honored() {
        let arrivals = WorkloadTrace::poisson(200.0, 30.0, 3).arrivals_ms();
        let rate = arrivals.len() as f64 / 30.0;
        assert!((rate - 200.0).abs() < 20.0, "empirical rate {rate}");
    }

    #[test]
    fn fixed_interval_exact() {
        let arrivals = WorkloadTrace::fixed(10.0, 1.0, 0).arrivals_ms();
        assert_eq!(arrivals.len(), 10);
        assert!((arrivals[1] - arrivals[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn query_cap_respected() {
        let mut trace = WorkloadTrace::poisson(10_000.0, 100.0, 1);
        trace.max_queries = 500;
        assert_eq!(trace.arrivals_ms().len(), 500);
    }
}
