//! Least-squares linear models: one-feature fits for the exactly-linear
//! targets (work and footprint vs batch) and a two-feature baseline used to
//! compare tree predictors against plain linear regression.

use serde::{Deserialize, Serialize};

/// `y = slope * x + intercept`, with both coefficients clamped to be
/// nonnegative (the modeled quantities are work and memory, never negative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearModel {
    pub fn fit(xs: &[f64], ys: &[f64]) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty());
        let n = xs.len() as f64;
        let x_mean = xs.iter().sum::<f64>() / n;
        let y_mean = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            cov += (x - x_mean) * (y - y_mean);
            var += (x - x_mean) * (x - x_mean);
        }
        let slope = if var > 0.0 { cov / var } else { 0.0 };
        let intercept = y_mean - slope * x_mean;
        LinearModel {
            slope: slope.max(0.0),
            intercept: intercept.max(0.0),
        }
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// `y = w0 + w1 * batch + w2 * share`, fit by normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
}

impl LinearBaseline {
    pub fn fit(xs: &[[f64; 2]], ys: &[f64]) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty());
        // Normal equations A^T A w = A^T y with A = [1, batch, share].
        let mut ata = [[0.0f64; 3]; 3];
        let mut aty = [0.0f64; 3];
        for (x, &y) in xs.iter().zip(ys) {
            let row = [1.0, x[0], x[1]];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                aty[i] += row[i] * y;
            }
        }
        let w = solve3(ata, aty);
        LinearBaseline {
            w0: w[0],
            w1: w[1],
            w2: w[2],
        }
    }

    pub fn predict(&self, x: [f64; 2]) -> f64 {
        self.w0 + self.w1 * x[0] + self.w2 * x[1]
    }
}

/// Gaussian elimination with partial pivoting on a 3x3 system. Degenerate
/// systems (collinear features) fall back to a zero solution for the pivots
/// that vanish.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        if a[col][col].abs() < 1e-12 {
            continue;
        }
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..3).rev() {
        if a[col][col].abs() < 1e-12 {
            x[col] = 0.0;
            continue;
        }
        let mut s = b[col];
        for k in (col + 1)..3 {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_data_recovered() {
        let xs: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.25 * x + 7.5).collect();
        let m = LinearModel::fit(&xs, &ys);
        assert!((m.slope - 3.25).abs() < 1e-9);
        assert!((m.intercept - 7.5).abs() < 1e-9);
    }

    #[test]
    fn zero_intercept_not_driven_negative() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let m = LinearModel::fit(&xs, &ys);
        assert!(m.intercept >= 0.0);
        assert!((m.slope - 2.0).abs() < 1e-9);
    }

    #[test]
    fn baseline_recovers_plane() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for b in 1..=10 {
            for s in 1..=10 {
                xs.push([b as f64, s as f64 * 10.0]);
                ys.push(4.0 + 0.5 * b as f64 - 0.02 * s as f64 * 10.0);
            }
        }
        let m = LinearBaseline::fit(&xs, &ys);
        assert!((m.w0 - 4.0).abs() < 1e-9);
        assert!((m.w1 - 0.5).abs() < 1e-9);
        assert!((m.w2 + 0.02).abs() < 1e-9);
    }
}
