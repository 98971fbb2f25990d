//! L1-penalized least squares by cyclic coordinate descent, solved along a
//! geometric penalty path with warm starts.
//!
//! The objective at penalty `lambda` is
//! `(1 / 2n) * ||y - mean(y) - Z b||^2 + lambda * ||b||_1`
//! where `Z` holds column vectors (usually z-scored features).

/// Path and solver settings.
#[derive(Debug, Clone, Copy)]
pub struct PathConfig {
    pub n_lambdas: usize,
    /// Last penalty as a fraction of `lambda_max`.
    pub min_ratio: f64,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            n_lambdas: 100,
            min_ratio: 1e-3,
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoPath {
    pub lambda_max: f64,
    pub lambdas: Vec<f64>,
    /// `coefs[i][j]`: coefficient of column `j` at `lambdas[i]`.
    pub coefs: Vec<Vec<f64>>,
    /// Sweeps used at each path point.
    pub sweeps: Vec<usize>,
}

impl LassoPath {
    /// Index of the first path point where each column is nonzero.
    pub fn entry_points(&self) -> Vec<Option<usize>> {
        let d = self.coefs.first().map_or(0, Vec::len);
        (0..d)
            .map(|j| self.coefs.iter().position(|b| b[j] != 0.0))
            .collect()
    }
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Column means and population standard deviations.
pub fn column_stats(columns: &[Vec<f64>]) -> Vec<(f64, f64)> {
    columns
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Z-scores each column. Columns with zero spread become all zeros.
pub fn standardize(columns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    column_stats(columns)
        .into_iter()
        .zip(columns)
        .map(|((mean, sd), c)| {
            if sd > 0.0 {
                c.iter().map(|x| (x - mean) / sd).collect()
            } else {
                vec![0.0; c.len()]
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(y: &[f64]) -> Vec<f64> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| v - mean).collect()
}

/// Smallest penalty at which the all-zero model is optimal.
pub fn lambda_max(z: &[Vec<f64>], y: &[f64]) -> f64 {
    let yc = centered(y);
    let n = y.len() as f64;
    z.iter()
        .map(|col| (dot(col, &yc) / n).abs())
        .fold(0.0, f64::max)
}

/// Coordinate descent at a single penalty, starting from (and updating) `beta`.
/// `residual` must equal `yc - Z beta` on entry and is kept in sync. Returns
/// the number of sweeps.
fn solve_at(
    z: &[Vec<f64>],
    col_sq: &[f64],
    residual: &mut [f64],
    beta: &mut [f64],
    lambda: f64,
    cfg: &PathConfig,
) -> usize {
    let n = residual.len() as f64;
    for sweep in 1..=cfg.max_sweeps {
        let mut max_delta: f64 = 0.0;
        for (j, col) in z.iter().enumerate() {
            let c = col_sq[j];
            if c == 0.0 {
                continue;
            }
            let rho = dot(col, residual) / n + c * beta[j];
            let updated = soft_threshold(rho, lambda) / c;
            let delta = updated - beta[j];
            if delta != 0.0 {
                for (r, x) in residual.iter_mut().zip(col) {
                    *r -= delta * x;
                }
                beta[j] = updated;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < cfg.tol {
            return sweep;
        }
    }
    cfg.max_sweeps
}

/// Solves the problem at one penalty from a zero start.
pub fn lasso_fit(z: &[Vec<f64>], y: &[f64], lambda: f64, cfg: &PathConfig) -> Vec<f64> {
    let n = y.len() as f64;
    let col_sq: Vec<f64> = z.iter().map(|c| dot(c, c) / n).collect();
    let mut residual = centered(y);
    let mut beta = vec![0.0; z.len()];
    solve_at(z, &col_sq, &mut residual, &mut beta, lambda, cfg);
    beta
}

/// Solves along `n_lambdas` geometrically spaced penalties from `lambda_max`
/// down to `lambda_max * min_ratio`.
pub fn lasso_path(z: &[Vec<f64>], y: &[f64], cfg: &PathConfig) -> LassoPath {
    let n = y.len() as f64;
    let lmax = lambda_max(z, y);
    let lambdas: Vec<f64> = if cfg.n_lambdas <= 1 {
        vec![lmax]
    } else {
        let step = cfg.min_ratio.ln() / (cfg.n_lambdas - 1) as f64;
        (0..cfg.n_lambdas)
            .map(|i| lmax * (step * i as f64).exp())
            .collect()
    };
    let col_sq: Vec<f64> = z.iter().map(|c| dot(c, c) / n).collect();
    let mut residual = centered(y);
    let mut beta = vec![0.0; z.len()];
    let mut coefs = Vec::with_capacity(lambdas.len());
    let mut sweeps = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        sweeps.push(solve_at(z, &col_sq, &mut residual, &mut beta, lambda, cfg));
        coefs.push(beta.clone());
    }
    LassoPath {
        lambda_max: lmax,
        lambdas,
        coefs,
        sweeps,
    }
}

/// Largest violation of the optimality conditions at `beta`:
/// active coordinates need `<z_j, r>/n = lambda * sign(b_j)`, inactive ones
/// need `|<z_j, r>/n| <= lambda`.
pub fn kkt_violation(z: &[Vec<f64>], y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = y.len() as f64;
    let mut residual = centered(y);
    for (col, b) in z.iter().zip(beta) {
        if *b != 0.0 {
            for (r, x) in residual.iter_mut().zip(col) {
                *r -= b * x;
            }
        }
    }
    z.iter()
        .zip(beta)
        .map(|(col, &b)| {
            let g = dot(col, &residual) / n;
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}
