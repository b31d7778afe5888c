//! Exact weighted check-loss minimization through its linear program,
//! solved with a dense tableau simplex. Meant for small cross-check instances.

use crate::error::{Error, Result};

/// Minimizes `Σ w_i ρ_τ(y_i − a_iᵀβ)` exactly.
///
/// Formulation: `min Σ w_i (τ u_i + (1 − τ) v_i)` subject to
/// `A (β⁺ − β⁻) + u − v = y` with all variables nonnegative. Bland's rule
/// keeps the simplex from cycling.
pub fn solve_exact_lp(weights: &[f64], y: &[f64], design: &[f64], m: usize, tau: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if design.len() != n * m || weights.len() != n {
        return Err(Error::LinearProgram("dimension mismatch".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::LinearProgram("weights must be nonnegative".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::LinearProgram(format!("tau {tau} outside (0, 1)")));
    }
    let cols = 2 * m + 2 * n;
    let width = cols + 1;
    let mut tab = vec![0.0; n * width];
    let mut cost = vec![0.0; cols];
    let mut basis = vec![0usize; n];
    for i in 0..n {
        let sign = if y[i] < 0.0 { -1.0 } else { 1.0 };
        let row = &mut tab[i * width..(i + 1) * width];
        for k in 0..m {
            row[k] = sign * design[i * m + k];
            row[m + k] = -sign * design[i * m + k];
        }
        row[2 * m + i] = sign;
        row[2 * m + n + i] = -sign;
        row[cols] = sign * y[i];
        cost[2 * m + i] = weights[i] * tau;
        cost[2 * m + n + i] = weights[i] * (1.0 - tau);
        basis[i] = if sign > 0.0 { 2 * m + i } else { 2 * m + n + i };
    }
    let eps = 1e-11;
    let max_iter = 50 * (n + cols);
    for _ in 0..max_iter {
        // reduced costs c_j − c_Bᵀ column_j
        let entering = (0..cols).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let z: f64 = (0..n).map(|i| cost[basis[i]] * tab[i * width + j]).sum();
            cost[j] - z < -eps
        });
        let Some(j) = entering else {
            let mut beta = vec![0.0; m];
            for (i, &b) in basis.iter().enumerate() {
                let val = tab[i * width + cols];
                if b < m {
                    beta[b] += val;
                } else if b < 2 * m {
                    beta[b - m] -= val;
                }
            }
            return Ok(beta);
        };
        // ratio test, ties broken by smallest basic variable index
        let mut leave: Option<(f64, usize)> = None;
        for i in 0..n {
            let a = tab[i * width + j];
            if a > eps {
                let ratio = tab[i * width + cols] / a;
                let better = match leave {
                    None => true,
                    Some((best, li)) => {
                        ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[i] < basis[li])
                    }
                };
                if better {
                    leave = Some((ratio, i));
                }
            }
        }
        let Some((_, r)) = leave else {
            return Err(Error::LinearProgram("unbounded".into()));
        };
        let piv = tab[r * width + j];
        for c in 0..width {
            tab[r * width + c] /= piv;
        }
        for i in 0..n {
            if i == r {
                continue;
            }
            let f = tab[i * width + j];
            if f != 0.0 {
                for c in 0..width {
                    tab[i * width + c] -= f * tab[r * width + c];
                }
            }
        }
        basis[r] = j;
    }
    Err(Error::LinearProgram("simplex iteration limit reached".into()))
}
