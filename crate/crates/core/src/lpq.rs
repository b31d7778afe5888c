//! Kernel-weighted local polynomial quantile fits.
//!
//! The solver runs iteratively reweighted least squares on a smoothed check
//! loss to get close to the optimum, then moves to an exact vertex of the
//! piecewise-linear objective and finishes with simplex-style edge descent.

use serde::{Deserialize, Serialize};

use crate::basis::MultiIndexBasis;
use crate::domain::{Dataset, QuantileLevel};
use crate::error::{Error, Result};
use crate::kernels::SphericalKernel;
use crate::numerics::{invert, lu_solve, median, pairwise_sum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Initial smoothing width relative to the response scale.
    pub smoothing_start: f64,
    /// Factor applied to the smoothing width after each outer pass.
    pub smoothing_shrink: f64,
    /// Cap on outer passes, also scales the vertex-descent iteration cap.
    pub max_outer: usize,
    /// Relative coefficient change that ends an inner pass.
    pub inner_tol: f64,
    /// Ridge added to the normal equations, relative to their trace.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            smoothing_start: 1.0,
            smoothing_shrink: 0.2,
            max_outer: 200,
            inner_tol: 1e-6,
            ridge: 1e-10,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<()> {
        let positive = [self.smoothing_start, self.inner_tol, self.ridge]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.max_outer == 0 {
            return Err(Error::invalid("solver options must all be positive"));
        }
        if !(self.smoothing_shrink > 0.0 && self.smoothing_shrink < 1.0) {
            return Err(Error::invalid("smoothing_shrink must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Check loss `y (τ − 𝕀(y < 0))`.
#[inline]
pub fn pinball(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        r * (tau - 1.0)
    } else {
        r * tau
    }
}

/// Weighted check-loss objective of `beta` on a row-major design.
pub fn objective(weights: &[f64], y: &[f64], design: &[f64], beta: &[f64], tau: f64) -> f64 {
    let m = beta.len();
    let terms: Vec<f64> = (0..y.len())
        .map(|i| {
            let fit: f64 = design[i * m..(i + 1) * m].iter().zip(beta).map(|(a, b)| a * b).sum();
            weights[i] * pinball(y[i] - fit, tau)
        })
        .collect();
    pairwise_sum(&terms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFit {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Minimizes `Σ w_i ρ_τ(y_i − a_iᵀβ)` over `β` for a row-major design with
/// `m` columns. Rows with zero weight are ignored.
pub fn solve_weighted(
    weights: &[f64],
    y: &[f64],
    design: &[f64],
    m: usize,
    tau: f64,
    opts: &SolverOptions,
) -> Result<WeightedFit> {
    let active: Vec<usize> = (0..y.len()).filter(|&i| weights[i] > 0.0).collect();
    if active.len() < m {
        return Err(Error::DegenerateFit {
            point: Vec::new(),
            reason: format!("{} weighted points for {m} coefficients", active.len()),
        });
    }
    let w: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
    let mut a = Vec::with_capacity(active.len() * m);
    for &i in &active {
        a.extend_from_slice(&design[i * m..(i + 1) * m]);
    }
    // with an intercept column, center the responses so constant data fit exactly
    let has_intercept = m > 0 && active.iter().all(|&i| design[i * m] == 1.0);
    let yy: Vec<f64> = active.iter().map(|&i| y[i]).collect();
    let shift = if has_intercept { median(&yy) } else { 0.0 };
    let yc: Vec<f64> = yy.iter().map(|v| v - shift).collect();
    let start = irls(&w, &yc, &a, m, tau, opts);
    let (mut beta, iterations) = vertex_descent(&w, &yc, &a, m, tau, &start, opts)?;
    if has_intercept {
        beta[0] += shift;
    }
    let objective = objective(&w, &yy, &a, &beta, tau);
    Ok(WeightedFit {
        beta,
        objective,
        iterations,
    })
}

fn residuals(y: &[f64], a: &[f64], m: usize, beta: &[f64], out: &mut [f64]) {
    for (i, r) in out.iter_mut().enumerate() {
        let fit: f64 = a[i * m..(i + 1) * m].iter().zip(beta).map(|(x, b)| x * b).sum();
        *r = y[i] - fit;
    }
}

/// Majorize-minimize on the check loss with a floor `γ` on `|r|`, shrinking
/// `γ` geometrically. Returns the last iterate; failures fall back to the
/// weighted-median intercept.
fn irls(w: &[f64], y: &[f64], a: &[f64], m: usize, tau: f64, opts: &SolverOptions) -> Vec<f64> {
    let n = y.len();
    let med = median(y);
    let abs_dev: Vec<f64> = y.iter().map(|v| (v - med).abs()).collect();
    let mut scale = median(&abs_dev);
    if !(scale > 0.0) {
        scale = y.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1.0);
    }
    let mut beta = vec![0.0; m];
    beta[0] = med;
    let mut gamma = opts.smoothing_start * scale;
    let floor = 1e-9 * scale;
    let mut r = vec![0.0; n];
    let mut xtx = vec![0.0; m * m];
    let mut xty = vec![0.0; m];
    for _outer in 0..opts.max_outer {
        for _inner in 0..50 {
            residuals(y, a, m, &beta, &mut r);
            xtx.iter_mut().for_each(|v| *v = 0.0);
            xty.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let row = &a[i * m..(i + 1) * m];
                let v = w[i] / (2.0 * r[i].abs().max(gamma));
                let rhs = v * y[i] + (tau - 0.5) * w[i];
                for j in 0..m {
                    xty[j] += rhs * row[j];
                    let vj = v * row[j];
                    for k in j..m {
                        xtx[j * m + k] += vj * row[k];
                    }
                }
            }
            let trace: f64 = (0..m).map(|j| xtx[j * m + j]).sum();
            for j in 0..m {
                xtx[j * m + j] += opts.ridge * trace.max(f64::MIN_POSITIVE);
                for k in 0..j {
                    xtx[j * m + k] = xtx[k * m + j];
                }
            }
            let Some(next) = lu_solve(&xtx, &xty, m, 1e-14) else {
                return beta;
            };
            if next.iter().any(|v| !v.is_finite()) {
                return beta;
            }
            let change = next
                .iter()
                .zip(&beta)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            let size = next.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
            beta = next;
            if change <= opts.inner_tol * (1.0 + size) {
                break;
            }
        }
        gamma *= opts.smoothing_shrink;
        if gamma < floor {
            break;
        }
    }
    beta
}

/// Picks `m` linearly independent rows, smallest `|residual|` first.
fn initial_basis(a: &[f64], m: usize, r: &[f64]) -> Option<Vec<usize>> {
    let n = r.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| r[i].abs().total_cmp(&r[j].abs()).then(i.cmp(&j)));
    let mut chosen = Vec::with_capacity(m);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &i in &order {
        let row = &a[i * m..(i + 1) * m];
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = row.iter().map(|x| x / norm0).collect();
        for q in &ortho {
            let dot: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
            chosen.push(i);
            if chosen.len() == m {
                return Some(chosen);
            }
        }
    }
    None
}

/// Edge descent over vertices `β = A_B⁻¹ y_B`. Each step frees one basic
/// residual in the direction of steepest objective decrease and moves to the
/// minimizing breakpoint along that edge.
fn vertex_descent(
    w: &[f64],
    y: &[f64],
    a: &[f64],
    m: usize,
    tau: f64,
    start: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, usize)> {
    let n = y.len();
    let mut r = vec![0.0; n];
    residuals(y, a, m, start, &mut r);
    let Some(mut basis) = initial_basis(a, m, &r) else {
        return Err(Error::DegenerateFit {
            point: Vec::new(),
            reason: "design matrix is rank deficient".into(),
        });
    };
    let max_iter = opts.max_outer.max(1) * (n + m);
    let mut in_basis = vec![false; n];
    for &b in &basis {
        in_basis[b] = true;
    }
    let mut beta = vec![0.0; m];
    let mut dirs = vec![0.0; n * m];
    let y_scale = y.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut last_objective = f64::INFINITY;
    let mut best_beta = start.to_vec();
    for iter in 0..max_iter {
        let mut ab = vec![0.0; m * m];
        let mut yb = vec![0.0; m];
        for (k, &b) in basis.iter().enumerate() {
            ab[k * m..(k + 1) * m].copy_from_slice(&a[b * m..(b + 1) * m]);
            yb[k] = y[b];
        }
        let inv = invert(&ab, m).ok_or_else(|| Error::DegenerateFit {
            point: Vec::new(),
            reason: "singular vertex basis".into(),
        })?;
        for j in 0..m {
            beta[j] = (0..m).map(|k| inv[j * m + k] * yb[k]).sum();
        }
        residuals(y, a, m, &beta, &mut r);
        for &b in &basis {
            r[b] = 0.0;
        }
        // dirs[i, k] = a_iᵀ (column k of A_B⁻¹): change in a_iᵀβ per unit
        // change of basic fit k.
        for i in 0..n {
            let row = &a[i * m..(i + 1) * m];
            for k in 0..m {
                dirs[i * m + k] = (0..m).map(|j| row[j] * inv[j * m + k]).sum();
            }
        }
        let zero_tol = 1e-12 * y_scale;
        let current = objective(w, y, a, &beta, tau);
        if current >= last_objective {
            // rounding-level cycling: keep the best vertex seen
            return Ok((best_beta, iter));
        }
        last_objective = current;
        best_beta.clone_from(&beta);
        // best edge: (slope, basic slot k, sign)
        let mut best: Option<(f64, usize, f64)> = None;
        let wscale = w.iter().cloned().fold(0.0, f64::max);
        for k in 0..m {
            for sign in [1.0, -1.0] {
                // moving β by t·sign·A_B⁻¹e_k: basic residual k becomes −t·sign
                let b = basis[k];
                let mut slope = if sign > 0.0 {
                    w[b] * (1.0 - tau)
                } else {
                    w[b] * tau
                };
                for i in 0..n {
                    if in_basis[i] {
                        continue;
                    }
                    let dr = -sign * dirs[i * m + k];
                    slope += w[i] * residual_slope(r[i], dr, tau, zero_tol);
                }
                if slope < -1e-12 * wscale && best.is_none_or(|(s, _, _)| slope < s) {
                    best = Some((slope, k, sign));
                }
            }
        }
        let Some((slope0, k, sign)) = best else {
            return Ok((beta, iter));
        };
        // breakpoints along the edge: t_i = r_i / (-dr_i) > 0
        let mut bps: Vec<(f64, usize, f64)> = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let dr = -sign * dirs[i * m + k];
            if dr == 0.0 || r[i].abs() <= zero_tol {
                continue;
            }
            let t = -r[i] / dr;
            if t > 0.0 {
                bps.push((t, i, w[i] * dr.abs()));
            }
        }
        bps.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut slope = slope0;
        let mut entering = None;
        for &(_, i, inc) in &bps {
            slope += inc;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let Some(enter) = entering else {
            return Err(Error::LinearProgram("objective unbounded along an edge".into()));
        };
        in_basis[basis[k]] = false;
        in_basis[enter] = true;
        basis[k] = enter;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        objective: objective(w, y, a, &beta, tau),
        last_beta: beta,
    })
}

/// One-sided derivative of `ρ_τ(r + t·dr)` at `t = 0⁺`.
#[inline]
fn residual_slope(r: f64, dr: f64, tau: f64, zero_tol: f64) -> f64 {
    if r > zero_tol || (r.abs() <= zero_tol && dr > 0.0) {
        tau * dr
    } else if r < -zero_tol || dr < 0.0 {
        (tau - 1.0) * dr
    } else {
        0.0
    }
}

/// Result of a local fit at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    pub beta: Vec<f64>,
    pub n_effective: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Points with positive kernel weight around a fit location.
#[derive(Debug, Clone, Default)]
pub struct Window {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Row-major `A((X_i − x)/h)`.
    pub design: Vec<f64>,
    pub y: Vec<f64>,
}

/// Reusable local fitter over one dataset and bandwidth, with a bucket grid
/// on the first two axes for neighbor search.
#[derive(Debug, Clone)]
pub struct LocalFitter<'a> {
    data: &'a Dataset,
    h: f64,
    basis: MultiIndexBasis,
    kernel: SphericalKernel,
    tau: f64,
    opts: SolverOptions,
    grid: BucketGrid,
}

impl<'a> LocalFitter<'a> {
    pub fn new(
        data: &'a Dataset,
        h: f64,
        basis: MultiIndexBasis,
        level: QuantileLevel,
        opts: SolverOptions,
    ) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
        }
        if basis.dim() != data.d() {
            return Err(Error::invalid("basis dimension does not match data"));
        }
        let kernel = SphericalKernel::biweight(data.d());
        let grid = BucketGrid::new(data, h);
        Ok(LocalFitter {
            data,
            h,
            basis,
            kernel,
            tau: level.tau(),
            opts,
            grid,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn basis(&self) -> &MultiIndexBasis {
        &self.basis
    }

    pub fn kernel(&self) -> &SphericalKernel {
        &self.kernel
    }

    /// Collects the in-window points around `x`, skipping `exclude`.
    pub fn window(&self, x: &[f64], exclude: Option<usize>) -> Window {
        let d = self.data.d();
        let m = self.basis.len();
        let inv_h = 1.0 / self.h;
        let mut win = Window::default();
        let mut z = vec![0.0; d];
        let mut a = vec![0.0; m];
        self.grid.for_each_candidate(x, |i| {
            if Some(i) == exclude {
                return;
            }
            let row = self.data.row(i);
            let mut norm_sq = 0.0;
            for k in 0..d {
                z[k] = (row[k] - x[k]) * inv_h;
                norm_sq += z[k] * z[k];
            }
            let kw = self.kernel.eval_sq(norm_sq);
            if kw > 0.0 {
                self.basis.eval_into(&z, &mut a);
                win.indices.push(i);
                win.weights.push(kw);
                win.design.extend_from_slice(&a);
                win.y.push(self.data.y()[i]);
            }
        });
        win
    }

    /// Local fit at `x`, leaving out row `exclude` if given.
    pub fn fit(&self, x: &[f64], exclude: Option<usize>) -> Result<LocalFit> {
        if x.len() != self.data.d() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fit point must be finite with one entry per axis"));
        }
        if let Some(j) = exclude {
            if j >= self.data.n() {
                return Err(Error::invalid(format!("excluded row {j} out of range")));
            }
        }
        let win = self.window(x, exclude);
        let m = self.basis.len();
        if win.y.len() < m {
            return Err(Error::DegenerateFit {
                point: x.to_vec(),
                reason: format!("{} points in window for {m} coefficients", win.y.len()),
            });
        }
        let fit = solve_weighted(&win.weights, &win.y, &win.design, m, self.tau, &self.opts)
            .map_err(|e| match e {
                Error::DegenerateFit { reason, .. } => Error::DegenerateFit {
                    point: x.to_vec(),
                    reason,
                },
                other => other,
            })?;
        Ok(LocalFit {
            beta: fit.beta,
            n_effective: win.y.len(),
            objective: fit.objective,
            converged: true,
        })
    }
}

/// One-shot local fit; builds a [`LocalFitter`] internally.
pub fn fit_local(
    data: &Dataset,
    x: &[f64],
    h: f64,
    basis: &MultiIndexBasis,
    level: QuantileLevel,
    opts: &SolverOptions,
    exclude: Option<usize>,
) -> Result<LocalFit> {
    LocalFitter::new(data, h, basis.clone(), level, opts.clone())?.fit(x, exclude)
}

/// `β[e_axis] / h`: the fitted partial derivative along `axis`.
pub fn local_partial(fit: &LocalFit, basis: &MultiIndexBasis, axis: usize, h: f64) -> f64 {
    let pos = basis
        .unit_position(axis)
        .expect("partial derivatives need polynomial order >= 2");
    fit.beta[pos] / h
}

/// Uniform buckets on the first two coordinates, cell width at least `h`.
#[derive(Debug, Clone)]
struct BucketGrid {
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl BucketGrid {
    const MAX_CELLS_PER_AXIS: usize = 512;

    fn new(data: &Dataset, h: f64) -> Self {
        let mut origin = [0.0; 2];
        let mut cell = [h; 2];
        let mut dims = [1usize; 2];
        for k in 0..2 {
            let col = data.column(k);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            origin[k] = lo;
            let span = hi - lo;
            let count = ((span / h).floor() as usize + 1).clamp(1, Self::MAX_CELLS_PER_AXIS);
            dims[k] = count;
            cell[k] = if count == Self::MAX_CELLS_PER_AXIS {
                (span / (count - 1) as f64).max(h)
            } else {
                h
            };
        }
        let n_cells = dims[0] * dims[1];
        let mut counts = vec![0usize; n_cells + 1];
        let cell_of: Vec<usize> = (0..data.n())
            .map(|i| {
                let row = data.row(i);
                let cx = Self::coord(row[0], origin[0], cell[0], dims[0]);
                let cy = Self::coord(row[1], origin[1], cell[1], dims[1]);
                cx * dims[1] + cy
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; data.n()];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        BucketGrid {
            origin,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    fn coord(v: f64, origin: f64, cell: f64, dim: usize) -> usize {
        (((v - origin) / cell).floor().max(0.0) as usize).min(dim - 1)
    }

    fn for_each_candidate(&self, x: &[f64], mut f: impl FnMut(usize)) {
        let range = |k: usize| -> Option<(usize, usize)> {
            let rel = (x[k] - self.origin[k]) / self.cell[k];
            let lo = (rel - 1.0).floor();
            let hi = (rel + 1.0).floor();
            if hi < 0.0 || lo > (self.dims[k] - 1) as f64 {
                return None;
            }
            Some((lo.max(0.0) as usize, (hi as usize).min(self.dims[k] - 1)))
        };
        let (Some((x0, x1)), Some((y0, y1))) = (range(0), range(1)) else {
            return;
        };
        for cx in x0..=x1 {
            let base = cx * self.dims[1];
            for &i in &self.items[self.starts[base + y0]..self.starts[base + y1 + 1]] {
                f(i);
            }
        }
    }
}
