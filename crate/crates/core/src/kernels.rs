//! Spherical and scalar biweight kernels, ball quadrature, the boundary
//! functionals `f_k`, and the kernel moment matrices.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::basis::MultiIndexBasis;
use crate::error::{Error, Result};
use crate::numerics::{cholesky_solve, GaussLegendre};

/// Default Gauss–Legendre nodes per axis for kernel integrals.
pub const DEFAULT_KERNEL_NODES: usize = 32;

/// `c_d (1 − ‖t‖²)²` on the closed unit ball of `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalKernel {
    d: usize,
    normalizer: f64,
}

impl SphericalKernel {
    pub fn biweight(d: usize) -> Self {
        assert!(d >= 1, "kernel dimension must be positive");
        let df = d as f64;
        let normalizer =
            df * (df + 2.0) * (df + 4.0) * gamma(df / 2.0) / (16.0 * PI.powf(df / 2.0));
        SphericalKernel { d, normalizer }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn eval(&self, t: &[f64]) -> f64 {
        debug_assert_eq!(t.len(), self.d);
        self.eval_sq(t.iter().map(|v| v * v).sum())
    }

    /// Kernel value from the squared norm.
    #[inline]
    pub fn eval_sq(&self, norm_sq: f64) -> f64 {
        if norm_sq >= 1.0 {
            0.0
        } else {
            let s = 1.0 - norm_sq;
            self.normalizer * s * s
        }
    }
}

/// One-dimensional biweight `(15/16)(1 − t²)²` on `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarKernel {
    normalizer: f64,
}

impl Default for ScalarKernel {
    fn default() -> Self {
        ScalarKernel::biweight()
    }
}

impl ScalarKernel {
    pub fn biweight() -> Self {
        ScalarKernel {
            normalizer: 15.0 / 16.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() >= 1.0 {
            0.0
        } else {
            let s = 1.0 - t * t;
            self.normalizer * s * s
        }
    }

    pub fn d1(&self, t: f64) -> f64 {
        if t.abs() >= 1.0 {
            0.0
        } else {
            -4.0 * self.normalizer * t * (1.0 - t * t)
        }
    }

    pub fn d2(&self, t: f64) -> f64 {
        if t.abs() >= 1.0 {
            0.0
        } else {
            -4.0 * self.normalizer * (1.0 - 3.0 * t * t)
        }
    }

    /// `∫ s² K(s) ds`.
    pub fn second_moment(&self) -> f64 {
        GaussLegendre::new(8).integrate(-1.0, 1.0, |s| s * s * self.eval(s))
    }
}

/// Quadrature rule for the unit ball of `R^d`: `(node, weight)` pairs.
///
/// Each coordinate is integrated over its chord by the substitution
/// `t_k = r sin θ`, which turns the polynomial-times-kernel integrands into
/// smooth trigonometric ones.
pub fn ball_rule(d: usize, nodes: usize) -> Vec<(Vec<f64>, f64)> {
    ball_rule_cut(d, nodes, 0, 1.0)
}

/// Ball rule restricted to `t_axis ≤ upper` (with `upper` in `[−1, 1]`).
pub fn ball_rule_cut(d: usize, nodes: usize, axis: usize, upper: f64) -> Vec<(Vec<f64>, f64)> {
    assert!(axis < d);
    let gl = GaussLegendre::new(nodes);
    let mut order: Vec<usize> = vec![axis];
    order.extend((0..d).filter(|&k| k != axis));
    let mut out = Vec::with_capacity(nodes.pow(d as u32));
    let mut t = vec![0.0; d];
    let top = upper.clamp(-1.0, 1.0).asin();
    ball_recurse(&gl, &order, 0, 1.0, top, 1.0, &mut t, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn ball_recurse(
    gl: &GaussLegendre,
    order: &[usize],
    level: usize,
    rem: f64,
    top: f64,
    weight: f64,
    t: &mut Vec<f64>,
    out: &mut Vec<(Vec<f64>, f64)>,
) {
    if level == order.len() {
        out.push((t.clone(), weight));
        return;
    }
    let r = rem.max(0.0).sqrt();
    let upper = if level == 0 { top } else { FRAC_PI_2 };
    for (theta, w) in gl.on(-FRAC_PI_2, upper) {
        let v = r * theta.sin();
        t[order[level]] = v;
        ball_recurse(
            gl,
            order,
            level + 1,
            rem - v * v,
            top,
            weight * w * r * theta.cos(),
            t,
            out,
        );
    }
}

/// `𝕀(|y| ≤ 1) ∫_{−1}^{y} ∫ A(t) K(t) dt_{−k} dt_k` over the basis.
pub fn f_k_eval(basis: &MultiIndexBasis, kernel: &SphericalKernel, axis: usize, y: f64) -> Vec<f64> {
    f_k_eval_with(basis, kernel, axis, y, DEFAULT_KERNEL_NODES)
}

pub fn f_k_eval_with(
    basis: &MultiIndexBasis,
    kernel: &SphericalKernel,
    axis: usize,
    y: f64,
    nodes: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; basis.len()];
    if !(y.abs() <= 1.0) || y == -1.0 {
        return out;
    }
    let mut a = vec![0.0; basis.len()];
    for (t, w) in ball_rule_cut(basis.dim(), nodes, axis, y) {
        let kw = w * kernel.eval(&t);
        basis.eval_into(&t, &mut a);
        for (o, ai) in out.iter_mut().zip(&a) {
            *o += kw * ai;
        }
    }
    out
}

/// `Q = ∫ K A Aᵀ` and the slices `Q*_l = ∫ K A Aᵀ t_l`, row-major over the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrices {
    pub size: usize,
    pub q_mat: Vec<f64>,
    pub q_star: Vec<Vec<f64>>,
}

impl MomentMatrices {
    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.q_mat[i * self.size + j]
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        cholesky_solve(&self.q_mat, b, self.size).expect("Q is positive definite")
    }

    /// Row `row` of `Q⁻¹`.
    pub fn inverse_row(&self, row: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.size];
        e[row] = 1.0;
        self.solve(&e)
    }
}

/// Computes [`MomentMatrices`] with the default node count, checking the
/// result against a rule with twice as many nodes.
pub fn moment_matrices(
    basis: &MultiIndexBasis,
    kernel: &SphericalKernel,
    tol: f64,
) -> Result<MomentMatrices> {
    let nodes = if basis.dim() <= 3 {
        DEFAULT_KERNEL_NODES
    } else {
        12
    };
    moment_matrices_with(basis, kernel, tol, nodes)
}

pub fn moment_matrices_with(
    basis: &MultiIndexBasis,
    kernel: &SphericalKernel,
    tol: f64,
    nodes: usize,
) -> Result<MomentMatrices> {
    let coarse = raw_moments(basis, kernel, nodes);
    let fine = raw_moments(basis, kernel, 2 * nodes);
    let change = coarse
        .q_mat
        .iter()
        .chain(coarse.q_star.iter().flatten())
        .zip(fine.q_mat.iter().chain(fine.q_star.iter().flatten()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if change > tol {
        return Err(Error::Quadrature { tol, change });
    }
    let m = fine.size;
    for i in 0..m {
        for j in 0..i {
            if (fine.q(i, j) - fine.q(j, i)).abs() > tol {
                return Err(Error::invalid("moment matrix is not symmetric"));
            }
        }
    }
    if cholesky_solve(&fine.q_mat, &vec![0.0; m], m).is_none() {
        return Err(Error::invalid("moment matrix is not positive definite"));
    }
    Ok(fine)
}

fn raw_moments(basis: &MultiIndexBasis, kernel: &SphericalKernel, nodes: usize) -> MomentMatrices {
    let m = basis.len();
    let d = basis.dim();
    let mut q_mat = vec![0.0; m * m];
    let mut q_star = vec![vec![0.0; m * m]; d];
    let mut a = vec![0.0; m];
    for (t, w) in ball_rule(d, nodes) {
        let kw = w * kernel.eval(&t);
        basis.eval_into(&t, &mut a);
        for i in 0..m {
            for j in 0..m {
                let base = kw * a[i] * a[j];
                q_mat[i * m + j] += base;
                for (l, qs) in q_star.iter_mut().enumerate() {
                    qs[i * m + j] += base * t[l];
                }
            }
        }
    }
    MomentMatrices {
        size: m,
        q_mat,
        q_star,
    }
}

/// `∫ A(s) s_k^p K(s) ds` for each axis `k`.
pub fn power_moments(basis: &MultiIndexBasis, kernel: &SphericalKernel, power: u32) -> Vec<Vec<f64>> {
    let d = basis.dim();
    let m = basis.len();
    let mut out = vec![vec![0.0; m]; d];
    let mut a = vec![0.0; m];
    let nodes = if d <= 3 { DEFAULT_KERNEL_NODES } else { 12 };
    for (t, w) in ball_rule(d, nodes) {
        let kw = w * kernel.eval(&t);
        basis.eval_into(&t, &mut a);
        for (k, row) in out.iter_mut().enumerate() {
            let s = kw * t[k].powi(power as i32);
            for (o, ai) in row.iter_mut().zip(&a) {
                *o += s * ai;
            }
        }
    }
    out
}
