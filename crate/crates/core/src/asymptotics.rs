//! Numerical evaluation of the asymptotic constants of the component and link
//! estimators for a known data-generating model: leading variance and bias of
//! the components, AMSE bandwidth rules, the link bias factor, and the
//! Bahadur linearization of a single local fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::MultiIndexBasis;
use crate::dgp::{sample_stationary, Jet, TrueModel};
use crate::domain::{Dataset, EstimationBox, FitConfig, QuantileLevel};
use crate::error::{Error, Result};
use crate::kernels::{
    ball_rule, f_k_eval, moment_matrices, power_moments, MomentMatrices, ScalarKernel, SphericalKernel,
    DEFAULT_KERNEL_NODES,
};
use crate::lpq::LocalFitter;
use crate::marginals::WeightFn;
use crate::numerics::{median, pairwise_sum, GaussLegendre};

/// Default Gauss–Legendre nodes per axis for the theory integrals.
pub const DEFAULT_THEORY_NODES: usize = 24;
/// Default Monte Carlo draws over the complementary covariates.
pub const DEFAULT_MC_DRAWS: usize = 10_000;

const DENSITY_FLOOR: f64 = 1e-12;

/// Everything the asymptotic formulas need to know about a model.
pub trait AsymptoticModel: Sync {
    fn dim(&self) -> usize;
    fn level(&self) -> QuantileLevel;
    /// Joint covariate density.
    fn density(&self, x: &[f64]) -> f64;
    /// Joint covariate density and its gradient.
    fn density_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
    /// Marginal density of the coordinates `axes`; 1 for no axes.
    fn marginal_density(&self, axes: &[usize], x_axes: &[f64]) -> f64;
    /// Density of `ε` at 0 given `X`, assumed free of `X`. Infinite when noiseless.
    fn error_density_at_zero(&self) -> f64;
    fn component_jet(&self, axis: usize, x: f64) -> Jet;
    fn link_jet(&self, v: f64) -> Jet;
    /// Independent draws from the covariate law.
    fn sample_covariates(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

impl AsymptoticModel for TrueModel {
    fn dim(&self) -> usize {
        TrueModel::dim(self)
    }

    fn level(&self) -> QuantileLevel {
        self.level
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.covariate_density(x)
    }

    fn density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.covariate_density_grad(x)
    }

    fn marginal_density(&self, axes: &[usize], x_axes: &[f64]) -> f64 {
        TrueModel::marginal_density(self, axes, x_axes)
    }

    fn error_density_at_zero(&self) -> f64 {
        TrueModel::error_density_at_zero(self)
    }

    fn component_jet(&self, axis: usize, x: f64) -> Jet {
        self.components[axis].jet(x)
    }

    fn link_jet(&self, v: f64) -> Jet {
        self.link.jet(v)
    }

    fn sample_covariates(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        sample_stationary(self, count, seed)
    }
}

fn jets<M: AsymptoticModel + ?Sized>(model: &M, x: &[f64]) -> (Jet, Vec<Jet>) {
    let comps: Vec<Jet> = x.iter().enumerate().map(|(k, &v)| model.component_jet(k, v)).collect();
    let index: f64 = comps.iter().map(|j| j[0]).sum();
    (model.link_jet(index), comps)
}

/// `q(x) = G(Σ_u q_u(x_u))`.
pub fn quantile_value<M: AsymptoticModel + ?Sized>(model: &M, x: &[f64]) -> f64 {
    jets(model, x).0[0]
}

/// `∂q/∂x_k` for every axis.
pub fn quantile_gradient<M: AsymptoticModel + ?Sized>(model: &M, x: &[f64]) -> Vec<f64> {
    let (g, comps) = jets(model, x);
    comps.iter().map(|c| g[1] * c[1]).collect()
}

/// Pure partial derivative `∂^order q / ∂x_axis^order` for `order ≤ 3`.
pub fn axis_derivative<M: AsymptoticModel + ?Sized>(model: &M, x: &[f64], axis: usize, order: usize) -> Result<f64> {
    let (g, comps) = jets(model, x);
    let c = comps[axis];
    match order {
        1 => Ok(g[1] * c[1]),
        2 => Ok(g[2] * c[1] * c[1] + g[1] * c[2]),
        3 => Ok(g[3] * c[1].powi(3) + 3.0 * g[2] * c[1] * c[2] + g[1] * c[3]),
        _ => Err(Error::invalid(format!(
            "analytic derivatives are available up to third order, not {order}"
        ))),
    }
}

/// Local polynomial coefficients of `q` at `x` in the scaled basis
/// `A((z − x)/h)`: `h^{|λ|} ∂^λ q(x) / λ!`. Supports polynomial orders up to 3.
pub fn taylor_coefficients<M: AsymptoticModel + ?Sized>(
    model: &M,
    x: &[f64],
    basis: &MultiIndexBasis,
    h: f64,
) -> Result<Vec<f64>> {
    if basis.order() > 3 {
        return Err(Error::invalid("true local coefficients are available for p <= 3"));
    }
    let (g, comps) = jets(model, x);
    let coef = basis
        .indices()
        .iter()
        .map(|idx| {
            let axes: Vec<usize> = idx
                .iter()
                .enumerate()
                .flat_map(|(k, &e)| std::iter::repeat_n(k, e as usize))
                .collect();
            match axes.as_slice() {
                [] => g[0],
                [k] => h * g[1] * comps[*k][1],
                [k, l] if k == l => h * h * 0.5 * (g[2] * comps[*k][1].powi(2) + g[1] * comps[*k][2]),
                [k, l] => h * h * g[2] * comps[*k][1] * comps[*l][1],
                _ => unreachable!("degree bounded by the order check"),
            }
        })
        .collect();
    Ok(coef)
}

/// `c · n^{−1/(2p+1)}`.
pub fn optimal_h(n: usize, p: usize, c: f64) -> f64 {
    c * (n as f64).powf(-1.0 / (2.0 * p as f64 + 1.0))
}

/// `(α(1−α) / (a_v² f_v))^{1/5} n^{−1/5}`.
pub fn optimal_h_g(n: usize, a_v: f64, f_v: f64, level: QuantileLevel) -> Result<f64> {
    if a_v == 0.0 {
        return Err(Error::invalid("bias-free point, AMSE rule undefined"));
    }
    if !(f_v > 0.0) || !a_v.is_finite() || !f_v.is_finite() {
        return Err(Error::invalid("link bandwidth rule needs a finite bias and a positive density"));
    }
    let ratio = level.binomial_variance() / (a_v * a_v * f_v);
    Ok(ratio.powf(0.2) * (n as f64).powf(-0.2))
}

fn default_nodes() -> usize {
    DEFAULT_THEORY_NODES
}

fn default_tol() -> f64 {
    1e-6
}

fn default_draws() -> usize {
    DEFAULT_MC_DRAWS
}

/// Settings shared by the theory integrals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Polynomial order of the local fits.
    pub p: usize,
    #[serde(rename = "box")]
    pub bounds: EstimationBox,
    pub anchors: Vec<f64>,
    /// Gauss–Legendre nodes per axis; results are checked against twice as many.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Relative tolerance of the node-doubling check.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_draws")]
    pub mc_draws: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TheoryConfig {
    /// Defaults with anchors at the box midpoint.
    pub fn new(p: usize, bounds: EstimationBox) -> Self {
        let anchors = bounds.midpoint();
        TheoryConfig {
            p,
            bounds,
            anchors,
            nodes: DEFAULT_THEORY_NODES,
            tol: default_tol(),
            mc_draws: DEFAULT_MC_DRAWS,
            seed: 0,
        }
    }

    pub fn with_anchors(mut self, anchors: Vec<f64>) -> Self {
        self.anchors = anchors;
        self
    }

    /// Matches a fit configuration.
    pub fn from_fit(config: &FitConfig) -> Self {
        TheoryConfig::new(config.p, config.bounds.clone()).with_anchors(config.anchors.clone())
    }

    pub fn check(&self, d: usize) -> Result<()> {
        self.bounds.check()?;
        if self.bounds.dim() != d || self.anchors.len() != d {
            return Err(Error::invalid(format!("theory settings must have {d} coordinates")));
        }
        if self.p < 2 {
            return Err(Error::invalid("derivative estimation needs polynomial order p >= 2"));
        }
        for k in 0..d {
            let a = self.anchors[k];
            if !(a > self.bounds.lower[k] && a < self.bounds.upper[k]) {
                return Err(Error::invalid(format!("anchor {a} on axis {k} is not inside the box")));
            }
        }
        if self.nodes < 2 || !(self.tol > 0.0) {
            return Err(Error::invalid("theory quadrature needs at least 2 nodes and a positive tolerance"));
        }
        if self.mc_draws < 2 {
            return Err(Error::invalid("Monte Carlo needs at least 2 draws"));
        }
        Ok(())
    }
}

/// Leading variance split into its pieces, each already multiplied by `α(1−α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// Contribution of observations near the anchor.
    pub anchor: f64,
    /// Contribution of observations near the evaluation point.
    pub evaluation: f64,
    /// Contribution of observations near the box faces of the averaged axes.
    pub faces: f64,
    /// Smallest `|D|` met by the integrands.
    pub min_denominator: f64,
}

impl VarianceTerms {
    pub fn total(&self) -> f64 {
        self.anchor + self.evaluation + self.faces
    }
}

/// Bias constant with its Monte Carlo standard error (0 when no sampling was needed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConstant {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Integrand of the endpoint terms at one reference-axis node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrandNode {
    pub t: f64,
    pub anchor: f64,
    pub evaluation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    /// Zero-based axis.
    pub u: usize,
    pub x_u: f64,
    pub p: usize,
    pub alpha: f64,
    pub bias_const: f64,
    pub bias_std_error: f64,
    pub variance: f64,
    pub variance_terms: VarianceTerms,
    /// `C` in `h_opt = C n^{−1/(2p+1)}`; absent when the bias constant is 0.
    pub h_opt_constant: Option<f64>,
    pub n: Option<usize>,
    pub h_opt: Option<f64>,
    pub integrand: Vec<IntegrandNode>,
}

/// Precomputed kernel moments and weights for one model and configuration.
pub struct Theory<'m, M: AsymptoticModel + ?Sized> {
    model: &'m M,
    config: TheoryConfig,
    basis: MultiIndexBasis,
    moments: MomentMatrices,
    /// `∫ f_k f_kᵀ` over `[−1, 1]` for each axis, row-major.
    f_gram: Vec<Vec<f64>>,
    weights: Vec<WeightFn>,
}

struct Denominators {
    values: Vec<(f64, Vec<f64>)>,
}

impl Denominators {
    fn new() -> Self {
        Denominators { values: Vec::new() }
    }

    fn push(&mut self, value: f64, node: &[f64]) {
        self.values.push((value, node.to_vec()));
    }

    /// Fails if any value is within `1e-3 · median |D|` of zero; returns the smallest `|D|`.
    fn check(&self) -> Result<f64> {
        let abs: Vec<f64> = self.values.iter().map(|(v, _)| v.abs()).collect();
        if abs.is_empty() {
            return Ok(f64::INFINITY);
        }
        let floor = 1e-3 * median(&abs);
        for (v, node) in &self.values {
            if !(v.abs() > floor) || !v.is_finite() {
                return Err(Error::DenominatorFloor {
                    value: *v,
                    floor,
                    node: node.clone(),
                });
            }
        }
        Ok(abs.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

struct EndpointTerm {
    value: f64,
    profile: Vec<(f64, f64)>,
}

fn tensor_rule(gl: &GaussLegendre, intervals: &[(f64, f64)]) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::with_capacity(intervals.len()), 1.0)];
    for &(a, b) in intervals {
        let rule = gl.on(a, b);
        out = out
            .into_iter()
            .flat_map(|(pt, w)| {
                rule.iter().map(move |&(x, wx)| {
                    let mut p = pt.clone();
                    p.push(x);
                    (p, w * wx)
                })
            })
            .collect();
    }
    out
}

fn quad_form(gram: &[f64], v: &[f64]) -> f64 {
    let m = v.len();
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            s += v[i] * gram[i * m + j] * v[j];
        }
    }
    s
}

fn relative_change(coarse: f64, fine: f64) -> f64 {
    let scale = coarse.abs().max(fine.abs());
    if scale == 0.0 {
        0.0
    } else {
        (coarse - fine).abs() / scale
    }
}

impl<'m, M: AsymptoticModel + ?Sized> Theory<'m, M> {
    pub fn new(model: &'m M, config: TheoryConfig) -> Result<Self> {
        let d = model.dim();
        config.check(d)?;
        let basis = MultiIndexBasis::new(d, config.p);
        let kernel = SphericalKernel::biweight(d);
        let moments = moment_matrices(&basis, &kernel, 1e-9)?;
        let gl = GaussLegendre::new(DEFAULT_KERNEL_NODES);
        let m = basis.len();
        let f_gram = (0..d)
            .map(|k| {
                let mut g = vec![0.0; m * m];
                for (y, w) in gl.on(-1.0, 1.0) {
                    let f = f_k_eval(&basis, &kernel, k, y);
                    for i in 0..m {
                        for j in 0..m {
                            g[i * m + j] += w * f[i] * f[j];
                        }
                    }
                }
                g
            })
            .collect();
        let weights = (0..d)
            .map(|k| WeightFn::new(config.bounds.lower[k], config.bounds.upper[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Theory {
            model,
            config,
            basis,
            moments,
            f_gram,
            weights,
        })
    }

    pub fn config(&self) -> &TheoryConfig {
        &self.config
    }

    pub fn moments(&self) -> &MomentMatrices {
        &self.moments
    }

    /// `∫_{−1}^{1} f_k f_kᵀ` for axis `k`, row-major.
    pub fn f_gram(&self, k: usize) -> &[f64] {
        &self.f_gram[k]
    }

    fn d(&self) -> usize {
        self.model.dim()
    }

    fn interval(&self, k: usize) -> (f64, f64) {
        (self.config.bounds.lower[k], self.config.bounds.upper[k])
    }

    fn unit(&self, axis: usize) -> usize {
        self.basis.unit_position(axis).expect("p >= 2 checked")
    }

    /// `Q⁻¹ (e_primary − ratio · e_other)`.
    fn contrast(&self, primary: usize, other: usize, ratio: f64) -> Vec<f64> {
        let mut e = vec![0.0; self.basis.len()];
        e[self.unit(primary)] = 1.0;
        e[self.unit(other)] -= ratio;
        self.moments.solve(&e)
    }

    /// Averages of `∂_pair q` and `∂_0 q` at `(t1, t_pair)` over the box on
    /// the remaining axes, weighted by their marginal density.
    fn averaged_partials(&self, pair: usize, t1: f64, tp: f64, rest: &[usize], rest_rule: &[(Vec<f64>, f64)]) -> (f64, f64) {
        let mut x = vec![0.0; self.d()];
        x[0] = t1;
        x[pair] = tp;
        if rest.is_empty() {
            let g = quantile_gradient(self.model, &x);
            return (g[pair], g[0]);
        }
        let mut acc_pair = Vec::with_capacity(rest_rule.len());
        let mut acc_ref = Vec::with_capacity(rest_rule.len());
        for (pt, w) in rest_rule {
            for (&k, &v) in rest.iter().zip(pt) {
                x[k] = v;
            }
            let pr = self.model.marginal_density(rest, pt);
            let g = quantile_gradient(self.model, &x);
            acc_pair.push(w * pr * g[pair]);
            acc_ref.push(w * pr * g[0]);
        }
        (pairwise_sum(&acc_pair), pairwise_sum(&acc_ref))
    }

    /// `p_rest(x_rest)² / (f_ε(0)² p(x))` at a full point.
    fn density_ratio(&self, x: &[f64], rest: &[usize], fe2: f64) -> Result<f64> {
        let p = self.model.density(x);
        if !(p > DENSITY_FLOOR) || !p.is_finite() {
            return Err(Error::DenominatorFloor {
                value: p,
                floor: DENSITY_FLOOR,
                node: x.to_vec(),
            });
        }
        let vals: Vec<f64> = rest.iter().map(|&k| x[k]).collect();
        let pr = self.model.marginal_density(rest, &vals);
        Ok(pr * pr / (fe2 * p))
    }

    /// `Σ` over the rest-axes rule of the density ratio at `x` with those axes filled in.
    fn rest_sum(&self, x: &mut [f64], rest: &[usize], rule: &[(Vec<f64>, f64)], fe2: f64) -> Result<f64> {
        let mut terms = Vec::with_capacity(rule.len());
        for (pt, w) in rule {
            for (&k, &v) in rest.iter().zip(pt) {
                x[k] = v;
            }
            terms.push(w * self.density_ratio(x, rest, fe2)?);
        }
        Ok(pairwise_sum(&terms))
    }

    /// Same as [`Self::rest_sum`] with axis `face` pinned to each of its box faces.
    fn face_sum(&self, x: &mut [f64], rest: &[usize], face: usize, fe2: f64, gl: &GaussLegendre) -> Result<f64> {
        let others: Vec<usize> = rest.iter().copied().filter(|&k| k != face).collect();
        let intervals: Vec<(f64, f64)> = others.iter().map(|&k| self.interval(k)).collect();
        let rule = tensor_rule(gl, &intervals);
        let (a, b) = self.interval(face);
        let mut total = 0.0;
        for side in [a, b] {
            x[face] = side;
            let mut terms = Vec::with_capacity(rule.len());
            for (pt, w) in &rule {
                for (&k, &v) in others.iter().zip(pt) {
                    x[k] = v;
                }
                terms.push(w * self.density_ratio(x, rest, fe2)?);
            }
            total += pairwise_sum(&terms);
        }
        Ok(total)
    }

    /// `σ_u²` at `x_u` for zero-based axis `u`, checked by doubling the nodes.
    pub fn sigma_u_squared(&self, u: usize, x_u: f64) -> Result<VarianceTerms> {
        Ok(self.variance_checked(u, x_u)?.0)
    }

    fn variance_checked(&self, u: usize, x_u: f64) -> Result<(VarianceTerms, Vec<IntegrandNode>)> {
        let d = self.d();
        if u >= d {
            return Err(Error::invalid(format!("axis {u} out of range for d = {d}")));
        }
        let (lo, hi) = self.interval(u);
        if !(x_u >= lo && x_u <= hi) {
            return Err(Error::invalid(format!("evaluation point {x_u} outside the box on axis {u}")));
        }
        let n = self.config.nodes;
        let coarse = self.variance_at(u, x_u, n)?;
        let fine = self.variance_at(u, x_u, 2 * n)?;
        let change = relative_change(coarse.0.total(), fine.0.total());
        if change > self.config.tol {
            return Err(Error::Quadrature {
                tol: self.config.tol,
                change,
            });
        }
        Ok(fine)
    }

    fn variance_at(&self, u: usize, x_u: f64, nodes: usize) -> Result<(VarianceTerms, Vec<IntegrandNode>)> {
        let fe = self.model.error_density_at_zero();
        if !fe.is_finite() {
            let zero = VarianceTerms {
                anchor: 0.0,
                evaluation: 0.0,
                faces: 0.0,
                min_denominator: f64::INFINITY,
            };
            return Ok((zero, Vec::new()));
        }
        let scale = self.model.level().binomial_variance();
        let (mut terms, profile) = if u == 0 {
            self.reference_variance(x_u, nodes, fe * fe)?
        } else {
            self.component_variance(u, x_u, nodes, fe * fe)?
        };
        terms.anchor *= scale;
        terms.evaluation *= scale;
        terms.faces *= scale;
        let profile = profile
            .into_iter()
            .map(|n| IntegrandNode {
                t: n.t,
                anchor: n.anchor * scale,
                evaluation: n.evaluation * scale,
            })
            .collect();
        Ok((terms, profile))
    }

    fn component_variance(&self, u: usize, x_u: f64, nodes: usize, fe2: f64) -> Result<(VarianceTerms, Vec<IntegrandNode>)> {
        let d = self.d();
        let gl = GaussLegendre::new(nodes);
        let rest: Vec<usize> = (1..d).filter(|&k| k != u).collect();
        let rest_intervals: Vec<(f64, f64)> = rest.iter().map(|&k| self.interval(k)).collect();
        let rest_rule = tensor_rule(&gl, &rest_intervals);
        let (a0, b0) = self.interval(0);
        let rule1 = gl.on(a0, b0);
        let w1 = self.weights[0];
        let mut denoms = Denominators::new();

        let endpoint = |s: f64, denoms: &mut Denominators| -> Result<EndpointTerm> {
            let mut terms = Vec::with_capacity(rule1.len());
            let mut profile = Vec::with_capacity(rule1.len());
            let mut x = vec![0.0; d];
            for &(t1, w) in &rule1 {
                let (du, d1u) = self.averaged_partials(u, t1, s, &rest, &rest_rule);
                denoms.push(d1u, &[t1, s]);
                let v = self.contrast(u, 0, du / d1u);
                x[0] = t1;
                x[u] = s;
                let dens = self.rest_sum(&mut x, &rest, &rest_rule, fe2)?;
                let value = w1.eval(t1).powi(2) / (d1u * d1u) * quad_form(&self.f_gram[u], &v) * dens;
                profile.push((t1, value));
                terms.push(w * value);
            }
            Ok(EndpointTerm {
                value: pairwise_sum(&terms),
                profile,
            })
        };
        let anchor = endpoint(self.config.anchors[u], &mut denoms)?;
        let evaluation = endpoint(x_u, &mut denoms)?;

        let mut faces = Vec::new();
        let (lo, hi) = if x_u < self.config.anchors[u] {
            (x_u, self.config.anchors[u])
        } else {
            (self.config.anchors[u], x_u)
        };
        if hi > lo {
            let rule_u = gl.on(lo, hi);
            let mut x = vec![0.0; d];
            for &k in &rest {
                for &(t1, w) in &rule1 {
                    for &(tu, wu) in &rule_u {
                        let (du, d1u) = self.averaged_partials(u, t1, tu, &rest, &rest_rule);
                        denoms.push(d1u, &[t1, tu]);
                        let v = self.contrast(u, 0, du / d1u);
                        x[0] = t1;
                        x[u] = tu;
                        let dens = self.face_sum(&mut x, &rest, k, fe2, &gl)?;
                        faces.push(w * wu * w1.eval(t1).powi(2) / (d1u * d1u) * quad_form(&self.f_gram[k], &v) * dens);
                    }
                }
            }
        }
        let min_denominator = denoms.check()?;
        let profile = anchor
            .profile
            .iter()
            .zip(&evaluation.profile)
            .map(|(&(t, a), &(_, e))| IntegrandNode {
                t,
                anchor: a,
                evaluation: e,
            })
            .collect();
        Ok((
            VarianceTerms {
                anchor: anchor.value,
                evaluation: evaluation.value,
                faces: pairwise_sum(&faces),
                min_denominator,
            },
            profile,
        ))
    }

    /// `R(t1) = ∫ w₂(t2) (D_{1,2}/D_2)(t1, t2) dt2` with the partial pairs on the `t2` rule.
    fn reference_ratio(
        &self,
        t1: f64,
        rule2: &[(f64, f64)],
        rest: &[usize],
        rest_rule: &[(Vec<f64>, f64)],
        denoms: &mut Denominators,
    ) -> (f64, Vec<(f64, f64)>) {
        let w2 = self.weights[1];
        let mut terms = Vec::with_capacity(rule2.len());
        let mut pairs = Vec::with_capacity(rule2.len());
        for &(t2, w) in rule2 {
            let (d2, d12) = self.averaged_partials(1, t1, t2, rest, rest_rule);
            denoms.push(d2, &[t1, t2]);
            pairs.push((d2, d12));
            terms.push(w * w2.eval(t2) * d12 / d2);
        }
        (pairwise_sum(&terms), pairs)
    }

    /// `c = ∫ w₁ / R` over the reference axis.
    fn reference_scale(&self, gl: &GaussLegendre, rest: &[usize], rest_rule: &[(Vec<f64>, f64)], denoms: &mut Denominators) -> f64 {
        let (a0, b0) = self.interval(0);
        let (a1, b1) = self.interval(1);
        let rule2 = gl.on(a1, b1);
        let w1 = self.weights[0];
        let terms: Vec<f64> = gl
            .on(a0, b0)
            .into_iter()
            .map(|(t1, w)| {
                let (r, _) = self.reference_ratio(t1, &rule2, rest, rest_rule, denoms);
                denoms.push(r, &[t1]);
                w * w1.eval(t1) / r
            })
            .collect();
        pairwise_sum(&terms)
    }

    fn reference_variance(&self, x1: f64, nodes: usize, fe2: f64) -> Result<(VarianceTerms, Vec<IntegrandNode>)> {
        let d = self.d();
        let gl = GaussLegendre::new(nodes);
        let rest: Vec<usize> = (2..d).collect();
        let rest_intervals: Vec<(f64, f64)> = rest.iter().map(|&k| self.interval(k)).collect();
        let rest_rule = tensor_rule(&gl, &rest_intervals);
        let (a0, b0) = self.interval(0);
        let (a1, b1) = self.interval(1);
        let rule2 = gl.on(a1, b1);
        let w1 = self.weights[0];
        let w2 = self.weights[1];
        let x10 = self.config.anchors[0];
        let mut denoms = Denominators::new();

        let c = self.reference_scale(&gl, &rest, &rest_rule, &mut denoms);
        let partial: Vec<f64> = gl
            .on(x10, x1)
            .into_iter()
            .map(|(t1, w)| w * self.reference_ratio(t1, &rule2, &rest, &rest_rule, &mut denoms).0)
            .collect();
        let partial = pairwise_sum(&partial);

        // integrand over t2 of one f_1 endpoint term at reference coordinate s
        let endpoint = |s: f64, denoms: &mut Denominators| -> Result<f64> {
            let (_, pairs) = self.reference_ratio(s, &rule2, &rest, &rest_rule, denoms);
            let mut x = vec![0.0; d];
            let mut terms = Vec::with_capacity(rule2.len());
            for (&(t2, w), &(d2, d12)) in rule2.iter().zip(&pairs) {
                let v = self.contrast(0, 1, d12 / d2);
                x[0] = s;
                x[1] = t2;
                let dens = self.rest_sum(&mut x, &rest, &rest_rule, fe2)?;
                terms.push(w * w2.eval(t2).powi(2) / (d2 * d2) * quad_form(&self.f_gram[0], &v) * dens);
            }
            Ok(c * c * pairwise_sum(&terms))
        };
        let anchor = endpoint(x10, &mut denoms)?;
        let evaluation = endpoint(x1, &mut denoms)?;

        let mut faces = Vec::new();
        if !rest.is_empty() {
            let (lo, hi) = if x1 < x10 { (x1, x10) } else { (x10, x1) };
            let sign = if x1 < x10 { -1.0 } else { 1.0 };
            let mut cuts = vec![a0, lo, hi, b0];
            cuts.dedup();
            let mut x = vec![0.0; d];
            for seg in cuts.windows(2) {
                if !(seg[1] > seg[0]) {
                    continue;
                }
                let inside = seg[0] >= lo && seg[1] <= hi;
                for (t1, w) in gl.on(seg[0], seg[1]) {
                    let (r, pairs) = self.reference_ratio(t1, &rule2, &rest, &rest_rule, &mut denoms);
                    denoms.push(r, &[t1]);
                    let indicator = if inside { sign } else { 0.0 };
                    let coef = c * indicator - partial * w1.eval(t1) / (r * r);
                    for &k in &rest {
                        for (&(t2, w2n), &(d2, d12)) in rule2.iter().zip(&pairs) {
                            let v = self.contrast(0, 1, d12 / d2);
                            x[0] = t1;
                            x[1] = t2;
                            let dens = self.face_sum(&mut x, &rest, k, fe2, &gl)?;
                            faces.push(
                                w * w2n * coef * coef * w2.eval(t2).powi(2) / (d2 * d2)
                                    * quad_form(&self.f_gram[k], &v)
                                    * dens,
                            );
                        }
                    }
                }
            }
        }
        let min_denominator = denoms.check()?;
        Ok((
            VarianceTerms {
                anchor,
                evaluation,
                faces: pairwise_sum(&faces),
                min_denominator,
            },
            Vec::new(),
        ))
    }

    /// `e_rowᵀ Q⁻¹ Q*_l ∫ A s_k^p K` for every `(l, k)`.
    fn bias_weights(&self, row_axis: usize) -> Vec<Vec<f64>> {
        let d = self.d();
        let m = self.basis.len();
        let r = self.moments.inverse_row(self.unit(row_axis));
        let kernel = SphericalKernel::biweight(d);
        let power = power_moments(&self.basis, &kernel, self.config.p as u32);
        (0..d)
            .map(|l| {
                let qs = &self.moments.q_star[l];
                let rl: Vec<f64> = (0..m).map(|j| (0..m).map(|i| r[i] * qs[i * m + j]).sum()).collect();
                power
                    .iter()
                    .map(|mk| rl.iter().zip(mk).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    /// `B_{2}(x)` for the row selected by `weights` (from [`Self::bias_weights`]).
    fn bias_integrand(&self, x: &[f64], weights: &[Vec<f64>]) -> Result<f64> {
        let (p, grad) = self.model.density_grad(x);
        if !(p > DENSITY_FLOOR) || !p.is_finite() {
            return Err(Error::DenominatorFloor {
                value: p,
                floor: DENSITY_FLOOR,
                node: x.to_vec(),
            });
        }
        let order = self.config.p;
        let derivs = (0..self.d())
            .map(|k| axis_derivative(self.model, x, k, order))
            .collect::<Result<Vec<f64>>>()?;
        let factorial: f64 = (1..=order).map(|i| i as f64).product();
        let mut s = 0.0;
        for (l, row) in weights.iter().enumerate() {
            let inner: f64 = row.iter().zip(&derivs).map(|(a, b)| a * b).sum();
            s += grad[l] / p * inner;
        }
        Ok(s / factorial)
    }

    /// `B_{1,u}` at `x_u`: the leading-bias integrand integrated from the anchor
    /// to `x_u` against the reference weight, averaged over the remaining
    /// covariates by Monte Carlo when `d ≥ 3`.
    pub fn bias_constant(&self, u: usize, x_u: f64) -> Result<BiasConstant> {
        let d = self.d();
        if u >= d {
            return Err(Error::invalid(format!("axis {u} out of range for d = {d}")));
        }
        self.axis_derivative_available()?;
        let gl = GaussLegendre::new(self.config.nodes);
        let (pair, weight_axis) = if u == 0 { (1, 1) } else { (u, 0) };
        let rest: Vec<usize> = (1..d).filter(|&k| k != pair).collect();
        let weights = self.bias_weights(u);
        let wfn = self.weights[weight_axis];
        let along = gl.on(self.config.anchors[u], x_u);
        let (wa, wb) = self.interval(weight_axis);
        let across = gl.on(wa, wb);
        let scale = if u == 0 {
            let rest_intervals: Vec<(f64, f64)> = rest.iter().map(|&k| self.interval(k)).collect();
            let rest_rule = tensor_rule(&gl, &rest_intervals);
            let mut denoms = Denominators::new();
            let c = self.reference_scale(&gl, &rest, &rest_rule, &mut denoms);
            denoms.check()?;
            c
        } else {
            1.0
        };
        let inner = |x: &mut Vec<f64>| -> Result<f64> {
            let mut terms = Vec::with_capacity(along.len() * across.len());
            for &(s, ws) in &along {
                for &(t, wt) in &across {
                    x[u] = s;
                    x[weight_axis] = t;
                    terms.push(ws * wt * wfn.eval(t) * self.bias_integrand(x, &weights)?);
                }
            }
            Ok(scale * pairwise_sum(&terms))
        };
        if rest.is_empty() {
            let value = inner(&mut vec![0.0; d])?;
            return Ok(BiasConstant {
                value,
                std_error: 0.0,
                draws: 0,
            });
        }
        let draws = self.model.sample_covariates(self.config.mc_draws, self.config.seed)?;
        let values = draws
            .par_iter()
            .map(|z| {
                if !self.config.bounds.contains_axes(z, &rest) {
                    return Ok(0.0);
                }
                let mut x = z.clone();
                inner(&mut x)
            })
            .collect::<Result<Vec<f64>>>()?;
        let j = values.len() as f64;
        let mean = pairwise_sum(&values) / j;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let var = pairwise_sum(&dev) / (j - 1.0);
        Ok(BiasConstant {
            value: mean,
            std_error: (var / j).sqrt(),
            draws: values.len(),
        })
    }

    fn axis_derivative_available(&self) -> Result<()> {
        if self.config.p > 3 {
            return Err(Error::invalid("analytic derivatives are available up to third order"));
        }
        Ok(())
    }

    /// Variance, bias, and the bandwidth constant at one point.
    pub fn report(&self, u: usize, x_u: f64, n: Option<usize>) -> Result<AsymptoticReport> {
        let (terms, integrand) = self.variance_checked(u, x_u)?;
        let bias = self.bias_constant(u, x_u)?;
        let variance = terms.total();
        let p = self.config.p;
        let h_opt_constant = if bias.value != 0.0 && variance > 0.0 {
            Some((variance / (2.0 * p as f64 * bias.value * bias.value)).powf(1.0 / (2.0 * p as f64 + 1.0)))
        } else {
            None
        };
        let h_opt = match (h_opt_constant, n) {
            (Some(c), Some(n)) => Some(optimal_h(n, p, c)),
            _ => None,
        };
        Ok(AsymptoticReport {
            u,
            x_u,
            p,
            alpha: self.model.level().alpha(),
            bias_const: bias.value,
            bias_std_error: bias.std_error,
            variance,
            variance_terms: terms,
            h_opt_constant,
            n,
            h_opt,
            integrand,
        })
    }
}

/// One-shot `σ_u²`.
pub fn sigma_u_squared<M: AsymptoticModel + ?Sized>(model: &M, config: &TheoryConfig, u: usize, x_u: f64) -> Result<f64> {
    Ok(Theory::new(model, config.clone())?.sigma_u_squared(u, x_u)?.total())
}

/// One-shot `B_{1,u}`.
pub fn bias_constant<M: AsymptoticModel + ?Sized>(model: &M, config: &TheoryConfig, u: usize, x_u: f64) -> Result<BiasConstant> {
    Theory::new(model, config.clone())?.bias_constant(u, x_u)
}

/// A component restricted to `[0, 1]`, cut into monotone pieces.
struct MonotonePieces {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl MonotonePieces {
    fn new<M: AsymptoticModel + ?Sized>(model: &M, axis: usize) -> Self {
        let scan = 1024;
        let deriv = |x: f64| model.component_jet(axis, x)[1];
        let mut knots = vec![0.0];
        let mut prev = deriv(0.0);
        for i in 1..=scan {
            let x = i as f64 / scan as f64;
            let cur = deriv(x);
            if prev * cur < 0.0 {
                let (mut lo, mut hi) = ((i - 1) as f64 / scan as f64, x);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if deriv(mid) * prev > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                knots.push(0.5 * (lo + hi));
            }
            if cur != 0.0 {
                prev = cur;
            }
        }
        knots.push(1.0);
        let values = knots.iter().map(|&x| model.component_jet(axis, x)[0]).collect();
        MonotonePieces { knots, values }
    }

    fn range(&self) -> f64 {
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Every `x` in `[0, 1]` with `q(x) = target`.
    fn roots<M: AsymptoticModel + ?Sized>(&self, model: &M, axis: usize, target: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.knots.len() - 1 {
            let (fl, fh) = (self.values[i] - target, self.values[i + 1] - target);
            if fl * fh > 0.0 || (fl == 0.0 && i > 0) {
                continue;
            }
            let (mut lo, mut hi) = (self.knots[i], self.knots[i + 1]);
            let rising = fh > fl;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let fm = model.component_jet(axis, mid)[0] - target;
                if (fm < 0.0) == rising {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            out.push(0.5 * (lo + hi));
        }
        out
    }
}

/// Density `f_{q₀}` of the index `Σ_u q_u(X_u)`.
///
/// The last axis is solved for by root finding, the second to last is
/// integrated with breakpoints wherever a root enters or leaves `[0, 1]`,
/// and any earlier axes use a plain tensor rule.
pub struct IndexDensity<'m, M: AsymptoticModel + ?Sized> {
    model: &'m M,
    pieces: Vec<MonotonePieces>,
    outer_nodes: usize,
    panel: GaussLegendre,
}

impl<'m, M: AsymptoticModel + ?Sized> IndexDensity<'m, M> {
    pub fn new(model: &'m M) -> Self {
        let d = model.dim();
        let pieces = (0..d).map(|k| MonotonePieces::new(model, k)).collect();
        IndexDensity {
            model,
            pieces,
            outer_nodes: 24,
            panel: GaussLegendre::new(16),
        }
    }

    /// Width of the index range over the unit cube.
    pub fn range(&self) -> f64 {
        self.pieces.iter().map(|p| p.range()).sum()
    }

    pub fn eval(&self, v: f64) -> f64 {
        let d = self.model.dim();
        let outer_axes = d - 2;
        let gl = GaussLegendre::new(self.outer_nodes);
        let rule = tensor_rule(&gl, &vec![(0.0, 1.0); outer_axes]);
        let mut terms = Vec::with_capacity(rule.len());
        let mut x = vec![0.0; d];
        for (pt, w) in rule {
            let mut shift = 0.0;
            for (k, &t) in pt.iter().enumerate() {
                x[k] = t;
                shift += self.model.component_jet(k, t)[0];
            }
            terms.push(w * self.last_two(v - shift, &mut x));
        }
        pairwise_sum(&terms)
    }

    fn last_two(&self, s: f64, x: &mut [f64]) -> f64 {
        let d = x.len();
        let (a, b) = (d - 2, d - 1);
        let pa = &self.pieces[a];
        let pb = &self.pieces[b];
        let mut cuts: Vec<f64> = vec![0.0, 1.0];
        cuts.extend_from_slice(&pa.knots);
        for &val in &pb.values {
            cuts.extend(pa.roots(self.model, a, s - val));
        }
        cuts.sort_by(|p, q| p.total_cmp(q));
        cuts.dedup_by(|p, q| (*p - *q).abs() < 1e-14);
        let mut terms = Vec::new();
        for seg in cuts.windows(2) {
            for (xa, w) in self.panel.on(seg[0], seg[1]) {
                x[a] = xa;
                let target = s - self.model.component_jet(a, xa)[0];
                for root in pb.roots(self.model, b, target) {
                    x[b] = root;
                    let slope = self.model.component_jet(b, root)[1].abs();
                    if slope > 0.0 {
                        terms.push(w * self.model.density(x) / slope);
                    }
                }
            }
        }
        pairwise_sum(&terms)
    }
}

/// Link bias factor `a(v)` of the kernel conditional quantile, with
/// derivatives by central differences of step `1e-4` times the index range.
pub fn a_v_constant<M: AsymptoticModel + ?Sized>(model: &M, v: f64, kernel_g: &ScalarKernel) -> Result<f64> {
    let fe = model.error_density_at_zero();
    if !fe.is_finite() {
        return Err(Error::invalid("the link bias needs a continuous error law"));
    }
    let density = IndexDensity::new(model);
    let range = density.range();
    let f = density.eval(v);
    let floor = 1e-6 / range;
    if !(f > floor) {
        return Err(Error::DenominatorFloor {
            value: f,
            floor,
            node: vec![v],
        });
    }
    let step = 1e-4 * range;
    let flux = |t: f64| fe * density.eval(t) * model.link_jet(t)[1];
    let d_flux = (flux(v + step) - flux(v - step)) / (2.0 * step);
    // ε is independent of X, so the mixed derivative of its conditional density vanishes
    Ok(kernel_g.second_moment() / f * d_flux)
}

/// Per-probe comparison of a local fit with its Bahadur leading term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BahadurProbe {
    pub x: Vec<f64>,
    /// `β̂ − β` in the scaled basis.
    pub estimate_error: Vec<f64>,
    pub leading: Vec<f64>,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub leading_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BahadurSummary {
    pub probes: Vec<BahadurProbe>,
    pub max_abs_residual: f64,
    pub max_abs_error: f64,
    /// Median of `|residual| / |leading term|` over probes with a nonzero leading term.
    pub median_ratio: Option<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Leading term `(n h^d Q_jn)⁻¹ Σ_i K_i A_i (τ − 𝕀(ε_i ≤ −r_i))` of a local fit at `x`.
pub fn bahadur_leading_term<M: AsymptoticModel + ?Sized>(
    model: &M,
    fitter: &LocalFitter<'_>,
    x: &[f64],
    beta_true: &[f64],
) -> Vec<f64> {
    let data = fitter.data();
    let basis = fitter.basis();
    let m = basis.len();
    let d = data.d();
    let h = fitter.h();
    let fe = model.error_density_at_zero();
    if !fe.is_finite() {
        return vec![0.0; m];
    }
    let tau = model.level().tau();
    let win = fitter.window(x, None);
    let mut score = vec![0.0; m];
    for (k, &i) in win.indices.iter().enumerate() {
        let a = &win.design[k * m..(k + 1) * m];
        let q = quantile_value(model, data.row(i));
        let eps = data.y()[i] - q;
        let r = q - a.iter().zip(beta_true).map(|(ai, bi)| ai * bi).sum::<f64>();
        let step = tau - if eps <= -r { 1.0 } else { 0.0 };
        for (s, ai) in score.iter_mut().zip(a) {
            *s += win.weights[k] * ai * step;
        }
    }
    let nodes = if d <= 3 { DEFAULT_KERNEL_NODES } else { 12 };
    let mut q_jn = vec![0.0; m * m];
    let mut a = vec![0.0; m];
    let mut z = vec![0.0; d];
    for (s, w) in ball_rule(d, nodes) {
        for k in 0..d {
            z[k] = x[k] + h * s[k];
        }
        let kw = w * fitter.kernel().eval(&s) * fe * model.density(&z);
        basis.eval_into(&s, &mut a);
        for i in 0..m {
            for j in 0..m {
                q_jn[i * m + j] += kw * a[i] * a[j];
            }
        }
    }
    let scale = data.n() as f64 * h.powi(d as i32);
    let rhs: Vec<f64> = score.iter().map(|s| s / scale).collect();
    crate::numerics::lu_solve(&q_jn, &rhs, m, 1e-14).unwrap_or_else(|| vec![f64::NAN; m])
}

/// Compares `β̂ − β` with the Bahadur leading term at each probe.
pub fn bahadur_residual<M: AsymptoticModel + ?Sized>(
    model: &M,
    data: &Dataset,
    config: &FitConfig,
    probes: &[Vec<f64>],
) -> Result<BahadurSummary> {
    config.check()?;
    if data.d() != model.dim() || config.dim() != model.dim() {
        return Err(Error::invalid("model, data, and configuration dimensions differ"));
    }
    let fitter = LocalFitter::new(data, config.h, config.basis(), config.level, config.solver.clone())?;
    let out = probes
        .iter()
        .map(|x| {
            if x.len() != data.d() {
                return Err(Error::invalid("probe dimension does not match data"));
            }
            let fit = fitter.fit(x, None)?;
            let beta = taylor_coefficients(model, x, fitter.basis(), config.h)?;
            let estimate_error: Vec<f64> = fit.beta.iter().zip(&beta).map(|(a, b)| a - b).collect();
            let leading = bahadur_leading_term(model, &fitter, x, &beta);
            let residual: Vec<f64> = estimate_error.iter().zip(&leading).map(|(a, b)| a - b).collect();
            Ok(BahadurProbe {
                x: x.clone(),
                residual_norm: max_abs(&residual),
                leading_norm: max_abs(&leading),
                estimate_error,
                leading,
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = out
        .iter()
        .filter(|p| p.leading_norm > 0.0)
        .map(|p| p.residual_norm / p.leading_norm)
        .collect();
    Ok(BahadurSummary {
        max_abs_residual: out.iter().map(|p| p.residual_norm).fold(0.0, f64::max),
        max_abs_error: out.iter().map(|p| max_abs(&p.estimate_error)).fold(0.0, f64::max),
        median_ratio: if ratios.is_empty() { None } else { Some(median(&ratios)) },
        probes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{Component, CovariateProcess, ErrorLaw, Link};

    fn level(alpha: f64) -> QuantileLevel {
        QuantileLevel::from_alpha(alpha).unwrap()
    }

    fn linear_model(alpha: f64, error: ErrorLaw) -> TrueModel {
        TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 3.0,
                    intercept: 2.0,
                },
                Component::Linear {
                    slope: -1.0,
                    intercept: 0.0,
                },
            ],
            error,
            level(alpha),
        )
    }

    fn sine_model(covariates: CovariateProcess) -> TrueModel {
        TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                Component::SineBump {
                    slope: 1.0,
                    amplitude: 0.3,
                    frequency: 1.0,
                    phase: 0.0,
                },
            ],
            ErrorLaw::Gaussian { sigma: 0.5 },
            level(0.5),
        )
        .with_covariates(covariates)
    }

    fn config2() -> TheoryConfig {
        TheoryConfig::new(2, EstimationBox::cube(2, 0.1, 0.9).unwrap()).with_anchors(vec![0.5, 0.3])
    }

    #[test]
    fn optimal_h_examples() {
        assert!((optimal_h(1024, 2, 1.0) - 0.25).abs() < 1e-15);
        assert!((optimal_h(32, 1, 1.0) - 32f64.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert!((optimal_h(32, 1, 1.0) - 0.31498).abs() < 1e-5);
        assert_eq!(optimal_h(500, 2, 2.0), 2.0 * optimal_h(500, 2, 1.0));
    }

    #[test]
    fn optimal_h_g_examples() {
        let n = 1000;
        let h = optimal_h_g(n, 1.0, 1.0, level(0.5)).unwrap();
        assert!((h - 0.25f64.powf(0.2) * (n as f64).powf(-0.2)).abs() < 1e-15);
        let h32 = optimal_h_g(32 * n, 1.0, 1.0, level(0.5)).unwrap();
        assert!((h / h32 - 2.0).abs() < 1e-12);
        let a = optimal_h_g(n, 0.7, 2.0, level(0.2)).unwrap();
        let b = optimal_h_g(n, 0.7, 2.0, level(0.8)).unwrap();
        assert!((a - b).abs() < 1e-15);
        let err = optimal_h_g(n, 0.0, 1.0, level(0.5)).unwrap_err();
        assert!(err.to_string().contains("bias-free point"));
    }

    #[test]
    fn variance_ratio_is_symmetric_in_alpha() {
        let cfg = config2();
        let a = linear_model(0.25, ErrorLaw::Gaussian { sigma: 1.0 });
        let b = linear_model(0.75, ErrorLaw::Gaussian { sigma: 1.0 });
        for u in [0, 1] {
            let va = sigma_u_squared(&a, &cfg, u, 0.7).unwrap() / a.level.binomial_variance();
            let vb = sigma_u_squared(&b, &cfg, u, 0.7).unwrap() / b.level.binomial_variance();
            assert!(((va - vb) / va).abs() < 1e-10, "{va} vs {vb}");
        }
    }

    #[test]
    fn noiseless_variance_is_zero() {
        let m = linear_model(0.5, ErrorLaw::None);
        assert_eq!(sigma_u_squared(&m, &config2(), 1, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn bias_vanishes_for_linear_components() {
        let m = linear_model(0.5, ErrorLaw::Gaussian { sigma: 1.0 }).with_covariates(CovariateProcess {
            phi: vec![0.4, 0.2],
            rho: 0.3,
        });
        for u in [0, 1] {
            let b = bias_constant(&m, &config2(), u, 0.7).unwrap();
            assert_eq!(b.value, 0.0);
        }
    }

    #[test]
    fn bias_vanishes_for_flat_density() {
        let m = sine_model(CovariateProcess::independent(2));
        let b = bias_constant(&m, &config2(), 1, 0.7).unwrap();
        assert!(b.value.abs() < 1e-14);
        let dependent = sine_model(CovariateProcess {
            phi: vec![0.3, 0.3],
            rho: 0.5,
        });
        assert!(bias_constant(&dependent, &config2(), 1, 0.7).unwrap().value.abs() > 1e-6);
    }

    #[test]
    fn bias_mc_error_reported_in_three_dimensions() {
        let m = TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                Component::Cubic {
                    coefficients: [0.0, 1.0, 0.5, 0.0],
                },
                Component::Linear {
                    slope: 0.5,
                    intercept: 0.0,
                },
            ],
            ErrorLaw::Gaussian { sigma: 0.5 },
            level(0.5),
        )
        .with_covariates(CovariateProcess {
            phi: vec![0.3, 0.3, 0.3],
            rho: 0.4,
        });
        let mut cfg = TheoryConfig::new(2, EstimationBox::cube(3, 0.1, 0.9).unwrap());
        cfg.mc_draws = 400;
        cfg.nodes = 8;
        let b = bias_constant(&m, &cfg, 1, 0.7).unwrap();
        assert_eq!(b.draws, 400);
        assert!(b.std_error > 0.0 && b.std_error.is_finite());
    }

    #[test]
    fn three_dimensional_variance_has_face_terms() {
        let m = TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                Component::Linear {
                    slope: 2.0,
                    intercept: 0.0,
                },
                Component::Linear {
                    slope: 0.5,
                    intercept: 0.0,
                },
            ],
            ErrorLaw::Gaussian { sigma: 0.5 },
            level(0.5),
        );
        let mut cfg = TheoryConfig::new(2, EstimationBox::cube(3, 0.1, 0.9).unwrap());
        cfg.nodes = 8;
        let theory = Theory::new(&m, cfg).unwrap();
        for u in [0, 1] {
            let t = theory.sigma_u_squared(u, 0.8).unwrap();
            assert!(t.faces > 0.0 && t.anchor > 0.0 && t.evaluation > 0.0, "{t:?}");
        }
    }

    #[test]
    fn index_density_of_uniform_sum_is_a_trapezoid() {
        let m = TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                Component::Linear {
                    slope: 0.5,
                    intercept: 0.0,
                },
            ],
            ErrorLaw::Gaussian { sigma: 1.0 },
            level(0.5),
        );
        let dens = IndexDensity::new(&m);
        // X1 + 0.5 X2: ramps on [0, 0.5] and [1, 1.5], flat 1 between
        for (v, want) in [(0.25, 0.5), (0.7, 1.0), (1.2, 0.6)] {
            assert!((dens.eval(v) - want).abs() < 1e-10, "{v}: {}", dens.eval(v));
        }
    }

    #[test]
    fn link_bias_vanishes_for_identity_link_on_flat_density() {
        let m = TrueModel::new(
            Link::Identity,
            vec![
                Component::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                Component::Linear {
                    slope: 0.2,
                    intercept: 0.0,
                },
            ],
            ErrorLaw::Gaussian { sigma: 1.0 },
            level(0.5),
        );
        let a = a_v_constant(&m, 0.6, &ScalarKernel::biweight()).unwrap();
        assert!(a.abs() < 1e-6, "{a}");
    }

    #[test]
    fn taylor_coefficients_of_quadratic() {
        let m = TrueModel::new(
            Link::Identity,
            vec![
                Component::Cubic {
                    coefficients: [0.0, 1.0, 2.0, 0.0],
                },
                Component::Linear {
                    slope: -1.0,
                    intercept: 0.0,
                },
            ],
            ErrorLaw::None,
            level(0.5),
        );
        let basis = MultiIndexBasis::new(2, 3);
        let c = taylor_coefficients(&m, &[0.5, 0.5], &basis, 0.1).unwrap();
        // q = x1 + 2 x1² − x2 at (0.5, 0.5): value 0.5, ∂1 = 3, ∂2 = −1, ∂11 = 4
        let want = [0.5, 0.3, -0.1, 0.02, 0.0, 0.0];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{c:?}");
        }
    }
}
