//! Marginal integration estimators of the additive components.
//!
//! Averaged local partial derivatives `D̂_u`, `D̂_{1,u}` are integrated
//! against weight functions to recover each component up to the scale fixed
//! by the identification constraints. Axis 0 plays the role of the reference
//! axis throughout.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, FitConfig};
use crate::error::{Error, Result};
use crate::lpq::{local_partial, LocalFitter};
use crate::numerics::{interp_linear, median, pairwise_sum, GaussLegendre};

/// Quadratic bump `6 (t − a)(b − t) / (b − a)³` on `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFn {
    pub a: f64,
    pub b: f64,
}

impl WeightFn {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!("weight interval [{a}, {b}] is empty")));
        }
        Ok(WeightFn { a, b })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < self.a || t > self.b {
            0.0
        } else {
            6.0 * (t - self.a) * (self.b - t) / (self.b - self.a).powi(3)
        }
    }
}

/// Averaged partial derivatives at one `(t1, tu)` node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPair {
    /// Average partial along axis `u`.
    pub d_u: f64,
    /// Average partial along the reference axis.
    pub d_1u: f64,
    pub t1: f64,
    pub tu: f64,
    pub n_used: usize,
}

/// One estimated component on its evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEstimate {
    /// Zero-based axis.
    pub axis: usize,
    pub anchor: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Scale constant, set on the reference component.
    pub c_hat: Option<f64>,
    /// Smallest `|denominator|` met while integrating up to each grid node.
    pub denominator_min: Vec<f64>,
    pub denominator_floor: f64,
}

impl ComponentEstimate {
    /// Piecewise-linear interpolant, clamped outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        interp_linear(&self.grid, &self.values, x)
    }

    pub fn anchor_index(&self) -> usize {
        self.grid
            .iter()
            .position(|&g| g == self.anchor)
            .expect("anchor is a grid node")
    }
}

/// All components plus the additive index `q̂₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFit {
    pub components: Vec<ComponentEstimate>,
    pub c_hat: f64,
}

impl AdditiveFit {
    /// `q̂₀(x) = Σ_k q̂_k(x_k)`.
    pub fn index(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(x)
            .map(|(c, &v)| c.eval(v))
            .sum()
    }

    /// Writes `u,x,value` rows with one-based axes.
    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["u", "x", "value"])?;
        for c in &self.components {
            for (x, v) in c.grid.iter().zip(&c.values) {
                wtr.write_record([(c.axis + 1).to_string(), format!("{x:?}"), format!("{v:?}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    /// Sidecar with `ĉ` and per-component diagnostics.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "c_hat": self.c_hat,
            "components": self.components.iter().map(|c| serde_json::json!({
                "u": c.axis + 1,
                "anchor": c.anchor,
                "denominator_floor": c.denominator_floor,
                "denominator_min": c.denominator_min,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Layout of composite Gauss–Legendre rules between consecutive grid nodes.
#[derive(Debug, Clone)]
struct PathRule {
    grid: Vec<f64>,
    anchor_idx: usize,
    /// `segments[i]` integrates over `[grid[i], grid[i + 1]]`.
    segments: Vec<Vec<(f64, f64)>>,
}

impl PathRule {
    fn new(a: f64, b: f64, anchor: f64, points: usize, gl: &GaussLegendre) -> Self {
        let tol = 1e-9 * (b - a);
        let mut grid: Vec<f64> = (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .filter(|g| (g - anchor).abs() > tol)
            .collect();
        grid.push(anchor);
        grid.sort_by(f64::total_cmp);
        let anchor_idx = grid.iter().position(|&g| g == anchor).expect("anchor inserted");
        let segments = grid.windows(2).map(|w| gl.on(w[0], w[1])).collect();
        PathRule {
            grid,
            anchor_idx,
            segments,
        }
    }

    fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().flatten().map(|&(x, _)| x)
    }

    /// Signed cumulative integrals from the anchor to each grid node, given
    /// integrand values at [`PathRule::nodes`] in order.
    fn cumulate(&self, values: &[f64]) -> Vec<f64> {
        let mut seg_sums = Vec::with_capacity(self.segments.len());
        let mut pos = 0;
        for seg in &self.segments {
            let terms: Vec<f64> = seg
                .iter()
                .zip(&values[pos..pos + seg.len()])
                .map(|(&(_, w), v)| w * v)
                .collect();
            seg_sums.push(pairwise_sum(&terms));
            pos += seg.len();
        }
        let mut out = vec![0.0; self.grid.len()];
        for i in self.anchor_idx + 1..self.grid.len() {
            out[i] = out[i - 1] + seg_sums[i - 1];
        }
        for i in (0..self.anchor_idx).rev() {
            out[i] = out[i + 1] - seg_sums[i];
        }
        out
    }

    /// Running minimum of per-segment values, walking outward from the anchor.
    fn running_min(&self, seg_min: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; self.grid.len()];
        for i in self.anchor_idx + 1..self.grid.len() {
            out[i] = out[i - 1].min(seg_min[i - 1]);
        }
        for i in (0..self.anchor_idx).rev() {
            out[i] = out[i + 1].min(seg_min[i]);
        }
        out
    }
}

/// Marginal integration estimator over one dataset and configuration, with
/// a cache of `D̂` pairs shared by all components.
pub struct MarginalEstimator<'a> {
    fitter: LocalFitter<'a>,
    config: FitConfig,
    full: GaussLegendre,
    path: GaussLegendre,
    cache: Mutex<HashMap<(usize, u64, u64), DPair>>,
}

impl<'a> MarginalEstimator<'a> {
    pub fn new(data: &'a Dataset, config: &FitConfig) -> Result<Self> {
        config.check()?;
        if config.dim() != data.d() {
            return Err(Error::invalid(format!(
                "config has {} axes but data has {}",
                config.dim(),
                data.d()
            )));
        }
        let fitter = LocalFitter::new(data, config.h, config.basis(), config.level, config.solver.clone())?;
        Ok(MarginalEstimator {
            fitter,
            config: config.clone(),
            full: GaussLegendre::new(config.quad_nodes),
            path: GaussLegendre::new((config.quad_nodes / 4).max(2)),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn fitter(&self) -> &LocalFitter<'a> {
        &self.fitter
    }

    fn weight(&self, axis: usize) -> WeightFn {
        WeightFn {
            a: self.config.bounds.lower[axis],
            b: self.config.bounds.upper[axis],
        }
    }

    fn full_rule(&self, axis: usize) -> Vec<(f64, f64)> {
        self.full
            .on(self.config.bounds.lower[axis], self.config.bounds.upper[axis])
    }

    fn path_rule(&self, axis: usize) -> PathRule {
        PathRule::new(
            self.config.bounds.lower[axis],
            self.config.bounds.upper[axis],
            self.config.anchors[axis],
            self.config.grid_points,
            &self.path,
        )
    }

    /// `D̂` pair for axis `u` at reference coordinate `t1` and `tu`.
    pub fn d_pair(&self, u: usize, t1: f64, tu: f64) -> Result<DPair> {
        Ok(self.d_table(u, &[(t1, tu)])?[0])
    }

    /// `D̂` pairs for many nodes, computed in parallel and cached.
    pub fn d_table(&self, u: usize, nodes: &[(f64, f64)]) -> Result<Vec<DPair>> {
        let key = |t1: f64, tu: f64| (u, t1.to_bits(), tu.to_bits());
        let missing: Vec<(f64, f64)> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            nodes
                .iter()
                .copied()
                .filter(|&(t1, tu)| !cache.contains_key(&key(t1, tu)) && seen.insert(key(t1, tu)))
                .collect()
        };
        let computed: Vec<Result<DPair>> = missing
            .par_iter()
            .map(|&(t1, tu)| compute_d(&self.fitter, &self.config, u, t1, tu))
            .collect();
        let mut cache = self.cache.lock().expect("cache lock");
        for r in computed {
            let pair = r?;
            cache.insert(key(pair.t1, pair.tu), pair);
        }
        Ok(nodes.iter().map(|&(t1, tu)| cache[&key(t1, tu)]).collect())
    }

    /// `q̂_u` on its grid for a non-reference axis `u`.
    pub fn component_u(&self, u: usize) -> Result<ComponentEstimate> {
        self.check_axis(u)?;
        let full1 = self.full_rule(0);
        let w1 = self.weight(0);
        let rule = self.path_rule(u);
        let nodes: Vec<(f64, f64)> = rule
            .nodes()
            .flat_map(|tu| full1.iter().map(move |&(t1, _)| (t1, tu)))
            .collect();
        let table = self.d_table(u, &nodes)?;
        let floor = denominator_floor(table.iter().map(|p| p.d_1u));
        let q = full1.len();
        let mut inner = Vec::with_capacity(table.len() / q);
        let mut col_min = Vec::with_capacity(table.len() / q);
        for col in table.chunks(q) {
            let mut terms = Vec::with_capacity(q);
            let mut min = f64::INFINITY;
            for (p, &(t1, w)) in col.iter().zip(&full1) {
                check_floor(p.d_1u, floor, p)?;
                min = min.min(p.d_1u.abs());
                terms.push(w * w1.eval(t1) * p.d_u / p.d_1u);
            }
            inner.push(pairwise_sum(&terms));
            col_min.push(min);
        }
        let values = rule.cumulate(&inner);
        let seg_min = segment_minima(&rule, &col_min);
        Ok(ComponentEstimate {
            axis: u,
            anchor: self.config.anchors[u],
            denominator_min: rule.running_min(&seg_min),
            grid: rule.grid,
            values,
            c_hat: None,
            denominator_floor: floor,
        })
    }

    /// `∫_{from}^{to} ∫ (D̂_u / D̂_{1,u}) w₁ dt₁ dt_u` by a composite rule; swapping
    /// the limits negates the result exactly.
    pub fn partial_integral(&self, u: usize, from: f64, to: f64) -> Result<f64> {
        self.check_axis(u)?;
        if to < from {
            return Ok(-self.partial_integral(u, to, from)?);
        }
        if to == from {
            return Ok(0.0);
        }
        let full1 = self.full_rule(0);
        let w1 = self.weight(0);
        let segs = (self.config.grid_points - 1).max(1);
        let width = self.config.bounds.width(u);
        let pieces = (((to - from) / width) * segs as f64).ceil().max(1.0) as usize;
        let mut outer = Vec::new();
        for s in 0..pieces {
            let lo = from + (to - from) * s as f64 / pieces as f64;
            let hi = from + (to - from) * (s + 1) as f64 / pieces as f64;
            outer.extend(self.path.on(lo, hi));
        }
        let nodes: Vec<(f64, f64)> = outer
            .iter()
            .flat_map(|&(tu, _)| full1.iter().map(move |&(t1, _)| (t1, tu)))
            .collect();
        let table = self.d_table(u, &nodes)?;
        let floor = denominator_floor(table.iter().map(|p| p.d_1u));
        let mut terms = Vec::with_capacity(table.len());
        for (k, p) in table.iter().enumerate() {
            check_floor(p.d_1u, floor, p)?;
            let (t1, w) = full1[k % full1.len()];
            let (_, wu) = outer[k / full1.len()];
            terms.push(wu * w * w1.eval(t1) * p.d_u / p.d_1u);
        }
        Ok(pairwise_sum(&terms))
    }

    /// Inner integrals `∫ (D̂_{1,2} / D̂_2)(t1, t2) w₂(t2) dt2` at each `t1`.
    fn reference_inner(&self, t1_nodes: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let full2 = self.full_rule(1);
        let w2 = self.weight(1);
        let nodes: Vec<(f64, f64)> = t1_nodes
            .iter()
            .flat_map(|&t1| full2.iter().map(move |&(t2, _)| (t1, t2)))
            .collect();
        let table = self.d_table(1, &nodes)?;
        let floor = denominator_floor(table.iter().map(|p| p.d_u));
        let q = full2.len();
        let mut inner = Vec::with_capacity(t1_nodes.len());
        let mut mins = Vec::with_capacity(t1_nodes.len());
        for col in table.chunks(q) {
            let mut terms = Vec::with_capacity(q);
            let mut min = f64::INFINITY;
            for (p, &(t2, w)) in col.iter().zip(&full2) {
                check_floor(p.d_u, floor, p)?;
                min = min.min(p.d_u.abs());
                terms.push(w * w2.eval(t2) * p.d_1u / p.d_u);
            }
            inner.push(pairwise_sum(&terms));
            mins.push(min);
        }
        Ok((inner, mins, floor))
    }

    /// `ĉ = ∫ w₁(t₁) [∫ (D̂_{1,2}/D̂_2) w₂ dt₂]⁻¹ dt₁`.
    pub fn c_hat(&self) -> Result<f64> {
        let full1 = self.full_rule(0);
        let w1 = self.weight(0);
        let t1s: Vec<f64> = full1.iter().map(|&(t, _)| t).collect();
        let (inner, _, _) = self.reference_inner(&t1s)?;
        let floor = denominator_floor(inner.iter().copied());
        let mut terms = Vec::with_capacity(inner.len());
        for (&(t1, w), &v) in full1.iter().zip(&inner) {
            if !(v.abs() > floor) || !v.is_finite() {
                return Err(Error::DenominatorFloor {
                    value: v,
                    floor,
                    node: vec![t1],
                });
            }
            terms.push(w * w1.eval(t1) / v);
        }
        Ok(pairwise_sum(&terms))
    }

    /// `q̂₁ = ĉ ∫_{x_{1,0}}^{x₁} ∫ (D̂_{1,2}/D̂_2) w₂ dt₂ dt₁` on the reference grid.
    pub fn component_1(&self) -> Result<ComponentEstimate> {
        let c_hat = self.c_hat()?;
        let rule = self.path_rule(0);
        let t1s: Vec<f64> = rule.nodes().collect();
        let (inner, mins, floor) = self.reference_inner(&t1s)?;
        let raw = rule.cumulate(&inner);
        let seg_min = segment_minima(&rule, &mins);
        Ok(ComponentEstimate {
            axis: 0,
            anchor: self.config.anchors[0],
            denominator_min: rule.running_min(&seg_min),
            grid: rule.grid,
            values: raw.iter().map(|v| c_hat * v).collect(),
            c_hat: Some(c_hat),
            denominator_floor: floor,
        })
    }

    /// Every component in axis order.
    pub fn estimate_all(&self) -> Result<AdditiveFit> {
        let first = self.component_1()?;
        let c_hat = first.c_hat.expect("reference component carries c_hat");
        let mut components = vec![first];
        for u in 1..self.config.dim() {
            components.push(self.component_u(u)?);
        }
        Ok(AdditiveFit { components, c_hat })
    }

    fn check_axis(&self, u: usize) -> Result<()> {
        if u == 0 || u >= self.config.dim() {
            return Err(Error::invalid(format!(
                "component axis must be in 1..{}, got {u}",
                self.config.dim()
            )));
        }
        Ok(())
    }
}

fn segment_minima(rule: &PathRule, col_min: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rule.segments.len());
    let mut pos = 0;
    for seg in &rule.segments {
        out.push(col_min[pos..pos + seg.len()].iter().cloned().fold(f64::INFINITY, f64::min));
        pos += seg.len();
    }
    out
}

/// `1e-3 · median |D̂|` over a table.
fn denominator_floor(values: impl Iterator<Item = f64>) -> f64 {
    let abs: Vec<f64> = values.map(f64::abs).collect();
    1e-3 * median(&abs)
}

fn check_floor(value: f64, floor: f64, pair: &DPair) -> Result<()> {
    if !(value.abs() > floor) || !value.is_finite() {
        return Err(Error::DenominatorFloor {
            value,
            floor,
            node: vec![pair.t1, pair.tu],
        });
    }
    Ok(())
}

fn compute_d(fitter: &LocalFitter<'_>, config: &FitConfig, u: usize, t1: f64, tu: f64) -> Result<DPair> {
    let data = fitter.data();
    let d = data.d();
    let h = fitter.h();
    let basis = fitter.basis();
    if d == 2 {
        let fit = fitter.fit(&[t1, tu], None)?;
        return Ok(DPair {
            d_u: local_partial(&fit, basis, u, h),
            d_1u: local_partial(&fit, basis, 0, h),
            t1,
            tu,
            n_used: 1,
        });
    }
    let others: Vec<usize> = (1..d).filter(|&k| k != u).collect();
    let mut du = Vec::new();
    let mut d1 = Vec::new();
    let mut point = vec![0.0; d];
    for j in 0..data.n() {
        let row = data.row(j);
        if !config.bounds.contains_axes(row, &others) {
            continue;
        }
        point.copy_from_slice(row);
        point[0] = t1;
        point[u] = tu;
        let fit = fitter.fit(&point, Some(j))?;
        du.push(local_partial(&fit, basis, u, h));
        d1.push(local_partial(&fit, basis, 0, h));
    }
    if du.is_empty() {
        return Err(Error::EmptySample { t1, tu });
    }
    let n = data.n() as f64;
    Ok(DPair {
        d_u: pairwise_sum(&du) / n,
        d_1u: pairwise_sum(&d1) / n,
        t1,
        tu,
        n_used: du.len(),
    })
}

/// `D̂` pair at `(t1, tu)` for axis `u`.
pub fn estimate_d(data: &Dataset, u: usize, t1: f64, tu: f64, config: &FitConfig) -> Result<DPair> {
    MarginalEstimator::new(data, config)?.d_pair(u, t1, tu)
}

pub fn estimate_component_u(data: &Dataset, u: usize, config: &FitConfig) -> Result<ComponentEstimate> {
    MarginalEstimator::new(data, config)?.component_u(u)
}

pub fn estimate_c_hat(data: &Dataset, config: &FitConfig) -> Result<f64> {
    MarginalEstimator::new(data, config)?.c_hat()
}

pub fn estimate_component_1(data: &Dataset, config: &FitConfig) -> Result<ComponentEstimate> {
    MarginalEstimator::new(data, config)?.component_1()
}

pub fn estimate_all(data: &Dataset, config: &FitConfig) -> Result<AdditiveFit> {
    MarginalEstimator::new(data, config)?.estimate_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EstimationBox, QuantileLevel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_data(n: usize, d: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            y.push(f(&row));
            x.extend(row);
        }
        Dataset::new(x, y, d).unwrap()
    }

    fn config(d: usize, h: f64) -> FitConfig {
        let level = QuantileLevel::from_tau(0.5).unwrap();
        FitConfig::new(2, h, level, EstimationBox::cube(d, 0.2, 0.8).unwrap())
    }

    #[test]
    fn weight_function_basics() {
        let w = WeightFn::new(0.0, 1.0).unwrap();
        assert_eq!(w.eval(0.0), 0.0);
        assert_eq!(w.eval(1.0), 0.0);
        assert_eq!(w.eval(0.5), 1.5);
        assert_eq!(w.eval(1.5), 0.0);
        let w = WeightFn::new(-0.3, 2.1).unwrap();
        let total = GaussLegendre::new(4).integrate(w.a, w.b, |t| w.eval(t));
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn path_rule_cumulates_exactly() {
        let gl = GaussLegendre::new(4);
        let rule = PathRule::new(0.0, 1.0, 0.3, 11, &gl);
        assert_eq!(rule.grid[rule.anchor_idx], 0.3);
        let values: Vec<f64> = rule.nodes().map(|t| 2.0 * t).collect();
        let out = rule.cumulate(&values);
        for (g, v) in rule.grid.iter().zip(&out) {
            assert!((v - (g * g - 0.09)).abs() < 1e-14, "{g} {v}");
        }
        assert_eq!(out[rule.anchor_idx], 0.0);
    }

    #[test]
    fn d_pair_noiseless_linear_d2() {
        let data = uniform_data(500, 2, 7, |x| x[0] + x[1]);
        let cfg = config(2, 0.25);
        let pair = estimate_d(&data, 1, 0.45, 0.55, &cfg).unwrap();
        assert!((pair.d_u - 1.0).abs() < 2e-2);
        assert!((pair.d_1u - 1.0).abs() < 2e-2);
    }

    #[test]
    fn d_pair_noiseless_linear_d3_is_indicator_mean() {
        let data = uniform_data(300, 3, 8, |x| x[0] + x[1] + x[2]);
        let cfg = config(3, 0.45);
        let pair = estimate_d(&data, 1, 0.5, 0.5, &cfg).unwrap();
        let freq = (0..data.n())
            .filter(|&j| cfg.bounds.contains_axes(data.row(j), &[2]))
            .count() as f64
            / data.n() as f64;
        assert!((pair.d_u - freq).abs() < 1e-6, "{} vs {freq}", pair.d_u);
        assert!((pair.d_1u - freq).abs() < 1e-6);
    }

    #[test]
    fn constant_response_gives_zero_d_and_floor_error() {
        let data = uniform_data(400, 2, 9, |_| 3.0);
        let cfg = config(2, 0.25);
        let pair = estimate_d(&data, 1, 0.5, 0.5, &cfg).unwrap();
        assert_eq!(pair.d_u, 0.0);
        assert_eq!(pair.d_1u, 0.0);
        let err = estimate_component_u(&data, 1, &cfg).unwrap_err();
        assert!(matches!(err, Error::DenominatorFloor { .. }));
    }

    #[test]
    fn noiseless_additive_components_recovered() {
        let data = uniform_data(500, 2, 10, |x| (x[0] - 0.5) + (x[1] - 0.5));
        let cfg = config(2, 0.25);
        let est = MarginalEstimator::new(&data, &cfg).unwrap();
        let fit = est.estimate_all().unwrap();
        assert!((fit.c_hat - 1.0).abs() < 1e-6);
        for c in &fit.components {
            assert_eq!(c.values[c.anchor_index()], 0.0);
            for (g, v) in c.grid.iter().zip(&c.values) {
                assert!((v - (g - 0.5)).abs() < 1e-3, "axis {} at {g}: {v}", c.axis);
            }
        }
        assert_eq!(fit.index(&cfg.anchors), 0.0);
        let a = est.partial_integral(1, 0.3, 0.7).unwrap();
        let b = est.partial_integral(1, 0.7, 0.3).unwrap();
        assert_eq!(a, -b);
        assert!((a - 0.4).abs() < 1e-3);
        assert_eq!(est.partial_integral(1, 0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn constant_ratio_gives_reciprocal_c_hat() {
        // q = 2 x1 + x2: D_12 / D_2 = 2 everywhere
        let data = uniform_data(500, 2, 11, |x| 2.0 * x[0] + x[1]);
        let cfg = config(2, 0.25);
        let c = estimate_c_hat(&data, &cfg).unwrap();
        assert!((c - 0.5).abs() < 1e-6);
    }

    #[test]
    fn csv_and_sidecar() {
        let data = uniform_data(400, 2, 12, |x| x[0] + x[1]);
        let mut cfg = config(2, 0.3);
        cfg.grid_points = 5;
        let fit = estimate_all(&data, &cfg).unwrap();
        let mut buf = Vec::new();
        fit.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,x,value\n1,"));
        assert!(text.contains("\n2,"));
        let side = fit.sidecar_json();
        assert!(side["c_hat"].as_f64().is_some());
    }
}
