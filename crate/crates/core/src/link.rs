//! Link estimation: kernel-weighted conditional distribution of `Y` given the
//! fitted additive index, and its left generalized inverse.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, EstimationBox, FitConfig, QuantileLevel};
use crate::error::{Error, Result};
use crate::kernels::ScalarKernel;
use crate::marginals::AdditiveFit;
use crate::numerics::{interp_linear, pairwise_sum, quantile_sorted, variance};

/// Number of equispaced points in the link evaluation grid.
pub const LINK_GRID_POINTS: usize = 64;

/// In-box pairs `(q̂₀(X_j), Y_j)`.
fn in_box_sample(data: &Dataset, index: &[f64], bounds: &EstimationBox) -> Vec<(f64, f64)> {
    (0..data.n())
        .filter(|&j| bounds.contains(data.row(j)))
        .map(|j| (index[j], data.y()[j]))
        .collect()
}

fn kernel_weights(sample: &[(f64, f64)], v: f64, h_g: f64) -> Vec<(f64, f64)> {
    let k = ScalarKernel::biweight();
    sample
        .iter()
        .filter_map(|&(q, y)| {
            let w = k.eval((v - q) / h_g);
            (w > 0.0).then_some((y, w))
        })
        .collect()
}

/// Kernel estimate of `P(Y ≤ y | q₀(X) = v)` over in-box observations.
///
/// `index[j]` is the fitted additive index at row `j`.
pub fn conditional_cdf(
    data: &Dataset,
    index: &[f64],
    v: f64,
    y: f64,
    h_g: f64,
    bounds: &EstimationBox,
) -> Result<f64> {
    check_inputs(data, index, h_g)?;
    let pairs = kernel_weights(&in_box_sample(data, index, bounds), v, h_g);
    if pairs.is_empty() {
        return Err(Error::EmptyNeighborhood(v));
    }
    let total = pairwise_sum(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let below: Vec<f64> = pairs.iter().map(|&(yj, w)| if yj <= y { w } else { 0.0 }).collect();
    Ok((pairwise_sum(&below) / total).clamp(0.0, 1.0))
}

/// Value of the link estimate at one `v`, with a flag for unreachable mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkValue {
    pub value: f64,
    pub flagged: bool,
}

/// Smallest in-window `Y` whose cumulative normalized weight reaches `tau`.
fn generalized_inverse(sample: &[(f64, f64)], v: f64, tau: f64, h_g: f64) -> Result<LinkValue> {
    let mut pairs = kernel_weights(sample, v, h_g);
    if pairs.is_empty() {
        return Err(Error::EmptyNeighborhood(v));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pairwise_sum(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let target = tau * total;
    let mut cum = 0.0;
    for &(y, w) in &pairs {
        cum += w;
        if cum >= target {
            return Ok(LinkValue {
                value: y,
                flagged: false,
            });
        }
    }
    Ok(LinkValue {
        value: pairs.last().expect("nonempty").0,
        flagged: true,
    })
}

/// `Ĝ(v) = inf { y : F̂(y | v) ≥ τ }`.
pub fn link_estimate(
    data: &Dataset,
    index: &[f64],
    v: f64,
    level: QuantileLevel,
    h_g: f64,
    bounds: &EstimationBox,
) -> Result<LinkValue> {
    check_inputs(data, index, h_g)?;
    generalized_inverse(&in_box_sample(data, index, bounds), v, level.tau(), h_g)
}

fn check_inputs(data: &Dataset, index: &[f64], h_g: f64) -> Result<()> {
    if index.len() != data.n() {
        return Err(Error::invalid("index values must match the number of rows"));
    }
    if !(h_g.is_finite() && h_g > 0.0) {
        return Err(Error::invalid(format!("link bandwidth must be positive, got {h_g}")));
    }
    Ok(())
}

/// Default link bandwidth `sd(q̂₀) · n^{-1/5}` over the in-box sample.
pub fn default_link_bandwidth(index_in_box: &[f64]) -> f64 {
    let n = index_in_box.len() as f64;
    variance(index_in_box).sqrt() * n.powf(-0.2)
}

/// The estimated link on its grid, plus the sample that defines it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEstimate {
    pub v_grid: Vec<f64>,
    pub g_values: Vec<f64>,
    pub flags: Vec<bool>,
    pub level: QuantileLevel,
    pub h_g: f64,
    /// `[min, max]` of the fitted index over the in-box sample.
    pub support: [f64; 2],
    #[serde(skip)]
    sample: Vec<(f64, f64)>,
}

impl LinkEstimate {
    /// Builds the link estimate from a fitted additive index.
    pub fn fit(data: &Dataset, additive: &AdditiveFit, config: &FitConfig) -> Result<Self> {
        let index: Vec<f64> = (0..data.n()).map(|j| additive.index(data.row(j))).collect();
        LinkEstimate::from_index(data, &index, config.level, config.h_g, &config.bounds)
    }

    /// Builds the link estimate from per-row index values.
    pub fn from_index(
        data: &Dataset,
        index: &[f64],
        level: QuantileLevel,
        h_g: Option<f64>,
        bounds: &EstimationBox,
    ) -> Result<Self> {
        if index.len() != data.n() {
            return Err(Error::invalid("index values must match the number of rows"));
        }
        let sample = in_box_sample(data, index, bounds);
        if sample.len() < 2 {
            return Err(Error::invalid("fewer than two observations inside the box"));
        }
        let mut sorted: Vec<f64> = sample.iter().map(|p| p.0).collect();
        sorted.sort_by(f64::total_cmp);
        let h_g = match h_g {
            Some(h) => h,
            None => default_link_bandwidth(&sorted),
        };
        if !(h_g.is_finite() && h_g > 0.0) {
            return Err(Error::invalid(format!("link bandwidth must be positive, got {h_g}")));
        }
        let lo = quantile_sorted(&sorted, 0.025);
        let hi = quantile_sorted(&sorted, 0.975);
        let v_grid: Vec<f64> = (0..LINK_GRID_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (LINK_GRID_POINTS - 1) as f64)
            .collect();
        let mut g_values = Vec::with_capacity(v_grid.len());
        let mut flags = Vec::with_capacity(v_grid.len());
        for &v in &v_grid {
            let g = generalized_inverse(&sample, v, level.tau(), h_g)?;
            g_values.push(g.value);
            flags.push(g.flagged);
        }
        Ok(LinkEstimate {
            v_grid,
            g_values,
            flags,
            level,
            h_g,
            support: [sorted[0], sorted[sorted.len() - 1]],
            sample,
        })
    }

    /// `Ĝ(v)`, evaluated exactly from the in-box sample when it is available
    /// and by interpolation on the grid otherwise. Points outside the support
    /// are moved to the nearest support edge and flagged.
    pub fn eval(&self, v: f64) -> Result<LinkValue> {
        let clamped = v.clamp(self.support[0], self.support[1]);
        let outside = clamped != v;
        if self.sample.is_empty() {
            return Ok(LinkValue {
                value: interp_linear(&self.v_grid, &self.g_values, clamped),
                flagged: outside,
            });
        }
        let mut g = generalized_inverse(&self.sample, clamped, self.level.tau(), self.h_g)?;
        g.flagged |= outside;
        Ok(g)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["v", "G_hat"])?;
        for (v, g) in self.v_grid.iter().zip(&self.g_values) {
            wtr.write_record([format!("{v:?}"), format!("{g:?}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "h_g": self.h_g,
            "level": self.level,
            "support": self.support,
            "flagged_nodes": self.flags.iter().filter(|f| **f).count(),
        })
    }
}

/// End-to-end estimate `Ĝ(q̂₀(x))`.
pub fn predict_quantile(
    additive: &AdditiveFit,
    link: &LinkEstimate,
    bounds: &EstimationBox,
    x: &[f64],
) -> Result<LinkValue> {
    if x.len() != bounds.dim() || !bounds.contains(x) {
        return Err(Error::invalid(format!("point {x:?} lies outside the estimation box")));
    }
    link.eval(additive.index(x))
}
