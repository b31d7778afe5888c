//! Monte Carlo experiments: repeated simulate–fit cycles over a list of
//! sample sizes, long-format result tables, and the summary statistics used
//! to check convergence rates, normality, and variance constants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::asymptotics::{optimal_h, Theory, TheoryConfig};
use crate::dgp::{identify_normalize, simulate, IdentifiedModel, TrueModel, MIN_BURN_IN};
use crate::domain::{EstimationBox, FitConfig, DEFAULT_GRID_POINTS, DEFAULT_QUAD_NODES};
use crate::error::{Error, Result};
use crate::link::LinkEstimate;
use crate::lpq::SolverOptions;
use crate::marginals::{MarginalEstimator, WeightFn};
use crate::numerics::{mean, median, pairwise_sum};

/// Failure share at which an experiment is abandoned.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Quantity recorded at each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Probe {
    /// `q̂_u(x) − q_{u,id}(x)` on zero-based axis `axis`.
    Component { axis: usize, x: f64 },
    /// `sup |q̂_u − q_{u,id}|` over the component grid.
    Uniform { axis: usize },
    /// `Ĝ_n(v) − G_id(v)`.
    Link { v: f64 },
}

impl Probe {
    /// Label used in result tables; axes are one-based.
    pub fn label(&self) -> String {
        match self {
            Probe::Component { axis, x } => format!("q{}@{x}", axis + 1),
            Probe::Uniform { axis } => format!("sup_q{}", axis + 1),
            Probe::Link { v } => format!("G@{v}"),
        }
    }

    fn metric(&self) -> &'static str {
        match self {
            Probe::Uniform { .. } => METRIC_SUP,
            _ => METRIC_ERROR,
        }
    }
}

pub const METRIC_ERROR: &str = "error";
pub const METRIC_SUP: &str = "sup_error";
pub const METRIC_RUNTIME: &str = "runtime_s";
pub const METRIC_SIGMA2: &str = "sigma2";
pub const METRIC_H: &str = "h";
pub const METRIC_H_G: &str = "h_g";
pub const METRIC_P: &str = "p";
/// Probe label of per-size configuration rows.
pub const CONFIG_PROBE: &str = "config";
/// Probe label of per-replication bookkeeping rows.
pub const ALL_PROBE: &str = "all";

fn default_p() -> usize {
    2
}

fn default_quad() -> usize {
    DEFAULT_QUAD_NODES
}

fn default_grid() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_burn_in() -> usize {
    MIN_BURN_IN
}

/// Fit settings shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    #[serde(default = "default_p")]
    pub p: usize,
    /// Defaults to the model's reference box.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<EstimationBox>,
    #[serde(default = "default_quad")]
    pub quad_nodes: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            p: default_p(),
            bounds: None,
            quad_nodes: default_quad(),
            grid_points: default_grid(),
            solver: SolverOptions::default(),
        }
    }
}

/// A Monte Carlo design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: TrueModel,
    pub n_list: Vec<usize>,
    pub replications: usize,
    /// `h = h_constant · n^{−1/(2p+1)}`.
    pub h_constant: f64,
    /// `h_G = h_g_constant · n^{−1/5}`; the data-driven default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_g_constant: Option<f64>,
    pub probes: Vec<Probe>,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub fit: FitSettings,
    /// Also record the asymptotic variance at each component probe.
    #[serde(default)]
    pub theory: bool,
}

impl Experiment {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let e: Experiment = serde_json::from_str(s)?;
        e.check()?;
        Ok(e)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Experiment::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        let d = self.model.dim();
        if self.replications < 2 {
            return Err(Error::invalid("an experiment needs at least 2 replications"));
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_list must be nonempty and strictly increasing"));
        }
        if self.n_list[0] == 0 {
            return Err(Error::invalid("sample sizes must be positive"));
        }
        if !(self.h_constant.is_finite() && self.h_constant > 0.0) {
            return Err(Error::invalid("h_constant must be positive"));
        }
        if let Some(c) = self.h_g_constant {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid("h_g_constant must be positive"));
            }
        }
        if self.probes.is_empty() {
            return Err(Error::invalid("an experiment needs at least one probe"));
        }
        for probe in &self.probes {
            match *probe {
                Probe::Component { axis, x } => {
                    if axis >= d || !x.is_finite() {
                        return Err(Error::invalid(format!("bad probe {}", probe.label())));
                    }
                }
                Probe::Uniform { axis } if axis >= d => {
                    return Err(Error::invalid(format!("bad probe {}", probe.label())));
                }
                Probe::Link { v } if !v.is_finite() => {
                    return Err(Error::invalid("link probe must be finite"));
                }
                _ => {}
            }
        }
        if self.burn_in < MIN_BURN_IN {
            return Err(Error::invalid(format!("burn-in must be at least {MIN_BURN_IN}")));
        }
        self.fit_config(self.n_list[0])?.check()
    }

    pub fn bounds(&self) -> EstimationBox {
        self.fit.bounds.clone().unwrap_or_else(|| self.model.reference_box())
    }

    pub fn bandwidth(&self, n: usize) -> f64 {
        optimal_h(n, self.fit.p, self.h_constant)
    }

    pub fn link_bandwidth(&self, n: usize) -> Option<f64> {
        self.h_g_constant.map(|c| c * (n as f64).powf(-0.2))
    }

    /// Fit configuration for sample size `n`.
    pub fn fit_config(&self, n: usize) -> Result<FitConfig> {
        let bounds = self.bounds();
        if bounds.dim() != self.model.dim() {
            return Err(Error::invalid("fit box dimension mismatch"));
        }
        let mut cfg = FitConfig::new(self.fit.p, self.bandwidth(n), self.model.level, bounds)
            .with_anchors(self.model.reference_anchors());
        cfg.h_g = self.link_bandwidth(n);
        cfg.quad_nodes = self.fit.quad_nodes;
        cfg.grid_points = self.fit.grid_points;
        cfg.solver = self.fit.solver.clone();
        Ok(cfg)
    }

    /// The model under the normalization the estimators target.
    pub fn identified(&self) -> Result<IdentifiedModel> {
        let b = self.bounds();
        identify_normalize(
            &self.model,
            &WeightFn::new(b.lower[0], b.upper[0])?,
            &self.model.reference_anchors(),
        )
    }
}

/// One row of the long-format result table. Failed cells hold `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub n: usize,
    pub rep: usize,
    pub probe: String,
    pub metric: String,
    pub value: f64,
}

impl McRecord {
    pub fn failed(&self) -> bool {
        !self.value.is_finite()
    }
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub records: Vec<McRecord>,
    pub cells: usize,
    pub failures: usize,
    /// First few failure messages, for diagnosis.
    pub failure_messages: Vec<String>,
}

impl McResult {
    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        write_records(&self.records, writer)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    /// Per-probe, per-size aggregates.
    pub fn summary(&self) -> Result<Summary> {
        summarize(&self.records)
    }

    /// Values of `metric` at `probe` and `n`, failures excluded.
    pub fn values(&self, n: usize, probe: &str, metric: &str) -> Vec<f64> {
        values_of(&self.records, n, probe, metric)
    }
}

fn values_of(records: &[McRecord], n: usize, probe: &str, metric: &str) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.n == n && r.probe == probe && r.metric == metric && !r.failed())
        .map(|r| r.value)
        .collect()
}

/// Writes `n,rep,probe,metric,value` rows.
pub fn write_records<W: Write>(records: &[McRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["n", "rep", "probe", "metric", "value"])?;
    for r in records {
        wtr.write_record([
            r.n.to_string(),
            r.rep.to_string(),
            r.probe.clone(),
            r.metric.clone(),
            format!("{:?}", r.value),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a long-format table written by [`write_records`].
pub fn read_records<R: Read>(reader: R) -> Result<Vec<McRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["n", "rep", "probe", "metric", "value"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::invalid(format!(
            "results header must be {}, got {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid(format!("row {}: bad {what}", line + 1));
        out.push(McRecord {
            n: rec[0].parse().map_err(|_| bad("n"))?,
            rep: rec[1].parse().map_err(|_| bad("rep"))?,
            probe: rec[2].to_string(),
            metric: rec[3].to_string(),
            value: rec[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

pub fn read_records_path(path: impl AsRef<Path>) -> Result<Vec<McRecord>> {
    read_records(std::fs::File::open(path)?)
}

struct Cell {
    probe: String,
    metric: &'static str,
    outcome: std::result::Result<f64, String>,
}

fn run_replication(exp: &Experiment, id: &IdentifiedModel, n: usize, rep: usize) -> (Vec<Cell>, f64) {
    let start = Instant::now();
    let cells = replication_cells(exp, id, n, rep);
    (cells, start.elapsed().as_secs_f64())
}

fn replication_cells(exp: &Experiment, id: &IdentifiedModel, n: usize, rep: usize) -> Vec<Cell> {
    let fail_all = |msg: String| -> Vec<Cell> {
        exp.probes
            .iter()
            .map(|p| Cell {
                probe: p.label(),
                metric: p.metric(),
                outcome: Err(msg.clone()),
            })
            .collect()
    };
    let data = match simulate(&exp.model, n, exp.seed_base + rep as u64, exp.burn_in) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let config = match exp.fit_config(n) {
        Ok(c) => c,
        Err(e) => return fail_all(e.to_string()),
    };
    let est = match MarginalEstimator::new(&data, &config) {
        Ok(e) => e,
        Err(e) => return fail_all(e.to_string()),
    };
    let mut components: BTreeMap<usize, std::result::Result<_, String>> = BTreeMap::new();
    let mut component = |axis: usize| -> std::result::Result<crate::marginals::ComponentEstimate, String> {
        components
            .entry(axis)
            .or_insert_with(|| {
                if axis == 0 {
                    est.component_1()
                } else {
                    est.component_u(axis)
                }
                .map_err(|e| e.to_string())
            })
            .clone()
    };
    let mut link: Option<std::result::Result<LinkEstimate, String>> = None;
    let mut out = Vec::with_capacity(exp.probes.len());
    for probe in &exp.probes {
        let outcome = match *probe {
            Probe::Component { axis, x } => {
                if axis == 0 {
                    component(0).map(|c| c.eval(x) - id.component(0, x))
                } else {
                    est.partial_integral(axis, config.anchors[axis], x)
                        .map(|v| v - id.component(axis, x))
                        .map_err(|e| e.to_string())
                }
            }
            Probe::Uniform { axis } => component(axis).map(|c| {
                let truth: Vec<f64> = c.grid.iter().map(|&x| id.component(axis, x)).collect();
                uniform_error(&c.values, &truth)
            }),
            Probe::Link { v } => {
                let fitted = link.get_or_insert_with(|| {
                    est.estimate_all()
                        .and_then(|fit| LinkEstimate::fit(&data, &fit, &config))
                        .map_err(|e| e.to_string())
                });
                match fitted {
                    Ok(l) => match l.eval(v) {
                        Ok(g) if !g.flagged => Ok(g.value - id.link(v)),
                        Ok(_) => Err(format!("link value at {v} is flagged")),
                        Err(e) => Err(e.to_string()),
                    },
                    Err(e) => Err(e.clone()),
                }
            }
        };
        out.push(Cell {
            probe: probe.label(),
            metric: probe.metric(),
            outcome,
        });
    }
    out
}

/// Runs every `(n, replication)` pair. Replication `r` draws its data from
/// seed `seed_base + r` at every sample size. Results do not depend on the
/// thread count.
pub fn run_experiment(exp: &Experiment, threads: Option<usize>) -> Result<McResult> {
    exp.check()?;
    let id = exp.identified()?;
    let jobs: Vec<(usize, usize)> = exp
        .n_list
        .iter()
        .flat_map(|&n| (0..exp.replications).map(move |r| (n, r)))
        .collect();
    let work = || -> Vec<(Vec<Cell>, f64)> {
        jobs.par_iter()
            .map(|&(n, r)| run_replication(exp, &id, n, r))
            .collect()
    };
    let outputs = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut records = Vec::new();
    for &n in &exp.n_list {
        records.push(McRecord {
            n,
            rep: 0,
            probe: CONFIG_PROBE.into(),
            metric: METRIC_H.into(),
            value: exp.bandwidth(n),
        });
        if let Some(hg) = exp.link_bandwidth(n) {
            records.push(McRecord {
                n,
                rep: 0,
                probe: CONFIG_PROBE.into(),
                metric: METRIC_H_G.into(),
                value: hg,
            });
        }
        records.push(McRecord {
            n,
            rep: 0,
            probe: CONFIG_PROBE.into(),
            metric: METRIC_P.into(),
            value: exp.fit.p as f64,
        });
    }
    if exp.theory {
        let theory_cfg = TheoryConfig::new(exp.fit.p, exp.bounds()).with_anchors(exp.model.reference_anchors());
        let theory = Theory::new(&exp.model, theory_cfg)?;
        for probe in &exp.probes {
            if let Probe::Component { axis, x } = *probe {
                let s = theory.sigma_u_squared(axis, x)?.total();
                for &n in &exp.n_list {
                    records.push(McRecord {
                        n,
                        rep: 0,
                        probe: probe.label(),
                        metric: METRIC_SIGMA2.into(),
                        value: s,
                    });
                }
            }
        }
    }
    let mut cells = 0;
    let mut failures = 0;
    let mut failure_messages = Vec::new();
    for (&(n, rep), (row, runtime)) in jobs.iter().zip(outputs) {
        for cell in row {
            cells += 1;
            let value = match cell.outcome {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    failures += 1;
                    if failure_messages.len() < 10 {
                        failure_messages.push(format!("n={n} rep={rep} {}: non-finite {v}", cell.probe));
                    }
                    f64::NAN
                }
                Err(msg) => {
                    failures += 1;
                    if failure_messages.len() < 10 {
                        failure_messages.push(format!("n={n} rep={rep} {}: {msg}", cell.probe));
                    }
                    f64::NAN
                }
            };
            records.push(McRecord {
                n,
                rep,
                probe: cell.probe,
                metric: cell.metric.into(),
                value,
            });
        }
        records.push(McRecord {
            n,
            rep,
            probe: ALL_PROBE.into(),
            metric: METRIC_RUNTIME.into(),
            value: runtime,
        });
    }
    if failures as f64 >= MAX_FAILURE_SHARE * cells as f64 && failures > 0 {
        return Err(Error::ExperimentAborted { failed: failures, total: cells });
    }
    Ok(McResult {
        records,
        cells,
        failures,
        failure_messages,
    })
}

/// Least-squares line through `(log n, log rmse)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn rate_fit(n_list: &[usize], rmse: &[f64]) -> Result<RateFit> {
    if n_list.len() != rmse.len() {
        return Err(Error::invalid("sizes and errors differ in length"));
    }
    if n_list.len() < 3 {
        return Err(Error::invalid("a rate fit needs at least 3 sample sizes"));
    }
    if let Some(r) = rmse.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid(format!("errors must be positive and finite, got {r}")));
    }
    if n_list.contains(&0) {
        return Err(Error::invalid("sample sizes must be positive"));
    }
    let x: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = rmse.iter().map(|r| r.ln()).collect();
    let mx = mean(&x);
    let my = mean(&y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("sample sizes must not all be equal"));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JarqueBera {
    pub statistic: f64,
    pub p_value: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

/// `JB = (m/6)(S² + (K − 3)²/4)` with a `χ²₂` tail probability.
pub fn jarque_bera(samples: &[f64]) -> Result<JarqueBera> {
    let m = samples.len();
    if m < 20 {
        return Err(Error::invalid(format!("Jarque-Bera needs at least 20 samples, got {m}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let mu = mean(samples);
    let central = |k: i32| pairwise_sum(&samples.iter().map(|v| (v - mu).powi(k)).collect::<Vec<_>>()) / m as f64;
    let m2 = central(2);
    if !(m2 > 0.0) || m2 <= 1e-28 * mu.abs().max(1.0).powi(2) {
        return Err(Error::invalid("samples have zero variance"));
    }
    let skewness = central(3) / m2.powf(1.5);
    let kurtosis = central(4) / (m2 * m2);
    let statistic = m as f64 / 6.0 * (skewness * skewness + (kurtosis - 3.0).powi(2) / 4.0);
    let chi2 = ChiSquared::new(2.0).expect("valid chi-squared");
    Ok(JarqueBera {
        statistic,
        p_value: 1.0 - chi2.cdf(statistic),
        skewness,
        kurtosis,
    })
}

/// `max |estimate − truth|` over a grid.
pub fn uniform_error(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Aggregates of one probe at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub probe: String,
    pub metric: String,
    pub n: usize,
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub rmse: f64,
    pub median: f64,
    /// `mean / (sd / √count)`.
    pub t_stat: f64,
    /// Jarque–Bera on the studentized values, when there are enough.
    pub jb_p_value: Option<f64>,
    /// `var · n h / σ²` when both the bandwidth and `σ²` were recorded.
    pub variance_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub probe: String,
    pub metric: String,
    pub n_list: Vec<usize>,
    /// RMSE for point probes, median for sup-norm probes.
    pub values: Vec<f64>,
    pub fit: RateFit,
    pub theory_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub rates: Vec<RateRow>,
    pub failures: usize,
    pub total: usize,
}

/// Width of the acceptance band around theoretical slopes.
pub const RATE_BAND: f64 = 0.15;
/// Significance level of the normality check.
pub const NORMALITY_LEVEL: f64 = 0.01;
/// Allowed factor between Monte Carlo and asymptotic variance.
pub const VARIANCE_FACTOR: f64 = 1.5;

fn theory_slope(probe: &str, p: usize) -> f64 {
    if probe.starts_with('G') {
        -0.4
    } else {
        -(p as f64) / (2.0 * p as f64 + 1.0)
    }
}

/// Builds the per-cell aggregates and rate fits of a result table.
pub fn summarize(records: &[McRecord]) -> Result<Summary> {
    let data: Vec<&McRecord> = records
        .iter()
        .filter(|r| r.probe != CONFIG_PROBE && r.probe != ALL_PROBE && r.metric != METRIC_SIGMA2)
        .collect();
    if data.is_empty() {
        return Err(Error::invalid("results table has no probe rows"));
    }
    let config = |n: usize, metric: &str| {
        records
            .iter()
            .find(|r| r.n == n && r.probe == CONFIG_PROBE && r.metric == metric)
            .map(|r| r.value)
    };
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &data {
        let k = (r.probe.clone(), r.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut sizes: Vec<usize> = data.iter().map(|r| r.n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut cells = Vec::new();
    let mut rates = Vec::new();
    let failures = data.iter().filter(|r| r.failed()).count();
    for (probe, metric) in &keys {
        let mut row_n = Vec::new();
        let mut row_v = Vec::new();
        for &n in &sizes {
            let all: Vec<&&McRecord> = data
                .iter()
                .filter(|r| r.n == n && &r.probe == probe && &r.metric == metric)
                .collect();
            if all.is_empty() {
                continue;
            }
            let vals: Vec<f64> = all.iter().filter(|r| !r.failed()).map(|r| r.value).collect();
            let count = vals.len();
            let (mu, sd, rmse, med) = if count == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let mu = mean(&vals);
                let sd = if count > 1 {
                    (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
                } else {
                    f64::NAN
                };
                let rmse = (vals.iter().map(|v| v * v).sum::<f64>() / count as f64).sqrt();
                (mu, sd, rmse, median(&vals))
            };
            let jb_p_value = if metric == METRIC_ERROR && count >= 20 && sd > 0.0 {
                let studentized: Vec<f64> = vals.iter().map(|v| (v - mu) / sd).collect();
                jarque_bera(&studentized).ok().map(|j| j.p_value)
            } else {
                None
            };
            let sigma2 = records
                .iter()
                .find(|r| r.n == n && &r.probe == probe && r.metric == METRIC_SIGMA2)
                .map(|r| r.value);
            let variance_ratio = match (sigma2, config(n, METRIC_H)) {
                (Some(s), Some(h)) if s > 0.0 && count > 1 => Some(sd * sd * n as f64 * h / s),
                _ => None,
            };
            cells.push(CellSummary {
                probe: probe.clone(),
                metric: metric.clone(),
                n,
                count,
                failures: all.len() - count,
                mean: mu,
                std_dev: sd,
                rmse,
                median: med,
                t_stat: mu / (sd / (count as f64).sqrt()),
                jb_p_value,
                variance_ratio,
            });
            let v = if metric == METRIC_SUP { med } else { rmse };
            if v.is_finite() && v > 0.0 {
                row_n.push(n);
                row_v.push(v);
            }
        }
        if row_n.len() >= 3 {
            let p = config(row_n[0], METRIC_P).map(|v| v as usize).unwrap_or(2);
            rates.push(RateRow {
                probe: probe.clone(),
                metric: metric.clone(),
                fit: rate_fit(&row_n, &row_v)?,
                n_list: row_n,
                values: row_v,
                theory_slope: theory_slope(probe, p),
            });
        }
    }
    Ok(Summary {
        cells,
        rates,
        failures,
        total: data.len(),
    })
}

/// Outcome of one acceptance check in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Summary {
    /// Rate slopes within the band, normality at 1%, variance ratios within
    /// the allowed factor, and strictly decreasing median sup-norm errors.
    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        for r in &self.rates {
            let passed = (r.fit.slope - r.theory_slope).abs() <= RATE_BAND;
            out.push(Check {
                name: format!("rate {} {}", r.probe, r.metric),
                passed,
                detail: format!("slope {:.4} vs theory {:.4} ± {RATE_BAND}", r.fit.slope, r.theory_slope),
            });
        }
        for c in &self.cells {
            if let Some(p) = c.jb_p_value {
                out.push(Check {
                    name: format!("normality {} n={}", c.probe, c.n),
                    passed: p > NORMALITY_LEVEL,
                    detail: format!("Jarque-Bera p = {p:.4}"),
                });
            }
            if let Some(v) = c.variance_ratio {
                out.push(Check {
                    name: format!("variance {} n={}", c.probe, c.n),
                    passed: v >= 1.0 / VARIANCE_FACTOR && v <= VARIANCE_FACTOR,
                    detail: format!("MC var · nh / sigma^2 = {v:.4}"),
                });
            }
        }
        let mut sup_probes: Vec<&str> = self
            .cells
            .iter()
            .filter(|c| c.metric == METRIC_SUP)
            .map(|c| c.probe.as_str())
            .collect();
        sup_probes.dedup();
        for probe in sup_probes {
            let meds: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.metric == METRIC_SUP && c.probe == probe)
                .map(|c| c.median)
                .collect();
            let passed = meds.len() >= 2 && meds.windows(2).all(|w| w[1] < w[0]);
            out.push(Check {
                name: format!("uniform {probe}"),
                passed,
                detail: format!("median sup errors {meds:?}"),
            });
        }
        out
    }

    /// Rate, per-cell, and check tables as aligned text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rate table");
        let _ = writeln!(s, "{:<16} {:<10} {:>10} {:>10} {:>8} {:>8}", "probe", "metric", "slope", "intercept", "r2", "theory");
        for r in &self.rates {
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>10.4} {:>10.4} {:>8.4} {:>8.4}",
                r.probe, r.metric, r.fit.slope, r.fit.intercept, r.fit.r2, r.theory_slope
            );
        }
        let _ = writeln!(s, "\ncell table");
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:>7} {:>6} {:>5} {:>12} {:>12} {:>12} {:>8} {:>8} {:>8}",
            "probe", "metric", "n", "count", "fail", "mean", "sd", "rmse", "t", "jb_p", "var_ratio"
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>7} {:>6} {:>5} {:>12.5e} {:>12.5e} {:>12.5e} {:>8.3} {:>8} {:>8}",
                c.probe,
                c.metric,
                c.n,
                c.count,
                c.failures,
                c.mean,
                c.std_dev,
                c.rmse,
                c.t_stat,
                opt(c.jb_p_value),
                opt(c.variance_ratio)
            );
        }
        let _ = writeln!(s, "\nchecks");
        for c in self.checks() {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }

    /// Rate rows as CSV.
    pub fn rates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["probe", "metric", "slope", "intercept", "r2", "theory_slope"])?;
        for r in &self.rates {
            wtr.write_record([
                r.probe.clone(),
                r.metric.clone(),
                format!("{:?}", r.fit.slope),
                format!("{:?}", r.fit.intercept),
                format!("{:?}", r.fit.r2),
                format!("{:?}", r.theory_slope),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Per-cell rows as CSV; empty fields where a statistic is unavailable.
    pub fn cells_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "probe", "metric", "n", "count", "failures", "mean", "sd", "rmse", "t_stat", "jb_p_value", "variance_ratio",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for c in &self.cells {
            wtr.write_record([
                c.probe.clone(),
                c.metric.clone(),
                c.n.to_string(),
                c.count.to_string(),
                c.failures.to_string(),
                format!("{:?}", c.mean),
                format!("{:?}", c.std_dev),
                format!("{:?}", c.rmse),
                format!("{:?}", c.t_stat),
                opt(c.jb_p_value),
                opt(c.variance_ratio),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
