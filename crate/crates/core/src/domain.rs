//! Data, configuration, and validation types shared across the pipeline.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::basis::MultiIndexBasis;
use crate::error::{Error, Result};
use crate::lpq::SolverOptions;
use crate::numerics::quantile;

/// Ordered sample of covariate rows and responses. Row order is time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    ordered: bool,
}

impl Dataset {
    /// `x` is row-major with `d` columns.
    pub fn new(x: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!("need at least 2 covariates, got {d}")));
        }
        if y.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if x.len() != y.len() * d {
            return Err(Error::invalid(format!(
                "covariate matrix has {} entries, expected {} x {}",
                x.len(),
                y.len(),
                d
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset {
            d,
            x,
            y,
            ordered: true,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged covariate rows"));
        }
        Dataset::new(rows.concat(), y, d)
    }

    pub fn with_ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ordered(&self) -> bool {
        self.ordered
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[i * self.d + k]).collect()
    }

    /// Reads the `x1,...,xd,y` CSV layout.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 3 {
            return Err(Error::invalid("dataset CSV needs columns x1,...,xd,y with d >= 2"));
        }
        let d = cols - 1;
        for (k, name) in headers.iter().enumerate() {
            let expected = if k == d {
                "y".to_string()
            } else {
                format!("x{}", k + 1)
            };
            if name != expected {
                return Err(Error::invalid(format!(
                    "unexpected CSV header {name:?} in column {}, expected {expected:?}",
                    k + 1
                )));
            }
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::invalid(format!("row {} has {} fields", line + 1, rec.len())));
            }
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::invalid(format!("row {}: cannot parse {field:?}", line + 1))
                })?;
                if k == d {
                    y.push(v);
                } else {
                    x.push(v);
                }
            }
        }
        Dataset::new(x, y, d)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.d).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }
}

/// Rectangular estimation region `Π [a_k, b_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl EstimationBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = EstimationBox { lower, upper };
        b.check()?;
        Ok(b)
    }

    pub fn unit(d: usize) -> Self {
        EstimationBox {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    /// Same interval on every axis.
    pub fn cube(d: usize, a: f64, b: f64) -> Result<Self> {
        EstimationBox::new(vec![a; d], vec![b; d])
    }

    pub fn check(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::invalid("box bounds have mismatched lengths"));
        }
        for (k, (a, b)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::invalid(format!("box axis {} has a >= b ({a}, {b})", k + 1)));
            }
        }
        Ok(())
    }

    /// Per-coordinate empirical `[5%, 95%]` quantile box.
    pub fn from_data(data: &Dataset) -> Result<Self> {
        let mut lower = Vec::with_capacity(data.d());
        let mut upper = Vec::with_capacity(data.d());
        for k in 0..data.d() {
            let col = data.column(k);
            lower.push(quantile(&col, 0.05));
            upper.push(quantile(&col, 0.95));
        }
        EstimationBox::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// Membership over a subset of axes.
    pub fn contains_axes(&self, x: &[f64], axes: &[usize]) -> bool {
        axes.iter()
            .all(|&k| self.lower[k] <= x[k] && x[k] <= self.upper[k])
    }
}

/// Quantile level. `alpha` follows the check-function convention
/// `ρ(y) = |y| + (2α − 1) y`; the fitted conditional quantile is the
/// `tau = 1 − alpha` quantile in the usual `F(q | x) = tau` sense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileLevel {
    alpha: f64,
    tau: f64,
}

impl QuantileLevel {
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(QuantileLevel {
            alpha,
            tau: 1.0 - alpha,
        })
    }

    /// `tau` is rounded through `alpha = 1 − tau` so that `tau == 1 − alpha` holds.
    pub fn from_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
        }
        QuantileLevel::from_alpha(1.0 - tau)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `α (1 − α)`, symmetric in the two conventions.
    pub fn binomial_variance(&self) -> f64 {
        self.alpha * (1.0 - self.alpha)
    }
}

#[derive(Serialize, Deserialize)]
struct LevelRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
}

impl Serialize for QuantileLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LevelRepr {
            alpha: Some(self.alpha),
            tau: Some(self.tau),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantileLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = LevelRepr::deserialize(d)?;
        let level = match (repr.alpha, repr.tau) {
            (Some(a), None) => QuantileLevel::from_alpha(a),
            (None, Some(t)) => QuantileLevel::from_tau(t),
            (Some(a), Some(t)) => {
                let l = QuantileLevel::from_alpha(a);
                match l {
                    Ok(l) if (l.tau - t).abs() > 1e-12 => Err(Error::invalid(format!(
                        "level has alpha = {a} and tau = {t}, but tau must equal 1 - alpha"
                    ))),
                    other => other,
                }
            }
            (None, None) => Err(Error::invalid("level needs alpha or tau")),
        };
        level.map_err(D::Error::custom)
    }
}

pub const DEFAULT_QUAD_NODES: usize = 16;
pub const DEFAULT_GRID_POINTS: usize = 17;

/// Fully resolved fit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub p: usize,
    pub h: f64,
    /// Link bandwidth; `None` selects `sd(q̂₀) · n^{-1/5}` at fit time.
    pub h_g: Option<f64>,
    pub level: QuantileLevel,
    #[serde(rename = "box")]
    pub bounds: EstimationBox,
    pub anchors: Vec<f64>,
    pub quad_nodes: usize,
    pub solver: SolverOptions,
    /// Equispaced evaluation points per component (the anchor is always added).
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_quad_nodes() -> usize {
    DEFAULT_QUAD_NODES
}

impl FitConfig {
    /// Config with midpoint anchors and default numerics.
    pub fn new(p: usize, h: f64, level: QuantileLevel, bounds: EstimationBox) -> Self {
        let anchors = bounds.midpoint();
        FitConfig {
            p,
            h,
            h_g: None,
            level,
            bounds,
            anchors,
            quad_nodes: DEFAULT_QUAD_NODES,
            solver: SolverOptions::default(),
            grid_points: DEFAULT_GRID_POINTS,
        }
    }

    pub fn with_anchors(mut self, anchors: Vec<f64>) -> Self {
        self.anchors = anchors;
        self
    }

    pub fn with_h_g(mut self, h_g: f64) -> Self {
        self.h_g = Some(h_g);
        self
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn basis(&self) -> MultiIndexBasis {
        MultiIndexBasis::new(self.dim(), self.p)
    }

    /// Checks invariants that do not depend on data.
    pub fn check(&self) -> Result<()> {
        self.bounds.check()?;
        let d = self.dim();
        if self.p < 2 {
            return Err(Error::invalid(format!("polynomial order p must be >= 2, got {}", self.p)));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::invalid(format!("bandwidth h must be finite and positive, got {}", self.h)));
        }
        if let Some(hg) = self.h_g {
            if !(hg.is_finite() && hg > 0.0) {
                return Err(Error::invalid(format!("link bandwidth h_g must be finite and positive, got {hg}")));
            }
        }
        if self.anchors.len() != d {
            return Err(Error::invalid(format!("expected {d} anchors, got {}", self.anchors.len())));
        }
        for (k, &x0) in self.anchors.iter().enumerate() {
            let (a, b) = (self.bounds.lower[k], self.bounds.upper[k]);
            if !(a < x0 && x0 < b) {
                return Err(Error::invalid(format!(
                    "anchor {} = {x0} is not strictly inside [{a}, {b}]",
                    k + 1
                )));
            }
        }
        if self.quad_nodes < 4 {
            return Err(Error::invalid(format!("quad_nodes must be >= 4, got {}", self.quad_nodes)));
        }
        if self.grid_points < 2 {
            return Err(Error::invalid("grid_points must be >= 2"));
        }
        self.solver.check()?;
        Ok(())
    }
}

/// On-disk form of [`FitConfig`]: `box` and `anchors` may be omitted and are
/// then derived from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfigFile {
    pub p: usize,
    pub h: f64,
    #[serde(default)]
    pub h_g: Option<f64>,
    pub level: QuantileLevel,
    #[serde(rename = "box", default)]
    pub bounds: Option<EstimationBox>,
    #[serde(default)]
    pub anchors: Option<Vec<f64>>,
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: usize,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl FitConfigFile {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        FitConfigFile::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Fills defaults (quantile box, midpoint anchors) from `data` and checks the result.
    pub fn resolve(&self, data: &Dataset) -> Result<FitConfig> {
        let bounds = match &self.bounds {
            Some(b) => b.clone(),
            None => EstimationBox::from_data(data)?,
        };
        let anchors = self.anchors.clone().unwrap_or_else(|| bounds.midpoint());
        let cfg = FitConfig {
            p: self.p,
            h: self.h,
            h_g: self.h_g,
            level: self.level,
            bounds,
            anchors,
            quad_nodes: self.quad_nodes,
            solver: self.solver.clone(),
            grid_points: self.grid_points,
        };
        cfg.check()?;
        if cfg.dim() != data.d() {
            return Err(Error::invalid(format!(
                "config has {} axes but data has {}",
                cfg.dim(),
                data.d()
            )));
        }
        Ok(cfg)
    }
}

impl From<&FitConfig> for FitConfigFile {
    fn from(c: &FitConfig) -> Self {
        FitConfigFile {
            p: c.p,
            h: c.h,
            h_g: c.h_g,
            level: c.level,
            bounds: Some(c.bounds.clone()),
            anchors: Some(c.anchors.clone()),
            quad_nodes: c.quad_nodes,
            solver: c.solver.clone(),
            grid_points: c.grid_points,
        }
    }
}

/// Advisory findings from [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Window as wide as the estimation region.
    Oversmoothed { h: f64, width: f64 },
    /// Bandwidth far from the `n^{-1/(2p+1)}` scale.
    BandwidthScale { h: f64, reference: f64 },
    /// Too few points in a typical window to fit the local polynomial.
    SparseWindow { points: usize, needed: usize },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::Oversmoothed { h, width } => {
                write!(f, "oversmoothed: h = {h} is at least the box width {width}")
            }
            Warning::BandwidthScale { h, reference } => write!(
                f,
                "bandwidth h = {h} is far from the n^(-1/(2p+1)) scale {reference:.4}"
            ),
            Warning::SparseWindow { points, needed } => write!(
                f,
                "sparse window: {points} points near the anchor, need at least {needed}"
            ),
        }
    }
}

/// Checks `config` against `data`: hard errors for invariant violations,
/// warnings for bandwidth choices that look off.
pub fn validate(config: &FitConfig, data: &Dataset) -> Result<Vec<Warning>> {
    config.check()?;
    if config.dim() != data.d() {
        return Err(Error::invalid(format!(
            "config has {} axes but data has {}",
            config.dim(),
            data.d()
        )));
    }
    let mut warnings = Vec::new();
    let d = data.d();
    let n = data.n() as f64;
    let max_width = (0..d).map(|k| config.bounds.width(k)).fold(0.0, f64::max);
    let mean_width = (0..d).map(|k| config.bounds.width(k)).sum::<f64>() / d as f64;
    if config.h >= max_width {
        warnings.push(Warning::Oversmoothed {
            h: config.h,
            width: max_width,
        });
    } else {
        let reference = mean_width * n.powf(-1.0 / (2.0 * config.p as f64 + 1.0));
        let ratio = config.h / reference;
        if !(0.25..=4.0).contains(&ratio) {
            warnings.push(Warning::BandwidthScale {
                h: config.h,
                reference,
            });
        }
    }
    let needed = config.basis().len() + 1;
    let center = &config.anchors;
    let h2 = config.h * config.h;
    let points = (0..data.n())
        .filter(|&i| {
            data.row(i)
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                < h2
        })
        .count();
    if points < needed {
        warnings.push(Warning::SparseWindow { points, needed });
    }
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_data(n_side: usize) -> Dataset {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                let a = (i as f64 + 0.5) / n_side as f64;
                let b = (j as f64 + 0.5) / n_side as f64;
                rows.push(vec![a, b]);
                y.push(a + b);
            }
        }
        Dataset::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        assert!(Dataset::new(vec![1.0], vec![1.0], 1).is_err());
        assert!(Dataset::new(vec![], vec![], 2).is_err());
        assert!(Dataset::new(vec![1.0, 2.0, 3.0], vec![1.0], 2).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], vec![1.0], 2).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_bits() {
        let data = Dataset::new(vec![0.1, 0.2, 1.0 / 3.0, -4e-300], vec![0.7, 1e10], 2).unwrap();
        let mut buf = Vec::new();
        data.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y\n"));
        let back = Dataset::from_csv_reader(&buf[..]).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let err = Dataset::from_csv_reader("a,b,y\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        assert!(Dataset::from_csv_reader("x1,y\n1,2\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_reader("x1,x2,y\n1,2\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_reader("x1,x2,y\n".as_bytes()).is_err());
    }

    #[test]
    fn level_conventions() {
        let l = QuantileLevel::from_alpha(0.25).unwrap();
        assert_eq!(l.tau(), 0.75);
        let l = QuantileLevel::from_tau(0.1).unwrap();
        assert_eq!(l.tau(), 1.0 - l.alpha());
        assert!(QuantileLevel::from_alpha(1.0).is_err());
        let parsed: QuantileLevel = serde_json::from_str(r#"{"tau":0.25}"#).unwrap();
        assert_eq!(parsed.alpha(), 0.75);
        assert!(serde_json::from_str::<QuantileLevel>(r#"{"alpha":0.5,"tau":0.4}"#).is_err());
        assert!(serde_json::from_str::<QuantileLevel>(r#"{}"#).is_err());
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.contains("alpha") && json.contains("tau"));
    }

    #[test]
    fn anchors_on_boundary_are_rejected() {
        let data = grid_data(10);
        let level = QuantileLevel::from_tau(0.5).unwrap();
        let cfg = FitConfig::new(2, 0.3, level, EstimationBox::unit(2)).with_anchors(vec![0.0, 0.5]);
        assert!(validate(&cfg, &data).is_err());
        let cfg = cfg.with_anchors(vec![0.5, 1.0]);
        assert!(validate(&cfg, &data).is_err());
    }

    #[test]
    fn reference_bandwidth_gives_no_warning() {
        let n_side = 32; // n = 1024, close to 1000
        let data = grid_data(n_side);
        let h = (data.n() as f64).powf(-0.2);
        let level = QuantileLevel::from_tau(0.5).unwrap();
        let cfg = FitConfig::new(2, h, level, EstimationBox::unit(2));
        let w = validate(&cfg, &data).unwrap();
        assert!(w.is_empty(), "{w:?}");
    }

    #[test]
    fn huge_bandwidth_is_oversmoothed() {
        let data = grid_data(10);
        let level = QuantileLevel::from_tau(0.5).unwrap();
        let cfg = FitConfig::new(2, 10.0, level, EstimationBox::unit(2));
        let w = validate(&cfg, &data).unwrap();
        assert!(w.iter().any(|w| matches!(w, Warning::Oversmoothed { .. })));
        assert!(w[0].to_string().contains("oversmoothed"));
    }

    #[test]
    fn tiny_bandwidth_warns_sparse() {
        let data = grid_data(10);
        let level = QuantileLevel::from_tau(0.5).unwrap();
        let cfg = FitConfig::new(2, 0.01, level, EstimationBox::unit(2));
        let w = validate(&cfg, &data).unwrap();
        assert!(w.iter().any(|w| matches!(w, Warning::SparseWindow { .. })));
    }

    #[test]
    fn config_file_defaults_resolve_from_data() {
        let data = grid_data(20);
        let file = FitConfigFile::from_json_str(r#"{"p":2,"h":0.3,"level":{"alpha":0.5}}"#).unwrap();
        let cfg = file.resolve(&data).unwrap();
        assert!(cfg.bounds.lower[0] > 0.0 && cfg.bounds.upper[0] < 1.0);
        assert_eq!(cfg.anchors, cfg.bounds.midpoint());
        assert_eq!(cfg.quad_nodes, DEFAULT_QUAD_NODES);
        assert!(FitConfigFile::from_json_str(r#"{"p":2,"h":0.3,"level":{"alpha":0.5},"bogus":1}"#).is_err());
    }
}
