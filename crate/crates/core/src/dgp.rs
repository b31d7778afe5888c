//! Synthetic data with known ground truth: stationary Gaussian-copula VAR(1)
//! covariates, analytic components and links, and error laws whose quantile
//! at the target level is exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::domain::{Dataset, EstimationBox, QuantileLevel};
use crate::error::{Error, Result};
use crate::marginals::WeightFn;
use crate::numerics::{cholesky_solve, GaussLegendre};

/// Minimum burn-in for [`simulate`].
pub const MIN_BURN_IN: usize = 200;

/// Value and first three derivatives.
pub type Jet = [f64; 4];

/// Univariate additive component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    /// `slope · x + intercept`.
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// `slope · x + amplitude · sin(2π · frequency · x + phase)`.
    SineBump {
        #[serde(default)]
        slope: f64,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `Σ_k coefficients[k] · x^k` for `k ≤ 3`.
    Cubic { coefficients: [f64; 4] },
    /// `ln(inner(x))`; `inner` must stay positive.
    Log { inner: Box<Component> },
    /// `scale · inner(x) + shift`.
    Affine {
        scale: f64,
        shift: f64,
        inner: Box<Component>,
    },
}

impl Component {
    pub fn jet(&self, x: f64) -> Jet {
        match self {
            Component::Linear { slope, intercept } => [slope * x + intercept, *slope, 0.0, 0.0],
            Component::SineBump {
                slope,
                amplitude,
                frequency,
                phase,
            } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                let (s, c) = (w * x + phase).sin_cos();
                [
                    slope * x + amplitude * s,
                    slope + amplitude * w * c,
                    -amplitude * w * w * s,
                    -amplitude * w * w * w * c,
                ]
            }
            Component::Cubic { coefficients: c } => [
                c[0] + x * (c[1] + x * (c[2] + x * c[3])),
                c[1] + x * (2.0 * c[2] + 3.0 * c[3] * x),
                2.0 * c[2] + 6.0 * c[3] * x,
                6.0 * c[3],
            ],
            Component::Log { inner } => {
                let [f, f1, f2, f3] = inner.jet(x);
                let r1 = f1 / f;
                [
                    f.ln(),
                    r1,
                    f2 / f - r1 * r1,
                    f3 / f - 3.0 * f1 * f2 / (f * f) + 2.0 * r1 * r1 * r1,
                ]
            }
            Component::Affine { scale, shift, inner } => {
                let [f, f1, f2, f3] = inner.jet(x);
                [scale * f + shift, scale * f1, scale * f2, scale * f3]
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Component::Affine { scale, shift, inner } => scale * inner.value(x) + shift,
            Component::Log { inner } => inner.value(x).ln(),
            _ => self.jet(x)[0],
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.jet(x)[1]
    }
}

/// Link function `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Link {
    Identity,
    Exp,
    /// `scale / (1 + exp(−rate · v))`.
    Logistic { scale: f64, rate: f64 },
    /// `outer(exp(v))`: a multiplicative model written additively.
    ExpComposite { outer: Box<Link> },
    /// `inner(scale · v + shift)`.
    Affine {
        scale: f64,
        shift: f64,
        inner: Box<Link>,
    },
}

impl Link {
    pub fn jet(&self, v: f64) -> Jet {
        match self {
            Link::Identity => [v, 1.0, 0.0, 0.0],
            Link::Exp => {
                let e = v.exp();
                [e, e, e, e]
            }
            Link::Logistic { scale, rate } => {
                let s = 1.0 / (1.0 + (-rate * v).exp());
                let d1 = s * (1.0 - s);
                let d2 = d1 * (1.0 - 2.0 * s);
                let d3 = d1 * (1.0 - 6.0 * s + 6.0 * s * s);
                [
                    scale * s,
                    scale * rate * d1,
                    scale * rate * rate * d2,
                    scale * rate * rate * rate * d3,
                ]
            }
            Link::ExpComposite { outer } => {
                let e = v.exp();
                let [g, g1, g2, g3] = outer.jet(e);
                [
                    g,
                    g1 * e,
                    g2 * e * e + g1 * e,
                    g3 * e * e * e + 3.0 * g2 * e * e + g1 * e,
                ]
            }
            Link::Affine { scale, shift, inner } => {
                let [g, g1, g2, g3] = inner.jet(scale * v + shift);
                [g, scale * g1, scale * scale * g2, scale * scale * scale * g3]
            }
        }
    }

    pub fn value(&self, v: f64) -> f64 {
        match self {
            Link::Identity => v,
            Link::Exp => v.exp(),
            Link::ExpComposite { outer } => outer.value(v.exp()),
            Link::Affine { scale, shift, inner } => inner.value(scale * v + shift),
            Link::Logistic { .. } => self.jet(v)[0],
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        self.jet(v)[1]
    }
}

/// Law of the additive error, shifted so its quantile at the model level is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorLaw {
    /// `σ (Z − Φ⁻¹(τ))`.
    Gaussian { sigma: f64 },
    /// `scale (T − t⁻¹(τ))` with three degrees of freedom.
    StudentT3 { scale: f64 },
    /// No noise.
    None,
}

impl ErrorLaw {
    fn check(&self) -> Result<()> {
        let s = match self {
            ErrorLaw::Gaussian { sigma } => *sigma,
            ErrorLaw::StudentT3 { scale } => *scale,
            ErrorLaw::None => return Ok(()),
        };
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("error scale must be finite and positive"));
        }
        Ok(())
    }

    fn t3() -> StudentsT {
        StudentsT::new(0.0, 1.0, 3.0).expect("valid t distribution")
    }

    /// Location offset `Φ⁻¹(τ)` (or the t analogue) of the unscaled law.
    fn offset(&self, tau: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { .. } => Normal::standard().inverse_cdf(tau),
            ErrorLaw::StudentT3 { .. } => Self::t3().inverse_cdf(tau),
            ErrorLaw::None => 0.0,
        }
    }

    /// Density of the shifted error at `e`; infinite at 0 for the noiseless law.
    pub fn density(&self, e: f64, tau: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => Normal::standard().pdf(e / sigma + self.offset(tau)) / sigma,
            ErrorLaw::StudentT3 { scale } => Self::t3().pdf(e / scale + self.offset(tau)) / scale,
            ErrorLaw::None => {
                if e == 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of [`ErrorLaw::density`] in `e`.
    pub fn density_derivative(&self, e: f64, tau: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => {
                let z = e / sigma + self.offset(tau);
                -z * Normal::standard().pdf(z) / (sigma * sigma)
            }
            ErrorLaw::StudentT3 { scale } => {
                let z = e / scale + self.offset(tau);
                // d/dz of the t3 density: −4z/(3 + z²) · f(z)
                -4.0 * z / (3.0 + z * z) * Self::t3().pdf(z) / (scale * scale)
            }
            ErrorLaw::None => 0.0,
        }
    }

    pub fn cdf(&self, e: f64, tau: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => Normal::standard().cdf(e / sigma + self.offset(tau)),
            ErrorLaw::StudentT3 { scale } => Self::t3().cdf(e / scale + self.offset(tau)),
            ErrorLaw::None => {
                if e >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Latent Gaussian VAR(1) with diagonal coefficients and equicorrelated
/// innovations, normalized to unit stationary variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateProcess {
    /// Autoregressive coefficient per covariate.
    pub phi: Vec<f64>,
    /// Innovation cross-correlation.
    #[serde(default)]
    pub rho: f64,
}

impl CovariateProcess {
    pub fn independent(d: usize) -> Self {
        CovariateProcess {
            phi: vec![0.0; d],
            rho: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    /// Innovation covariance, row-major.
    pub fn innovation_cov(&self) -> Vec<f64> {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        for k in 0..d {
            for l in 0..d {
                let c = if k == l { 1.0 } else { self.rho };
                s[k * d + l] = c * ((1.0 - self.phi[k].powi(2)) * (1.0 - self.phi[l].powi(2))).sqrt();
            }
        }
        s
    }

    /// Stationary covariance (a correlation matrix), row-major.
    pub fn stationary_corr(&self) -> Vec<f64> {
        let d = self.dim();
        let s = self.innovation_cov();
        let mut r = vec![0.0; d * d];
        for k in 0..d {
            for l in 0..d {
                r[k * d + l] = s[k * d + l] / (1.0 - self.phi[k] * self.phi[l]);
            }
        }
        r
    }

    fn check(&self) -> Result<()> {
        if let Some(p) = self.phi.iter().find(|p| !(p.abs() < 1.0)) {
            return Err(Error::invalid(format!("AR coefficient {p} makes the process non-stationary")));
        }
        let d = self.dim();
        if d >= 2 && !(self.rho > -1.0 / (d as f64 - 1.0) && self.rho < 1.0) {
            return Err(Error::invalid(format!("cross-correlation {} is not admissible", self.rho)));
        }
        Ok(())
    }
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::invalid("covariance is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Data-generating model `Y = G(Σ_u q_u(X_u)) + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueModel {
    pub link: Link,
    pub components: Vec<Component>,
    pub error: ErrorLaw,
    pub level: QuantileLevel,
    pub covariates: CovariateProcess,
    /// Region used for identification; defaults to `[0.1, 0.9]^d`.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<EstimationBox>,
    /// Anchors used for identification; default to the box midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<f64>>,
}

impl TrueModel {
    pub fn new(link: Link, components: Vec<Component>, error: ErrorLaw, level: QuantileLevel) -> Self {
        let d = components.len();
        TrueModel {
            link,
            components,
            error,
            level,
            covariates: CovariateProcess::independent(d),
            bounds: None,
            anchors: None,
        }
    }

    /// `outer(Π_u factors_u(x_u))` rewritten as `(outer ∘ exp)(Σ_u ln factors_u(x_u))`.
    pub fn multiplicative(outer: Link, factors: Vec<Component>, error: ErrorLaw, level: QuantileLevel) -> Self {
        let components = factors
            .into_iter()
            .map(|f| Component::Log { inner: Box::new(f) })
            .collect();
        TrueModel::new(
            Link::ExpComposite {
                outer: Box::new(outer),
            },
            components,
            error,
            level,
        )
    }

    pub fn with_covariates(mut self, covariates: CovariateProcess) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: TrueModel = serde_json::from_str(s)?;
        m.check()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        TrueModel::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if d < 2 {
            return Err(Error::invalid("model needs at least two components"));
        }
        if self.covariates.dim() != d {
            return Err(Error::invalid(format!(
                "covariate process has {} coordinates for {d} components",
                self.covariates.dim()
            )));
        }
        self.covariates.check()?;
        self.error.check()?;
        if let Some(b) = &self.bounds {
            b.check()?;
            if b.dim() != d {
                return Err(Error::invalid("model box dimension mismatch"));
            }
        }
        if let Some(a) = &self.anchors {
            if a.len() != d {
                return Err(Error::invalid("model anchors dimension mismatch"));
            }
        }
        Ok(())
    }

    pub fn reference_box(&self) -> EstimationBox {
        self.bounds
            .clone()
            .unwrap_or_else(|| EstimationBox::cube(self.dim(), 0.1, 0.9).expect("valid cube"))
    }

    pub fn reference_anchors(&self) -> Vec<f64> {
        self.anchors.clone().unwrap_or_else(|| self.reference_box().midpoint())
    }

    /// `Σ_u q_u(x_u)`.
    pub fn index(&self, x: &[f64]) -> f64 {
        self.components.iter().zip(x).map(|(c, &v)| c.value(v)).sum()
    }

    /// Joint density of the stationary covariates at `x ∈ (0,1)^d`.
    pub fn covariate_density(&self, x: &[f64]) -> f64 {
        let axes: Vec<usize> = (0..self.dim()).collect();
        copula_density(&self.covariates.stationary_corr(), self.dim(), &axes, x).0
    }

    /// Joint density and its gradient.
    pub fn covariate_density_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let axes: Vec<usize> = (0..self.dim()).collect();
        copula_density(&self.covariates.stationary_corr(), self.dim(), &axes, x)
    }

    /// Marginal density of the coordinates in `axes` at `x_axes`.
    pub fn marginal_density(&self, axes: &[usize], x_axes: &[f64]) -> f64 {
        if axes.is_empty() {
            return 1.0;
        }
        copula_density(&self.covariates.stationary_corr(), self.dim(), axes, x_axes).0
    }

    /// Conditional density of `ε` at 0, the same for every `x`.
    pub fn error_density_at_zero(&self) -> f64 {
        self.error.density(0.0, self.level.tau())
    }
}

/// Gaussian-copula density with uniform marginals over the coordinates
/// `axes` of a correlation matrix `r`, and its gradient in those coordinates.
fn copula_density(r: &[f64], d: usize, axes: &[usize], x: &[f64]) -> (f64, Vec<f64>) {
    let k = axes.len();
    if x.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return (0.0, vec![0.0; k]);
    }
    let mut sub = vec![0.0; k * k];
    for (i, &a) in axes.iter().enumerate() {
        for (j, &b) in axes.iter().enumerate() {
            sub[i * k + j] = r[a * d + b];
        }
    }
    let normal = Normal::standard();
    let z: Vec<f64> = x.iter().map(|&v| normal.inverse_cdf(v)).collect();
    let rinv_z = cholesky_solve(&sub, &z, k).expect("correlation matrix is positive definite");
    let l = cholesky(&sub, k).expect("correlation matrix is positive definite");
    let det: f64 = (0..k).map(|i| l[i * k + i] * l[i * k + i]).product();
    // zᵀ(R⁻¹ − I)z
    let quad: f64 = z.iter().zip(&rinv_z).map(|(a, b)| a * b).sum::<f64>() - z.iter().map(|a| a * a).sum::<f64>();
    let p = (-0.5 * quad).exp() / det.sqrt();
    let grad = (0..k)
        .map(|i| p * -(rinv_z[i] - z[i]) / normal.pdf(z[i]))
        .collect();
    (p, grad)
}

/// `count` independent draws from the stationary covariate law.
pub fn sample_stationary(model: &TrueModel, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    model.check()?;
    let d = model.dim();
    let l = cholesky(&model.covariates.stationary_corr(), d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::standard();
    Ok((0..count)
        .map(|_| {
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..d)
                .map(|i| normal.cdf((0..=i).map(|j| l[i * d + j] * e[j]).sum()))
                .collect()
        })
        .collect())
}

/// Draws `n` observations after `burn_in` steps from the stationary start.
///
/// Covariates and errors come from separate streams of one seeded generator,
/// so the covariate path does not depend on the error law.
pub fn simulate(model: &TrueModel, n: usize, seed: u64, burn_in: usize) -> Result<Dataset> {
    model.check()?;
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if burn_in < MIN_BURN_IN {
        return Err(Error::invalid(format!("burn-in must be at least {MIN_BURN_IN}")));
    }
    let d = model.dim();
    let phi = &model.covariates.phi;
    let l_stat = cholesky(&model.covariates.stationary_corr(), d)?;
    let l_innov = cholesky(&model.covariates.innovation_cov(), d)?;
    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(0);
    let mut error_rng = ChaCha8Rng::seed_from_u64(seed);
    error_rng.set_stream(1);
    let draw = |rng: &mut ChaCha8Rng, l: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d).map(|i| (0..=i).map(|j| l[i * d + j] * e[j]).sum()).collect()
    };
    let mut z = draw(&mut latent_rng, &l_stat);
    let normal = Normal::standard();
    let tau = model.level.tau();
    let offset = model.error.offset(tau);
    let t3 = StudentT::new(3.0).expect("valid t distribution");
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for t in 0..burn_in + n {
        let eta = draw(&mut latent_rng, &l_innov);
        for k in 0..d {
            z[k] = phi[k] * z[k] + eta[k];
        }
        if t < burn_in {
            continue;
        }
        let row: Vec<f64> = z.iter().map(|&v| normal.cdf(v)).collect();
        let eps = match model.error {
            ErrorLaw::Gaussian { sigma } => {
                let e: f64 = StandardNormal.sample(&mut error_rng);
                sigma * (e - offset)
            }
            ErrorLaw::StudentT3 { scale } => scale * (t3.sample(&mut error_rng) - offset),
            ErrorLaw::None => 0.0,
        };
        y.push(model.link.value(model.index(&row)) + eps);
        x.extend(row);
    }
    Dataset::new(x, y, d)
}

/// A model rewritten so that `q_k(x_{k,0}) = 0` and `∫ w₁ / q₁′ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedModel {
    pub model: TrueModel,
    /// Scale applied to the raw components.
    pub gamma: f64,
    pub weight: WeightFn,
    pub anchors: Vec<f64>,
}

impl IdentifiedModel {
    pub fn component(&self, axis: usize, x: f64) -> f64 {
        self.model.components[axis].value(x)
    }

    pub fn link(&self, v: f64) -> f64 {
        self.model.link.value(v)
    }

    pub fn quantile(&self, x: &[f64]) -> f64 {
        true_quantile(&self.model, x)
    }

    /// `∫ w₁ / q₁′` under the identified components.
    pub fn scale_constraint(&self) -> f64 {
        scale_integral(&self.model.components[0], &self.weight)
    }
}

fn scale_integral(first: &Component, w1: &WeightFn) -> f64 {
    GaussLegendre::new(64).integrate(w1.a, w1.b, |t| w1.eval(t) / first.derivative(t))
}

/// Rescales and shifts the components, compensating in the link.
pub fn identify_normalize(model: &TrueModel, w1: &WeightFn, anchors: &[f64]) -> Result<IdentifiedModel> {
    model.check()?;
    if anchors.len() != model.dim() {
        return Err(Error::invalid("one anchor per component is required"));
    }
    let first = &model.components[0];
    let probes = 2000;
    let mut sign = 0.0;
    for i in 0..=probes {
        let t = w1.a + (w1.b - w1.a) * i as f64 / probes as f64;
        let s = first.derivative(t).signum();
        if first.derivative(t) == 0.0 || (sign != 0.0 && s != sign) {
            return Err(Error::invalid(format!(
                "the first component's derivative vanishes or changes sign near {t}"
            )));
        }
        sign = s;
    }
    let gamma = scale_integral(first, w1);
    let shifts: Vec<f64> = model
        .components
        .iter()
        .zip(anchors)
        .map(|(c, &x0)| c.value(x0))
        .collect();
    let components = model
        .components
        .iter()
        .zip(&shifts)
        .map(|(c, &s)| Component::Affine {
            scale: gamma,
            shift: -gamma * s,
            inner: Box::new(c.clone()),
        })
        .collect();
    let link = Link::Affine {
        scale: 1.0 / gamma,
        shift: shifts.iter().sum(),
        inner: Box::new(model.link.clone()),
    };
    Ok(IdentifiedModel {
        model: TrueModel {
            link,
            components,
            ..model.clone()
        },
        gamma,
        weight: *w1,
        anchors: anchors.to_vec(),
    })
}

/// Identification over the model's reference box and anchors.
pub fn identify_reference(model: &TrueModel) -> Result<IdentifiedModel> {
    let b = model.reference_box();
    let w1 = WeightFn::new(b.lower[0], b.upper[0])?;
    identify_normalize(model, &w1, &model.reference_anchors())
}

/// `G(Σ_u q_u(x_u))`.
pub fn true_quantile(model: &TrueModel, x: &[f64]) -> f64 {
    model.link.value(model.index(x))
}
