//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always shown.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p gaq --test acceptance -- 1 2 10`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaq::asymptotics::{bahadur_residual, BiasConstant, Theory, TheoryConfig};
use gaq::basis::MultiIndexBasis;
use gaq::dgp::{
    identify_normalize, identify_reference, simulate, Component, CovariateProcess, ErrorLaw, Link, TrueModel,
};
use gaq::harness::{rate_fit, run_experiment, Experiment, FitSettings, McResult, Probe, METRIC_ERROR, METRIC_SUP};
use gaq::kernels::{f_k_eval, moment_matrices, SphericalKernel};
use gaq::link::{conditional_cdf, link_estimate};
use gaq::lp::solve_exact_lp;
use gaq::lpq::{objective, solve_weighted, SolverOptions};
use gaq::marginals::{MarginalEstimator, WeightFn};
use gaq::numerics::{mean, median};
use gaq::{EstimationBox, FitConfig, QuantileLevel};

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

fn tau(t: f64) -> QuantileLevel {
    QuantileLevel::from_tau(t).unwrap()
}

fn sine(slope: f64, amplitude: f64) -> Component {
    Component::SineBump {
        slope,
        amplitude,
        frequency: 1.0,
        phase: 0.0,
    }
}

fn linear(slope: f64, intercept: f64) -> Component {
    Component::Linear { slope, intercept }
}

// ---------------------------------------------------------------- criterion 1

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize, f64) {
    let d = rng.random_range(1..=2);
    let p = rng.random_range(1..=3);
    let basis = MultiIndexBasis::new(d, p);
    let m = basis.len();
    let n = rng.random_range(m.max(3)..=40);
    let t = rng.random_range(1..=9) as f64 / 10.0;
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut design = Vec::with_capacity(n * m);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        w.push(rng.random_range(0.05..1.0));
        y.push(z.iter().map(|v| v * v).sum::<f64>() + rng.random_range(-1.0..1.0));
        design.extend(basis.eval(&z));
    }
    (w, y, design, m, t)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolverOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (w, y, design, m, t) = random_instance(&mut rng);
        let smoothed = match solve_weighted(&w, &y, &design, m, t, &opts) {
            Ok(f) => f.objective,
            Err(e) => return Verdict::new(false, format!("solver error: {e}")),
        };
        let exact = match solve_exact_lp(&w, &y, &design, m, t) {
            Ok(b) => objective(&w, &y, &design, &b, t),
            Err(e) => return Verdict::new(false, format!("LP error: {e}")),
        };
        // interpolating instances have optimum 0, so the gap is scaled by max(|opt|, 1)
        worst = worst.max((smoothed - exact) / exact.abs().max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst <= 1e-8 && secs < 60.0,
        format!("200 instances, worst gap / max(|opt|, 1) = {worst:.2e} (≤ 1e-8), {secs:.1}s (< 60s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn noiseless_linear(slopes: [f64; 2], intercept: f64) -> TrueModel {
    TrueModel::new(
        Link::Identity,
        vec![linear(slopes[0], intercept), linear(slopes[1], 0.0)],
        ErrorLaw::None,
        tau(0.5),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let bounds = EstimationBox::cube(2, 0.1, 0.9).unwrap();
    let mut details = Vec::new();
    let mut passed = true;
    // (model, analytic scale constant)
    for (model, c_true) in [
        (noiseless_linear([3.0, -1.0], 2.0), -1.0 / 3.0),
        (noiseless_linear([1.0, 1.0], 0.0), 1.0),
    ] {
        let data = simulate(&model, 500, 5, 200).unwrap();
        let cfg = FitConfig::new(2, 0.25, model.level, bounds.clone());
        let id = identify_reference(&model).unwrap();
        let est = MarginalEstimator::new(&data, &cfg).unwrap();
        let fit = match est.estimate_all() {
            Ok(f) => f,
            Err(e) => return Verdict::new(false, format!("fit failed: {e}")),
        };
        let mut worst = 0.0f64;
        for c in &fit.components {
            for (x, v) in c.grid.iter().zip(&c.values) {
                worst = worst.max((v - id.component(c.axis, *x)).abs());
            }
        }
        let c_err = (fit.c_hat - c_true).abs();
        let probes = vec![vec![0.3, 0.4], vec![0.5, 0.5], vec![0.7, 0.6]];
        let bahadur = bahadur_residual(&model, &data, &cfg, &probes).unwrap();
        let tol = SolverOptions::default().inner_tol;
        passed &= worst < 1e-2 && c_err < 2e-2 && bahadur.max_abs_residual < tol;
        details.push(format!(
            "slopes {:?}: max component error {worst:.1e}, c_hat {:.4} vs {c_true:.4}, Bahadur residual {:.1e}",
            [model.components[0].derivative(0.5), model.components[1].derivative(0.5)],
            fit.c_hat,
            bahadur.max_abs_residual
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    passed &= secs < 60.0;
    details.push(format!("{secs:.1}s"));
    Verdict::new(passed, details.join("; "))
}

// ----------------------------------------------------- criteria 3, 4, 5 and 8

const MIDPOINT: f64 = 0.5;
const VARIANCE_PROBE: f64 = 0.75;

fn reference_model() -> TrueModel {
    let mut m = TrueModel::new(
        Link::Identity,
        vec![sine(2.0, 0.02), sine(0.0, 0.1)],
        ErrorLaw::Gaussian { sigma: 0.1 },
        tau(0.5),
    )
    .with_covariates(CovariateProcess {
        phi: vec![0.3, 0.3],
        rho: 0.0,
    });
    m.anchors = Some(vec![0.5, 0.2]);
    m
}

fn reference_experiment() -> Experiment {
    Experiment {
        model: reference_model(),
        n_list: vec![250, 500, 1000, 2000],
        replications: 200,
        h_constant: 0.9,
        h_g_constant: None,
        probes: vec![
            Probe::Component { axis: 1, x: MIDPOINT },
            Probe::Component {
                axis: 1,
                x: VARIANCE_PROBE,
            },
            Probe::Uniform { axis: 1 },
        ],
        seed_base: 10_000,
        burn_in: 200,
        fit: FitSettings::default(),
        theory: true,
    }
}

struct ReferenceRun {
    exp: Experiment,
    result: McResult,
    secs: f64,
}

impl ReferenceRun {
    fn compute() -> Result<Self, String> {
        let exp = reference_experiment();
        let start = Instant::now();
        let result = run_experiment(&exp, None).map_err(|e| e.to_string())?;
        Ok(ReferenceRun {
            exp,
            result,
            secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Values of the first `reps` replications.
    fn values(&self, n: usize, probe: &Probe, metric: &str, reps: usize) -> Vec<f64> {
        let label = probe.label();
        self.result
            .records
            .iter()
            .filter(|r| r.n == n && r.probe == label && r.metric == metric && r.rep < reps && !r.failed())
            .map(|r| r.value)
            .collect()
    }
}

fn rmse(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn criterion_3(run: &ReferenceRun) -> Verdict {
    let probe = Probe::Component { axis: 1, x: MIDPOINT };
    let errs: Vec<f64> = run
        .exp
        .n_list
        .iter()
        .map(|&n| rmse(&run.values(n, &probe, METRIC_ERROR, 100)))
        .collect();
    match rate_fit(&run.exp.n_list, &errs) {
        Ok(f) => Verdict::new(
            (-0.55..=-0.25).contains(&f.slope),
            format!(
                "slope {:.3} in [-0.55, -0.25] (theory -0.4), RMSE {:?}, R = 100, full reference run {:.0}s",
                f.slope,
                errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
                run.secs
            ),
        ),
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

fn criterion_4(run: &ReferenceRun) -> Verdict {
    let probe = Probe::Component { axis: 1, x: MIDPOINT };
    let v = run.values(1000, &probe, METRIC_ERROR, 200);
    let m = mean(&v);
    let sd = sample_variance(&v).sqrt();
    let z: Vec<f64> = v.iter().map(|x| (x - m) / sd).collect();
    match gaq::harness::jarque_bera(&z) {
        Ok(jb) => Verdict::new(
            jb.p_value > 0.01,
            format!(
                "n = 1000, R = {}: JB = {:.3}, p = {:.3} (> 0.01)",
                v.len(),
                jb.statistic,
                jb.p_value
            ),
        ),
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

fn criterion_5(run: &ReferenceRun) -> Verdict {
    let probe = Probe::Component {
        axis: 1,
        x: VARIANCE_PROBE,
    };
    let n = 2000;
    let v = run.values(n, &probe, METRIC_ERROR, 200);
    let h = run.exp.bandwidth(n);
    let exp = &run.exp;
    let cfg = TheoryConfig::new(exp.fit.p, exp.bounds()).with_anchors(exp.model.reference_anchors());
    let sigma2 = match Theory::new(&exp.model, cfg).and_then(|t| t.sigma_u_squared(1, VARIANCE_PROBE)) {
        Ok(s) => s.total(),
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let mc = sample_variance(&v) * n as f64 * h;
    let ratio = mc / sigma2;
    Verdict::new(
        (1.0 / 1.5..=1.5).contains(&ratio),
        format!(
            "n = 2000, R = {}: MC var of sqrt(nh)·error {mc:.4e}, sigma² {sigma2:.4e}, ratio {ratio:.3} within factor 1.5",
            v.len()
        ),
    )
}

fn criterion_8(run: &ReferenceRun) -> Verdict {
    let probe = Probe::Uniform { axis: 1 };
    let medians: Vec<f64> = run
        .exp
        .n_list
        .iter()
        .map(|&n| median(&run.values(n, &probe, METRIC_SUP, 100)))
        .collect();
    Verdict::new(
        medians.windows(2).all(|w| w[1] < w[0]),
        format!(
            "median sup error over n {:?}: {:?}",
            run.exp.n_list,
            medians.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn linear_noisy_model() -> TrueModel {
    let mut m = TrueModel::new(
        Link::Identity,
        vec![linear(2.0, 0.0), linear(0.5, 0.0)],
        ErrorLaw::Gaussian { sigma: 0.1 },
        tau(0.5),
    )
    .with_covariates(CovariateProcess {
        phi: vec![0.3, 0.3],
        rho: 0.0,
    });
    m.anchors = Some(vec![0.5, 0.2]);
    m
}

fn criterion_6() -> Verdict {
    let model = linear_noisy_model();
    let p = 2;
    let bounds = model.reference_box();
    let cfg = TheoryConfig::new(p, bounds).with_anchors(model.reference_anchors());
    let theory = match Theory::new(&model, cfg) {
        Ok(t) => t,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let probes = [(0usize, 0.75), (1usize, VARIANCE_PROBE)];
    let mut details = Vec::new();
    let mut passed = true;
    for &(u, x) in &probes {
        let BiasConstant { value, std_error, .. } = match theory.bias_constant(u, x) {
            Ok(b) => b,
            Err(e) => return Verdict::new(false, e.to_string()),
        };
        let ok = value.abs() <= 3.0 * std_error + 1e-12;
        passed &= ok;
        details.push(format!("B(q{}@{x}) = {value:.1e} ± {std_error:.1e}", u + 1));
    }
    let exp = Experiment {
        model,
        n_list: vec![1000],
        replications: 100,
        h_constant: 0.9,
        h_g_constant: None,
        probes: probes.iter().map(|&(axis, x)| Probe::Component { axis, x }).collect(),
        seed_base: 20_000,
        burn_in: 200,
        fit: FitSettings::default(),
        theory: false,
    };
    let result = match run_experiment(&exp, None) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let n = 1000;
    let scale = (n as f64 * exp.bandwidth(n)).sqrt();
    for probe in &exp.probes {
        let v: Vec<f64> = result
            .values(n, &probe.label(), METRIC_ERROR)
            .iter()
            .map(|e| scale * e)
            .collect();
        let t = mean(&v) / (sample_variance(&v).sqrt() / (v.len() as f64).sqrt());
        passed &= t.abs() < 3.0;
        details.push(format!("{}: MC bias t = {t:.2}", probe.label()));
    }
    Verdict::new(passed, format!("{} (|t| < 3)", details.join(", ")))
}

// ---------------------------------------------------------------- criterion 7

fn link_model() -> TrueModel {
    TrueModel::new(
        Link::Exp,
        vec![linear(1.0, 0.0), linear(0.5, 0.0)],
        ErrorLaw::Gaussian { sigma: 0.1 },
        tau(0.5),
    )
    .with_covariates(CovariateProcess {
        phi: vec![0.3, 0.3],
        rho: 0.0,
    })
}

fn criterion_7() -> Verdict {
    let model = link_model();
    // Anchors sit at the box midpoint, so the index is symmetric about 0 and its median is 0.
    let v = 0.0;
    let exp = Experiment {
        model,
        n_list: vec![500, 1000, 2000, 4000],
        replications: 50,
        h_constant: 0.9,
        h_g_constant: Some(0.5),
        probes: vec![Probe::Link { v }],
        seed_base: 30_000,
        burn_in: 200,
        fit: FitSettings::default(),
        theory: false,
    };
    let start = Instant::now();
    let result = match run_experiment(&exp, None) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let label = exp.probes[0].label();
    let errs: Vec<f64> = exp
        .n_list
        .iter()
        .map(|&n| rmse(&result.values(n, &label, METRIC_ERROR)))
        .collect();
    match rate_fit(&exp.n_list, &errs) {
        Ok(f) => Verdict::new(
            (-0.55..=-0.25).contains(&f.slope),
            format!(
                "slope {:.3} in [-0.55, -0.25] (theory -0.4), RMSE {:?}, {} failed cells, {:.0}s",
                f.slope,
                errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
                result.failures,
                start.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

// ---------------------------------------------------------------- criterion 9

/// Components mapped to `scale · q + shift`, with the link undoing the map.
fn reparametrized(base: &TrueModel, scale: f64, shift: f64) -> TrueModel {
    let d = base.dim() as f64;
    TrueModel {
        components: base
            .components
            .iter()
            .map(|c| Component::Affine {
                scale,
                shift,
                inner: Box::new(c.clone()),
            })
            .collect(),
        link: Link::Affine {
            scale: 1.0 / scale,
            shift: -d * shift / scale,
            inner: Box::new(base.link.clone()),
        },
        ..base.clone()
    }
}

fn max_fit_gap(a: &gaq::marginals::AdditiveFit, b: &gaq::marginals::AdditiveFit) -> f64 {
    a.components
        .iter()
        .zip(&b.components)
        .flat_map(|(p, q)| p.values.iter().zip(&q.values).map(|(x, y)| (x - y).abs()))
        .fold((a.c_hat - b.c_hat).abs(), f64::max)
}

fn criterion_9() -> Verdict {
    let base = TrueModel::new(
        Link::Exp,
        vec![sine(1.0, 0.05), sine(0.8, 0.05)],
        ErrorLaw::Gaussian { sigma: 0.1 },
        tau(0.5),
    )
    .with_covariates(CovariateProcess {
        phi: vec![0.3, 0.2],
        rho: 0.2,
    });
    // Power-of-two scaling is exact in floating point; a shift is exact only mathematically.
    let scaled = reparametrized(&base, 2.0, 0.0);
    let shifted = reparametrized(&base, 2.0, 0.3);
    let b = base.reference_box();
    let w1 = WeightFn::new(b.lower[0], b.upper[0]).unwrap();
    let anchors = base.reference_anchors();
    let base_id = identify_normalize(&base, &w1, &anchors).unwrap();
    let mut truth_gap = 0.0f64;
    for other in [&scaled, &shifted] {
        let id = identify_normalize(other, &w1, &anchors).unwrap();
        for i in 0..=40 {
            let x = 0.1 + 0.02 * i as f64;
            for k in 0..2 {
                truth_gap = truth_gap.max((base_id.component(k, x) - id.component(k, x)).abs());
            }
            let v = -1.0 + 0.05 * i as f64;
            truth_gap = truth_gap.max((base_id.link(v) - id.link(v)).abs());
        }
    }
    let cfg = FitConfig::new(2, 0.3, base.level, b.clone()).with_anchors(anchors);
    let data_base = simulate(&base, 800, 99, 200).unwrap();
    let data_scaled = simulate(&scaled, 800, 99, 200).unwrap();
    let data_shifted = simulate(&shifted, 800, 99, 200).unwrap();
    let bits = |d: &gaq::Dataset| -> Vec<u64> { d.x().iter().chain(d.y()).map(|v| v.to_bits()).collect() };
    let same_data = bits(&data_base) == bits(&data_scaled);
    let fit_base = gaq::marginals::estimate_all(&data_base, &cfg).unwrap();
    let fit_scaled = gaq::marginals::estimate_all(&data_scaled, &cfg).unwrap();
    let fit_shifted = gaq::marginals::estimate_all(&data_shifted, &cfg).unwrap();
    let same_fit = fit_base == fit_scaled;
    let shifted_gap = max_fit_gap(&fit_base, &fit_shifted);
    Verdict::new(
        truth_gap <= 1e-10 && same_data && same_fit && shifted_gap <= 1e-8,
        format!(
            "identified truth gap {truth_gap:.1e} (≤ 1e-10); power-of-two rescaling: bit-identical data {same_data}, \
             bit-identical estimates {same_fit}; rescaled and shifted: estimate gap {shifted_gap:.1e} (rounding only)"
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut details = Vec::new();

    // conditional CDF on random queries
    let model = link_model();
    let data = simulate(&model, 600, 3, 200).unwrap();
    let index: Vec<f64> = (0..data.n()).map(|i| model.index(data.row(i))).collect();
    let bounds = EstimationBox::unit(2);
    let mut cdf_ok = true;
    for _ in 0..1000 {
        let v = rng.random_range(0.2..1.3);
        let h_g = rng.random_range(0.05..0.5);
        let y1 = rng.random_range(0.0..5.0);
        let y2 = y1 + rng.random_range(0.0..1.0);
        match (
            conditional_cdf(&data, &index, v, y1, h_g, &bounds),
            conditional_cdf(&data, &index, v, y2, h_g, &bounds),
        ) {
            (Ok(a), Ok(b)) => cdf_ok &= (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b,
            _ => cdf_ok = false,
        }
    }
    details.push(format!("CDF in [0,1] and nondecreasing on 1000 queries: {cdf_ok}"));

    // link estimate monotone in the level
    let mut link_ok = true;
    for &v in &[0.4, 0.75, 1.1] {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..20 {
            let g = link_estimate(&data, &index, v, tau(k as f64 / 20.0), 0.2, &bounds).unwrap();
            link_ok &= g.value >= prev;
            prev = g.value;
        }
    }
    details.push(format!("link estimate nondecreasing in tau: {link_ok}"));

    // f_k vanishes outside [-1, 1]; Q positive definite
    let mut fk_ok = true;
    let mut q_ok = true;
    let mut min_eig = f64::INFINITY;
    for d in 1..=3 {
        let kernel = SphericalKernel::biweight(d);
        for p in 1..=3 {
            let basis = MultiIndexBasis::new(d, p);
            for axis in 0..d {
                for y in [-3.0, -1.5, -1.0 - 1e-9, 1.0 + 1e-9, 2.0, 10.0] {
                    fk_ok &= f_k_eval(&basis, &kernel, axis, y).iter().all(|v| *v == 0.0);
                }
            }
            let q = moment_matrices(&basis, &kernel, 1e-9).unwrap();
            let m = DMatrix::from_row_slice(q.size, q.size, &q.q_mat);
            let eig = m.symmetric_eigen().eigenvalues.min();
            min_eig = min_eig.min(eig);
            q_ok &= eig > 0.0;
        }
    }
    details.push(format!("f_k zero outside [-1,1]: {fk_ok}"));
    details.push(format!("Q positive definite for d, p <= 3: {q_ok} (min eigenvalue {min_eig:.2e})"));
    Verdict::new(cdf_ok && link_ok && fk_ok && q_ok, details.join("; "))
}

// ------------------------------------------------------------------- driver

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // libtest flags such as --nocapture are accepted and ignored
    let wants = |k: usize| selected.is_empty() || selected.contains(&k);
    let names = [
        "solver-oracle equivalence",
        "exact recovery",
        "component rate",
        "asymptotic normality",
        "variance formula",
        "bias sanity",
        "link rate",
        "uniform convergence trend",
        "identification invariance",
        "monotonicity suite",
    ];
    let needs_reference = [3, 4, 5, 8].iter().any(|&k| wants(k));
    let reference = needs_reference.then(ReferenceRun::compute);
    let mut failures = 0;
    for k in 1..=10 {
        if !wants(k) {
            continue;
        }
        let verdict = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            6 => criterion_6(),
            7 => criterion_7(),
            9 => criterion_9(),
            10 => criterion_10(),
            _ => match reference.as_ref().expect("reference run computed") {
                Ok(run) => match k {
                    3 => criterion_3(run),
                    4 => criterion_4(run),
                    5 => criterion_5(run),
                    _ => criterion_8(run),
                },
                Err(e) => Verdict::new(false, format!("reference experiment failed: {e}")),
            },
        };
        if !verdict.passed {
            failures += 1;
        }
        println!(
            "{} criterion {k} ({}): {}",
            if verdict.passed { "PASS" } else { "FAIL" },
            names[k - 1],
            verdict.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
