use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gaq::asymptotics::{a_v_constant, Theory, TheoryConfig};
use gaq::dgp::{identify_normalize, simulate, IdentifiedModel, TrueModel, MIN_BURN_IN};
use gaq::harness::{read_records_path, run_experiment, summarize, Experiment};
use gaq::link::{predict_quantile, LinkEstimate};
use gaq::marginals::{estimate_all, WeightFn};
use gaq::{validate, Dataset, Error, FitConfig, FitConfigFile, QuantileLevel, ScalarKernel};

const EXIT_CONFIG: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "gaq", version, about = "Generalized additive conditional quantile estimation")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(multiple = false)]
struct LevelArgs {
    /// Quantile level in the `α` convention (`τ = 1 − α`).
    #[arg(long)]
    alpha: Option<f64>,
    /// Pinball level.
    #[arg(long)]
    tau: Option<f64>,
}

impl LevelArgs {
    fn level(&self) -> gaq::Result<Option<QuantileLevel>> {
        match (self.alpha, self.tau) {
            (Some(a), _) => QuantileLevel::from_alpha(a).map(Some),
            (_, Some(t)) => QuantileLevel::from_tau(t).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a model and write it with its identified truth.
    Simulate {
        /// Model JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = MIN_BURN_IN)]
        burn_in: usize,
        /// Dataset CSV; the truth sidecar goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
    },
    /// Estimate components and link; writes CSVs and diagnostics to a directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Fit configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
    },
    /// Fit, then evaluate the quantile at the rows of a points CSV.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// CSV with columns `x1..xd`.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        level: LevelArgs,
    },
    /// Run a Monte Carlo experiment.
    Mc {
        /// Experiment JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the experiment's seed base.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Leading bias and variance constants of a component estimate.
    Asymptotics {
        /// Model JSON.
        #[arg(long)]
        config: PathBuf,
        /// One-based component index.
        #[arg(long)]
        component: usize,
        #[arg(long)]
        x: f64,
        #[arg(long, default_value_t = 2)]
        p: usize,
        /// Sample size for the AMSE-optimal bandwidth.
        #[arg(long)]
        n: Option<usize>,
        /// Also report the link bias constant at this index value.
        #[arg(long)]
        v: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize Monte Carlo results.
    Report {
        /// Results CSV written by `mc`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 4 if any acceptance check fails.
        #[arg(long)]
        check: bool,
    },
}

enum Failure {
    Config(String),
    Estimation(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_estimation() {
            Failure::Estimation(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let outcome = match cli.command {
        Command::Simulate {
            config,
            n,
            seed,
            burn_in,
            out,
            level,
        } => cmd_simulate(&config, n, seed, burn_in, &out, &level),
        Command::Fit {
            data,
            config,
            out,
            level,
        } => cmd_fit(&data, &config, &out, &level),
        Command::Predict {
            data,
            config,
            points,
            out,
            level,
        } => cmd_predict(&data, &config, &points, &out, &level),
        Command::Mc { config, out, seed } => cmd_mc(&config, &out, seed, cli.threads),
        Command::Asymptotics {
            config,
            component,
            x,
            p,
            n,
            v,
            seed,
            out,
        } => cmd_asymptotics(&config, component, x, p, n, v, seed, out.as_deref()),
        Command::Report { data, out, check } => cmd_report(&data, out.as_deref(), check),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Estimation(m)) => {
            eprintln!("estimation error: {m}");
            ExitCode::from(EXIT_ESTIMATION)
        }
        Err(Failure::Check(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn level_json(level: QuantileLevel) -> serde_json::Value {
    json!({ "alpha": level.alpha(), "tau": level.tau() })
}

/// `<stem>.truth.json` next to the dataset.
fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    out.with_file_name(format!("{stem}.truth.json"))
}

fn truth_json(model: &TrueModel, id: &IdentifiedModel, grid_points: usize) -> serde_json::Value {
    let b = model.reference_box();
    let anchors = model.reference_anchors();
    let components: Vec<_> = (0..model.dim())
        .map(|u| {
            let (lo, hi) = (b.lower[u], b.upper[u]);
            let grid: Vec<f64> = (0..grid_points)
                .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
                .collect();
            let values: Vec<f64> = grid.iter().map(|&x| id.component(u, x)).collect();
            json!({
                "u": u + 1,
                "anchor": anchors[u],
                "anchor_value": id.component(u, anchors[u]),
                "grid": grid,
                "values": values,
            })
        })
        .collect();
    let lo: f64 = (0..model.dim())
        .map(|u| (0..grid_points).map(|i| id.component(u, b.lower[u] + b.width(u) * i as f64 / (grid_points - 1) as f64)).fold(f64::INFINITY, f64::min))
        .sum();
    let hi: f64 = (0..model.dim())
        .map(|u| (0..grid_points).map(|i| id.component(u, b.lower[u] + b.width(u) * i as f64 / (grid_points - 1) as f64)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let v_grid: Vec<f64> = (0..grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
        .collect();
    let g: Vec<f64> = v_grid.iter().map(|&v| id.link(v)).collect();
    json!({
        "level": level_json(model.level),
        "box": b,
        "anchors": anchors,
        "components": components,
        "link": { "v": v_grid, "values": g },
    })
}

fn cmd_simulate(config: &Path, n: usize, seed: u64, burn_in: usize, out: &Path, level: &LevelArgs) -> CmdResult {
    let mut model = TrueModel::read(config)?;
    if let Some(l) = level.level()? {
        model.level = l;
    }
    if n == 0 {
        return Err(Failure::Config("sample size n must be positive".into()));
    }
    let b = model.reference_box();
    let id = identify_normalize(&model, &WeightFn::new(b.lower[0], b.upper[0])?, &model.reference_anchors())?;
    let data = simulate(&model, n, seed, burn_in)?;
    data.write_csv(out)?;
    write_json(&sidecar_path(out), &truth_json(&model, &id, 101))
}

fn load_fit(data: &Path, config: &Path, level: &LevelArgs) -> Result<(Dataset, FitConfig), Failure> {
    let data = Dataset::read_csv(data)?;
    let mut file = FitConfigFile::read(config)?;
    if let Some(l) = level.level()? {
        file.level = l;
    }
    let cfg = file.resolve(&data)?;
    for w in validate(&cfg, &data)? {
        eprintln!("warning: {w}");
    }
    Ok((data, cfg))
}

fn cmd_fit(data: &Path, config: &Path, out: &Path, level: &LevelArgs) -> CmdResult {
    let (data, cfg) = load_fit(data, config, level)?;
    fs::create_dir_all(out)?;
    let additive = estimate_all(&data, &cfg)?;
    let link = LinkEstimate::fit(&data, &additive, &cfg)?;
    additive.write_csv(out.join("components.csv"))?;
    link.write_csv(out.join("link.csv"))?;
    write_json(
        &out.join("diagnostics.json"),
        &json!({
            "n": data.n(),
            "d": data.d(),
            "level": level_json(cfg.level),
            "config": FitConfigFile::from(&cfg),
            "components": additive.sidecar_json(),
            "link": link.sidecar_json(),
        }),
    )
}

fn read_points(path: &Path, d: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Failure::Config(e.to_string()))?.clone();
    let expected: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Failure::Config(format!("points header must be {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Failure::Config(e.to_string()))?;
        let row: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match row {
            Ok(r) if r.iter().all(|v| v.is_finite()) => out.push(r),
            _ => return Err(Failure::Config(format!("points row {}: not a finite number", i + 1))),
        }
    }
    Ok(out)
}

fn cmd_predict(data: &Path, config: &Path, points: &Path, out: &Path, level: &LevelArgs) -> CmdResult {
    let (data, cfg) = load_fit(data, config, level)?;
    let points = read_points(points, data.d())?;
    let additive = estimate_all(&data, &cfg)?;
    let link = LinkEstimate::fit(&data, &additive, &cfg)?;
    let mut wtr = csv::Writer::from_path(out).map_err(|e| Failure::Config(e.to_string()))?;
    let mut header: Vec<String> = (1..=data.d()).map(|k| format!("x{k}")).collect();
    header.extend(["index".into(), "quantile".into(), "flagged".into()]);
    wtr.write_record(&header).map_err(|e| Failure::Config(e.to_string()))?;
    for x in &points {
        let value = predict_quantile(&additive, &link, &cfg.bounds, x)?;
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:?}", additive.index(x)));
        row.push(format!("{:?}", value.value));
        row.push(value.flagged.to_string());
        wtr.write_record(&row).map_err(|e| Failure::Config(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

fn cmd_mc(config: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>) -> CmdResult {
    let mut exp = Experiment::read(config)?;
    if let Some(s) = seed {
        exp.seed_base = s;
    }
    fs::create_dir_all(out)?;
    let result = run_experiment(&exp, threads)?;
    for m in &result.failure_messages {
        eprintln!("warning: {m}");
    }
    result.write_csv(out.join("mc.csv"))?;
    let summary = result.summary()?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "cells": result.cells,
            "failures": result.failures,
            "summary": summary,
            "checks": summary.checks(),
        }),
    )?;
    fs::write(out.join("report.txt"), summary.to_text())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_asymptotics(
    config: &Path,
    component: usize,
    x: f64,
    p: usize,
    n: Option<usize>,
    v: Option<f64>,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let model = TrueModel::read(config)?;
    if component == 0 || component > model.dim() {
        return Err(Failure::Config(format!(
            "component must be in 1..={}, got {component}",
            model.dim()
        )));
    }
    let mut tc = TheoryConfig::new(p, model.reference_box()).with_anchors(model.reference_anchors());
    tc.seed = seed;
    let theory = Theory::new(&model, tc)?;
    let report = theory.report(component - 1, x, n)?;
    let mut value = json!({
        "level": level_json(model.level),
        "report": report,
    });
    if let Some(v) = v {
        value["link"] = json!({ "v": v, "a_v": a_v_constant(&model, v, &ScalarKernel::biweight())? });
    }
    let text = serde_json::to_string_pretty(&value)? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_report(data: &Path, out: Option<&Path>, check: bool) -> CmdResult {
    let records = read_records_path(data)?;
    if records.is_empty() {
        return Err(Failure::Config(format!("{} has no result rows", data.display())));
    }
    let summary = summarize(&records)?;
    let text = summary.to_text();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let file = |name: &str| fs::File::create(dir.join(name));
        summary.rates_csv(file("rates.csv")?)?;
        summary.cells_csv(file("cells.csv")?)?;
        fs::write(dir.join("report.txt"), &text)?;
    }
    if check {
        let failed: Vec<String> = summary
            .checks()
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| format!("FAIL {}: {}", c.name, c.detail))
            .collect();
        if !failed.is_empty() {
            return Err(Failure::Check(failed.join("\n")));
        }
    }
    Ok(())
}
