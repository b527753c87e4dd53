//! `sunspin`: batch front-end for protocol runs, fits and gate synthesis.

mod config;
mod output;
mod run;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sunspin::analysis::{fit_damped_sine, fit_phase_diffusion, fit_sine};
use sunspin::spin_core::{CMat, C64, DIM};
use sunspin::synthesis::{decompose, haar_unitary, DECOMPOSE_TOL};

use output::Output;

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Simulation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::Simulation(m) => write!(f, "simulation error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "sunspin", version, about = "Spin-9/2 qudit control simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Repetitions per scan point.
    #[arg(long)]
    shots: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config entry, e.g. `fields.q=-300` or `scan.omega=80`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct ProtocolArgs {
    /// JSON config; the bundled default for the protocol when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Run a JSON experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    Rabi(ProtocolArgs),
    Ramsey(ProtocolArgs),
    DualRamsey(ProtocolArgs),
    Ancilla(ProtocolArgs),
    /// Stray ancilla signal versus 2|q|/Omega.
    LeakageScan {
        /// Comma separated ratios 2|q|/Omega.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Include spontaneous emission of a monochromatic laser.
        #[arg(long)]
        scattering: bool,
        #[command(flatten)]
        args: ProtocolArgs,
    },
    /// Fit a model to two or three CSV columns (x, y and optional y errors).
    Fit {
        model: FitModel,
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose unitaries into pair rotations and report plan statistics.
    Decompose {
        /// Use Haar-random targets.
        #[arg(long, conflicts_with = "target")]
        haar: bool,
        /// Dimension of the random targets, embedded on the lowest levels.
        #[arg(long, default_value_t = DIM)]
        n: usize,
        /// Number of random targets.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// JSON file with `re` and `im` matrices.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FitModel {
    DampedSine,
    Sine,
    PhaseDiffusion,
}

fn read_input(path: &PathBuf) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))
}

fn run_protocol(name: &str, raw: Value, source: Option<(String, Vec<u8>)>, common: &Common, tweak: impl FnOnce(&mut Value) -> Result<(), CliError>) -> Result<PathBuf, CliError> {
    let mut raw = raw;
    tweak(&mut raw)?;
    if let Some(s) = common.seed {
        raw["seed"] = json!(s);
    }
    if let Some(n) = common.shots {
        raw["n_shots"] = json!(n);
    }
    for p in &common.params {
        config::apply_param(&mut raw, p)?;
    }
    let x = config::load(&raw)?;
    let dir = match (&common.out, &x.config.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => PathBuf::from("out").join(x.config.protocol.name()),
    };
    let mut out = Output::create(dir)?;
    if let Some((path, bytes)) = &source {
        out.record_input(path, bytes);
    }
    run::run_experiment(&x, &mut out)?;
    out.finish(name, Some(&raw))
}

fn parse_json(bytes: &[u8], what: &str) -> Result<Value, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Schema(format!("{what}: {e}")))
}

fn protocol_source(args: &ProtocolArgs, bundled: &str) -> Result<(Value, Option<(String, Vec<u8>)>), CliError> {
    match &args.config {
        Some(p) => {
            let bytes = read_input(p)?;
            Ok((parse_json(&bytes, &p.display().to_string())?, Some((p.display().to_string(), bytes))))
        }
        None => Ok((parse_json(config::bundled(bundled).unwrap().as_bytes(), bundled)?, None)),
    }
}

fn read_columns(path: &PathBuf) -> Result<(Vec<u8>, Vec<Vec<f64>>), CliError> {
    let bytes = read_input(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes.as_slice());
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if cols.is_empty() {
            cols = vec![Vec::new(); rec.len().min(3)];
        }
        for (k, col) in cols.iter_mut().enumerate() {
            let x = rec.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| CliError::Schema(format!("{}: row {} column {} is not a number", path.display(), line + 2, k + 1)))?;
            col.push(x);
        }
    }
    if cols.len() < 2 || cols[0].is_empty() {
        return Err(CliError::Schema(format!("{}: need at least two numeric columns and one row", path.display())));
    }
    Ok((bytes, cols))
}

fn fit(model: FitModel, input: &PathBuf, out: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    let (bytes, cols) = read_columns(input)?;
    let err = cols.get(2).map(|v| v.as_slice());
    let sim = |e: sunspin::Error| CliError::Simulation(e.to_string());
    let (name, result) = match model {
        FitModel::DampedSine => ("damped_sine", serde_json::to_value(fit_damped_sine(&cols[0], &cols[1], err).map_err(sim)?).unwrap()),
        FitModel::Sine => ("sine", serde_json::to_value(fit_sine(&cols[0], &cols[1], err).map_err(sim)?).unwrap()),
        FitModel::PhaseDiffusion => {
            let f = fit_phase_diffusion(&cols[0], &cols[1], err).map_err(sim)?;
            let (s, se) = f.sqrt_d();
            let mut v = serde_json::to_value(f).unwrap();
            v["sqrt_d"] = json!(s);
            v["sqrt_d_error"] = json!(se);
            ("phase_diffusion", v)
        }
    };
    let doc = json!({ "model": name, "points": cols[0].len(), "result": result });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    let mut o = Output::create(out.cloned().unwrap_or_else(|| PathBuf::from("out").join("fit")))?;
    o.record_input(&input.display().to_string(), &bytes);
    o.json("fit.json", &doc)?;
    o.finish("fit", None)
}

fn matrix_from_json(v: &Value) -> Result<CMat, CliError> {
    let bad = || CliError::Schema(format!("target must hold `re` and `im` as {DIM}x{DIM} arrays"));
    let grid = |key: &str| -> Result<Vec<Vec<f64>>, CliError> {
        let rows: Vec<Vec<f64>> = serde_json::from_value(v.get(key).cloned().ok_or_else(bad)?).map_err(|_| bad())?;
        if rows.len() != DIM || rows.iter().any(|r| r.len() != DIM) {
            return Err(bad());
        }
        Ok(rows)
    };
    let (re, im) = (grid("re")?, grid("im")?);
    Ok(CMat::from_fn(DIM, DIM, |i, j| C64::new(re[i][j], im[i][j])))
}

fn decompose_cmd(haar: bool, n: usize, count: usize, target: Option<&PathBuf>, seed: u64, out: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    let mut o = Output::create(out.cloned().unwrap_or_else(|| PathBuf::from("out").join("decompose")))?;
    let sim = |e: sunspin::Error| CliError::Simulation(e.to_string());
    let targets: Vec<CMat> = if let Some(path) = target {
        let bytes = read_input(path)?;
        let m = matrix_from_json(&parse_json(&bytes, &path.display().to_string())?)?;
        o.record_input(&path.display().to_string(), &bytes);
        vec![m]
    } else if haar {
        if !(1..=DIM).contains(&n) || count == 0 {
            return Err(CliError::Schema(format!("need 1 <= n <= {DIM} and count >= 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let block = haar_unitary(n, &mut rng);
                let mut u = CMat::identity(DIM, DIM);
                u.view_mut((0, 0), (n, n)).copy_from(&block);
                u
            })
            .collect()
    } else {
        return Err(CliError::Schema("decompose needs --haar or --target".into()));
    };
    let mut rows = Vec::new();
    let mut usage: BTreeMap<String, usize> = BTreeMap::new();
    let mut plans = Vec::new();
    for (k, u) in targets.iter().enumerate() {
        let plan = decompose(u, DECOMPOSE_TOL).map_err(sim)?;
        for (g, c) in plan.generator_usage() {
            *usage.entry(g).or_default() += c;
        }
        rows.push(vec![k as f64, plan.steps.len() as f64, plan.givens as f64, plan.error]);
        plans.push(plan);
    }
    let header = ["target [1]", "steps [1]", "givens [1]", "error [1]"].map(String::from);
    o.csv("plans.csv", &header, &rows)?;
    let steps: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let errors: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    let stats = json!({
        "targets": targets.len(),
        "dimension": if target.is_some() { DIM } else { n },
        "seed": seed,
        "tolerance": DECOMPOSE_TOL,
        "max_error": errors.iter().cloned().fold(0.0, f64::max),
        "mean_error": errors.iter().sum::<f64>() / errors.len() as f64,
        "mean_steps": steps.iter().sum::<f64>() / steps.len() as f64,
        "max_steps": steps.iter().cloned().fold(0.0, f64::max),
        "generator_usage": usage,
    });
    println!("{}", serde_json::to_string_pretty(&stats).unwrap());
    o.json("stats.json", &stats)?;
    if target.is_some() {
        o.json("plan.json", &plans[0])?;
    }
    o.finish("decompose", None)
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SUNSPIN_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Schema(format!("SUNSPIN_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<PathBuf, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, common } => {
            let bytes = read_input(&config)?;
            let raw = parse_json(&bytes, &config.display().to_string())?;
            run_protocol("run", raw, Some((config.display().to_string(), bytes)), &common, |_| Ok(()))
        }
        Command::Rabi(a) => {
            let (raw, src) = protocol_source(&a, "fig2a_rabi")?;
            run_protocol("rabi", raw, src, &a.common, |_| Ok(()))
        }
        Command::Ramsey(a) => {
            let (raw, src) = protocol_source(&a, "ramsey")?;
            run_protocol("ramsey", raw, src, &a.common, |_| Ok(()))
        }
        Command::DualRamsey(a) => {
            let (raw, src) = protocol_source(&a, "dual_ramsey")?;
            run_protocol("dual-ramsey", raw, src, &a.common, |_| Ok(()))
        }
        Command::Ancilla(a) => {
            let (raw, src) = protocol_source(&a, "ancilla")?;
            run_protocol("ancilla", raw, src, &a.common, |_| Ok(()))
        }
        Command::LeakageScan { ratios, scattering, args } => {
            let (raw, src) = protocol_source(&args, "leakage_scan")?;
            run_protocol("leakage-scan", raw, src, &args.common, |v| {
                if let Some(r) = ratios {
                    v["scan"]["ratios"] = json!(r);
                }
                if scattering {
                    v["scan"]["include_scattering"] = json!(true);
                }
                Ok(())
            })
        }
        Command::Fit { model, input, out } => fit(model, &input, out.as_ref()),
        Command::Decompose { haar, n, count, target, seed, out } => decompose_cmd(haar, n, count, target.as_ref(), seed.unwrap_or(0), out.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sunspin: {e}");
            ExitCode::from(e.code())
        }
    }
}
