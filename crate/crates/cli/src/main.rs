//! `antiwindup` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 infeasible, 3 divergence.

mod manifest;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use antiwindup::certify::{certify, Certification};
use antiwindup::config::{Config, ConfigFile, ModeName};
use antiwindup::design::{run_design_with, sample_shell, DesignReport, REPORT_SCHEMA_VERSION};
use antiwindup::fixtures::BASELINE_ALPHAS;
use antiwindup::sim::integrate;
use antiwindup::{assemble_closed_loop, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;

use manifest::{hash_file, now_unix, RunManifest};

#[derive(Parser)]
#[command(name = "antiwindup", version, about = "Joint controller / anti-windup synthesis with certified invariant ellipsoids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the configured controller: maximize α over contractively invariant ellipsoids.
    Certify(CommonArgs),
    /// Run the staged training/certification design loop.
    Design(CommonArgs),
    /// Simulate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Summarize a design report.
    Report {
        /// Path to a report.json written by `design`.
        report: PathBuf,
    },
    /// Draw initial states from the training shell of the initial controller.
    Sample(SampleArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides design.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the integrator step.
    #[arg(long)]
    step: Option<f64>,
    /// Strictness margin of the Lyapunov LMIs.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Smooth,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initial state, comma separated, e.g. "-43.48,-66.78,0,0".
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Simulation horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 100)]
    count: usize,
}

/// Command failure carrying the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Certify(a) => cmd_certify(&a),
        Command::Design(a) => cmd_design(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report { report } => cmd_report(&report),
        Command::Sample(a) => cmd_sample(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

struct Loaded {
    config: Config,
    inputs: Vec<manifest::InputFile>,
    started: f64,
}

fn load(args: &CommonArgs) -> Result<Loaded, Failure> {
    let started = now_unix();
    let file = ConfigFile::load(&args.config)?;
    let seed_given = file.design.seed.is_some() || args.seed.is_some();
    let fallback: u64 = rand::random();
    let mut config = file.resolve(fallback)?;
    if let Some(s) = args.seed {
        config.design.seed = s;
    }
    if !seed_given {
        eprintln!("seed: {} (randomized)", config.design.seed);
    }
    if let Some(step) = args.step {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument("--step must be positive".into()).into());
        }
        config.design.step = step;
        config.simulate.step = step;
    }
    if let Some(eps) = args.epsilon {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("--epsilon must be positive".into()).into());
        }
        config.certify.strictness = eps;
    }
    Ok(Loaded { config, inputs: vec![hash_file(&args.config)?], started })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn finish(out: &Path, command: &str, loaded: Loaded) -> CmdResult {
    let m = RunManifest::new(command, loaded.config, loaded.inputs, loaded.started);
    write_json(&out.join("manifest.json"), &m)
}

fn cmd_certify(args: &CommonArgs) -> CmdResult {
    let loaded = load(args)?;
    let cfg = &loaded.config;
    let sys = assemble_closed_loop(&cfg.plant, cfg.controller()?)?;
    let outcome = certify(&sys, cfg.shape_ref()?, &cfg.certify)?;
    fs::create_dir_all(&args.out)?;
    match &outcome {
        Certification::Certified(c) => {
            println!("alpha = {:.6}", c.alpha);
            println!("margin = {:.3e}", c.margin);
            if let Some(v) = &c.verification {
                println!(
                    "verified: P > 0 (λmin {:.3e}), Lyapunov slack {:.3e}, input bound slack {:.3e}, containment slack {:.3e}",
                    v.positive_definite.slack, v.lyapunov.slack, v.input_bound.slack, v.containment.slack
                );
            }
            write_json(&args.out.join("certificate.json"), c)?;
            finish(&args.out, "certify", loaded)
        }
        Certification::Infeasible => {
            finish(&args.out, "certify", loaded)?;
            Err(Error::Infeasible.into())
        }
    }
}

fn cmd_design(args: &CommonArgs) -> CmdResult {
    let loaded = load(args)?;
    let cfg = &loaded.config;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.resolved.json"), cfg)?;
    let report = run_design_with(
        &cfg.plant,
        cfg.controller_init()?,
        cfg.shape_ref()?,
        &cfg.design,
        &cfg.certify,
        |s| {
            let alpha = s.alpha.map_or_else(|| format!("{:?}", s.certification).to_lowercase(), |a| format!("{a:.4}"));
            eprintln!("stage {:>3}  t_k {:>7.3}  alpha {:>12}  alpha_max {:.4}", s.k, s.horizon, alpha, s.alpha_max);
        },
    )
    .map_err(|e| match e {
        Error::Infeasible => Failure {
            code: 2,
            message: "the initial controller admits no certified ellipsoid (Step 1 infeasible); choose a different controller_init".into(),
        },
        other => other.into(),
    })?;

    write_json(&args.out.join("report.json"), &report)?;
    report.write_alpha_csv(BufWriter::new(File::create(args.out.join("alpha.csv"))?))?;
    report.write_loss_csv(BufWriter::new(File::create(args.out.join("loss.csv"))?))?;
    write_json(&args.out.join("winner_gains.json"), &report.winning_gains)?;

    // winner response from the first reference vertex scaled onto the ellipsoid boundary
    let vertex = &cfg.shape_ref()?.vertices()[0];
    let x0 = vertex * report.alpha_max;
    let sys = assemble_closed_loop(&cfg.plant, &report.winning_gains)?;
    match integrate(&sys, &x0, cfg.design.horizon, cfg.design.step, antiwindup::SaturationMode::Exact) {
        Ok(traj) => traj.write_csv(BufWriter::new(File::create(args.out.join("winner_trajectory.csv"))?))?,
        Err(Error::Divergence { time, .. }) => eprintln!("warning: winner trajectory diverged at t = {time}"),
        Err(e) => return Err(e.into()),
    }
    println!("alpha0 = {:.6}", report.alpha0);
    println!(
        "alpha_max = {:.6} ({})",
        report.alpha_max,
        report.winning_stage.map_or("initial controller".to_string(), |k| format!("stage {k}"))
    );
    finish(&args.out, "design", loaded)
}

fn parse_x0(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("--x0: {e}")).into())
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let loaded = load(&args.common)?;
    let cfg = &loaded.config;
    let gains = cfg.controller()?;
    let x0 = match &args.x0 {
        Some(s) => parse_x0(s)?,
        None => cfg
            .simulate
            .x0
            .clone()
            .ok_or_else(|| Error::Config { path: "simulate.x0".into(), message: "missing (or pass --x0)".into() })?,
    };
    let mode = match args.mode {
        Some(Mode::Exact) => ModeName::Exact,
        Some(Mode::Smooth) => ModeName::Smooth,
        None => cfg.simulate.mode,
    };
    let horizon = args.horizon.unwrap_or(cfg.simulate.horizon);
    let sys = assemble_closed_loop(&cfg.plant, gains)?;
    let x0 = DVector::from_vec(x0);
    let traj = integrate(&sys, &x0, horizon, cfg.simulate.step, mode.with_zeta(cfg.design.zeta))?;
    fs::create_dir_all(&args.common.out)?;
    traj.write_csv(BufWriter::new(File::create(args.common.out.join("trajectory.csv"))?))?;
    println!("final |x| = {:.6e}", traj.final_state().norm());
    println!("energy = {:.6e}", traj.final_loss());
    finish(&args.common.out, "simulate", loaded)
}

fn cmd_sample(args: &SampleArgs) -> CmdResult {
    let loaded = load(&args.common)?;
    let cfg = &loaded.config;
    let gains0 = cfg.controller_init()?.without_anti_windup();
    let sys = assemble_closed_loop(&cfg.plant, &gains0)?;
    let cert = match certify(&sys, cfg.shape_ref()?, &cfg.certify)? {
        Certification::Certified(c) => c,
        Certification::Infeasible => return Err(Error::Infeasible.into()),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.design.seed);
    let xs = sample_shell(
        &cert.p,
        cfg.plant.n(),
        cfg.design.beta,
        args.count,
        cfg.design.quadrant_mask.as_ref(),
        cfg.design.controller_state,
        &mut rng,
    )?;
    fs::create_dir_all(&args.common.out)?;
    let mut w = BufWriter::new(File::create(args.common.out.join("samples.csv"))?);
    use std::io::Write;
    let header: Vec<String> = (1..=sys.dim()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},level", header.join(","))?;
    for x in &xs {
        let cols: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{},{:.16e}", cols.join(","), antiwindup::matrix::quad_form(&cert.p, x))?;
    }
    drop(w);
    println!("{} samples, alpha0 = {:.6}", xs.len(), cert.alpha);
    finish(&args.common.out, "sample", loaded)
}

fn cmd_report(path: &Path) -> CmdResult {
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(REPORT_SCHEMA_VERSION)) {
        return Err(Error::InvalidArgument(format!(
            "report schema_version {version:?} is not supported (expected {REPORT_SCHEMA_VERSION})"
        ))
        .into());
    }
    let report: DesignReport = serde_json::from_value(raw)?;
    println!("{:>5}  {:>14}  {:>14}  incumbent", "stage", "alpha", "final loss");
    println!("{:>5}  {:>14.6}  {:>14}  {}", 0, report.alpha0, "-", if report.winning_stage.is_none() { "*" } else { "" });
    for s in &report.stages {
        let alpha = s.alpha.map_or_else(|| format!("{:?}", s.certification).to_lowercase(), |a| format!("{a:.6}"));
        let loss = s.loss_history.last().map_or("-".to_string(), |l| format!("{l:.6e}"));
        let mark = if report.winning_stage == Some(s.k) { "*" } else { "" };
        println!("{:>5}  {:>14}  {:>14}  {}", s.k, alpha, loss, mark);
    }
    println!();
    println!("alpha_max = {:.6}", report.alpha_max);
    println!("documented baselines (different optimization problem, for reference only):");
    for (label, a) in BASELINE_ALPHAS {
        println!("  {a:>10.4}  {label}");
    }
    Ok(())
}
