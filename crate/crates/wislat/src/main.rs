//! Command line front end. Human-readable progress goes to stdout; all
//! machine-readable output is written to files under `--out`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data contract
//! violation (malformed or insufficient input), 4 solver failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wislat::config::AppConfig;
use wislat::csi::{csi_from_csv, csi_to_csv, detect_doppler_series, synthesize_csi, MultipathConfig};
use wislat::geometry::DopplerMatrix;
use wislat::harness::{
    evaluate_run, generate_measurements, generate_trajectory, random_layout, run_experiment,
    NoiseModel, Scenario, Shape,
};
use wislat::solver::{solve, CandidateSets, SolverResult};
use wislat::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShapeArg {
    Circle,
    Square,
    Triangle,
}

impl From<ShapeArg> for Shape {
    fn from(s: ShapeArg) -> Shape {
        match s {
            ShapeArg::Circle => Shape::Circle,
            ShapeArg::Square => Shape::Square,
            ShapeArg::Triangle => Shape::Triangle,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wislat", version, about = "Doppler-based joint station localization and target tracking")]
struct Cli {
    /// JSON configuration file; missing sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Verbosity (-v progress, -vv detail).
    #[arg(short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a ground-truth scenario and its measurement files.
    Simulate(SimulateArgs),
    /// Detect per-interval Doppler from a CSI stream CSV.
    Detect(DetectArgs),
    /// Jointly estimate station positions and the target trajectory.
    Solve(SolveArgs),
    /// Score a solver result against the ground truth that produced it.
    Evaluate(EvaluateArgs),
    /// Run the full multi-run experiment and write pooled reports.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "circle")]
    shape: ShapeArg,
    /// Doppler noise standard deviation (Hz).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Noise seed; changes the noise realization, never the geometry.
    #[arg(long)]
    seed: Option<u64>,
    /// Also emit per-station CSI streams.
    #[arg(long)]
    csi: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// CSI stream CSV (columns q,re1,im1,re2,im2).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Doppler measurement CSV, as written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Override the outer refinement iteration cap; 0 = coarse search only.
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// solution.json from `solve`.
    #[arg(long)]
    solution: PathBuf,
    /// scenario.json from `simulate`.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Worker threads (0 = one per core). Results are identical either way.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the experiment base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput { .. } | Error::Io(_) | Error::Json(_) => 2,
        Error::Parse { .. }
        | Error::DimensionMismatch { .. }
        | Error::InsufficientStations { .. }
        | Error::StreamTooShort { .. }
        | Error::WindowTooLong { .. }
        | Error::AliasedDoppler { .. }
        | Error::ShapeExceedsArena { .. }
        | Error::LayoutMismatch { .. }
        | Error::NearZeroDenominator { .. } => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig, Error> {
    match &cli.config {
        Some(path) => AppConfig::load(path).map_err(|e| {
            Error::invalid("--config", format!("{}: {e}", path.display()))
        }),
        None => Ok(AppConfig::default()),
    }
}

fn build_scenario(cfg: &AppConfig, shape: Shape, sigma: f64, seed: u64) -> Result<Scenario, Error> {
    let exp = &cfg.experiment;
    Ok(Scenario {
        true_layout: random_layout(
            exp.layout_seed,
            exp.num_stations,
            exp.annulus_min,
            exp.annulus_max,
        ),
        true_traj: generate_trajectory(shape, exp.arena, exp.speed, &cfg.scene)?,
        scene: cfg.scene.clone(),
        shape,
        seed,
        noise: NoiseModel {
            doppler_sigma: sigma,
            use_csi_path: false,
        },
        blockage: exp.blockage.clone(),
    })
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let seed = args.seed.unwrap_or(cfg.experiment.base_seed);
    let scn = build_scenario(&cfg, args.shape.into(), args.sigma, seed)?;
    let measured = generate_measurements(&scn, &cfg.detector)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("measurements.csv"), measured.to_csv())?;
    std::fs::write(
        args.out.join("scenario.json"),
        serde_json::to_string_pretty(&scn)?,
    )?;
    if args.csi {
        let model =
            wislat::geometry::model_doppler_matrix(&scn.true_traj, &scn.true_layout, &scn.scene)?;
        for m in 0..model.num_stations() {
            let channel = MultipathConfig {
                static_gains: [
                    vec![num_complex::Complex64::new(1.0, 0.0)],
                    vec![num_complex::Complex64::new(0.9, -0.2)],
                ],
                target_gain: [
                    num_complex::Complex64::new(0.6, 0.15),
                    num_complex::Complex64::new(0.45, -0.3),
                ],
                phase_offset_seed: seed.wrapping_add(m as u64),
            };
            let stream = synthesize_csi(model.row(m).0, &channel, &scn.scene)?;
            std::fs::write(
                args.out.join(format!("csi_station_{m}.csv")),
                csi_to_csv(&stream),
            )?;
        }
    }
    if cli.verbose > 0 {
        println!(
            "simulated {} trajectory: {} stations, {} intervals, sigma {} Hz, seed {}",
            scn.shape,
            measured.num_stations(),
            measured.num_intervals(),
            args.sigma,
            seed
        );
    }
    println!("wrote {}", args.out.join("measurements.csv").display());
    Ok(())
}

fn cmd_detect(cli: &Cli, args: &DetectArgs) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let text = std::fs::read_to_string(&args.input)?;
    let stream = csi_from_csv(&text)?;
    if stream.is_empty() {
        return Err(Error::invalid("--input", "CSI file contains no samples"));
    }
    let (values, available) = detect_doppler_series(&stream, &cfg.detector, &cfg.scene)?;
    let mut out = String::from("n,frequency,available\n");
    for (n, (v, a)) in values.iter().zip(&available).enumerate() {
        out.push_str(&format!("{n},{v:.6},{}\n", u8::from(*a)));
    }
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("doppler.csv");
    std::fs::write(&path, out)?;
    if cli.verbose > 0 {
        let detections = available.iter().filter(|a| **a).count();
        println!("{} samples, {} detections", stream.len(), detections);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_solve(cli: &Cli, args: &SolveArgs) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    if let Some(k) = args.max_outer {
        cfg.solver.k_max = k;
    }
    if let Some(seed) = args.seed {
        cfg.solver.candidates.seed = seed;
    }
    let text = std::fs::read_to_string(&args.input)?;
    let measured = DopplerMatrix::from_csv(&text)?;
    measured.validate(&cfg.scene, 3)?;
    if cli.verbose > 0 {
        println!(
            "solving: {} stations x {} intervals, {} candidate layouts",
            measured.num_stations(),
            measured.num_intervals(),
            cfg.solver.candidates.n_layouts
        );
    }
    let candidates = CandidateSets::generate(&cfg.solver.candidates, measured.num_stations());
    let result = solve(&measured, &candidates, &cfg.solver, &cfg.ekf, &cfg.scene)?;
    let mode = if cfg.solver.k_max == 0 { "coarse" } else { "refined" };
    if cli.verbose > 0 {
        println!(
            "{} result after {} outer iterations, final mse {:.3e} (coarse {:.3e})",
            mode,
            result.iterations,
            result.mse_trace.last().copied().unwrap_or(f64::NAN),
            result.coarse_mse
        );
    }
    let doc = serde_json::json!({
        "mode": mode,
        "result": result,
    });
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("solution.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), Error> {
    let _ = load_config(cli)?;
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&args.solution)?)?;
    let result: SolverResult = serde_json::from_value(
        doc.get("result")
            .cloned()
            .ok_or_else(|| Error::invalid("solution file", "missing `result` field"))?,
    )?;
    let scn: Scenario = serde_json::from_str(&std::fs::read_to_string(&args.scenario)?)?;
    let report = evaluate_run(&result, &scn);
    if cli.verbose > 0 {
        println!(
            "tracking median {:.3} m, localization median {:.3} m (gauge theta {:.3} rad, reflect {})",
            report.tracking_median, report.localization_median, report.gauge_theta, report.gauge_reflect
        );
    }
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_experiment(cli: &Cli, args: &ExperimentArgs) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    if let Some(seed) = args.seed {
        cfg.experiment.base_seed = seed;
    }
    if args.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build_global()
            .map_err(|e| Error::invalid("--workers", e.to_string()))?;
    }
    let report = run_experiment(&cfg, &args.out)?;
    let failures = report.runs.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} runs ({} failed), reports under {}",
        report.runs.len(),
        failures,
        args.out.display()
    );
    if cli.verbose > 0 {
        for run in &report.runs {
            match (&run.report, &run.error) {
                (Some(rep), _) => println!(
                    "  {}: tracking median {:.3} m, localization median {:.3} m",
                    run.id, rep.tracking_median, rep.localization_median
                ),
                (None, Some(e)) => println!("  {}: FAILED ({e})", run.id),
                _ => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(&cli, args),
        Command::Detect(args) => cmd_detect(&cli, args),
        Command::Solve(args) => cmd_solve(&cli, args),
        Command::Evaluate(args) => cmd_evaluate(&cli, args),
        Command::Experiment(args) => cmd_experiment(&cli, args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
