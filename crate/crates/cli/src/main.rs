use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use syncnet::dynamics::ProtocolKind;
use syncnet::icas::run_icas;
use syncnet::report::{
    analyze, bounds_report, icas_key_values, write_icas_csv, write_trajectory_csv,
};
use syncnet::scenario::Scenario;
use syncnet::verify::{run_all, run_criterion, VerifyOptions};

/// Simulate consensus synchronization of networked oscillators.
#[derive(Debug, Parser)]
#[command(name = "syncnet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Scenario file; defaults to a bundled scenario.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Bundled scenario to use when no --config is given
    /// (kuramoto, extended, icas).
    #[arg(long, global = true, value_name = "NAME")]
    scenario: Option<String>,

    /// Integration step in seconds.
    #[arg(long, global = true)]
    step: Option<f64>,

    /// Simulated time in seconds.
    #[arg(long, global = true)]
    horizon: Option<f64>,

    /// Seed for measurement noise and the randomized verification checks.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for the written files.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Consensus-line fit window as START,END in seconds.
    #[arg(long, global = true, value_name = "START,END", value_parser = parse_window)]
    fit_window: Option<(f64, f64)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate a scenario and write the trajectory CSV and metrics.
    Simulate,
    /// Print spectral data and the steady-state error bounds.
    Bounds,
    /// Run the pilot-tone synchronization protocol.
    Icas,
    /// Run the built-in reproduction suite.
    Verify {
        /// Run a single criterion (1-10).
        #[arg(long)]
        criterion: Option<u8>,
    },
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected START,END")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("start: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("end: {e}"))?;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err("need finite START < END".into());
    }
    Ok((a, b))
}

fn load(global: &Global, default: &str) -> Result<Scenario> {
    let mut scenario = match (&global.config, &global.scenario) {
        (Some(_), Some(_)) => bail!("--config and --scenario are mutually exclusive"),
        (Some(path), None) => {
            Scenario::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, name) => Scenario::bundled(name.as_deref().unwrap_or(default))?,
    };
    if let Some(step) = global.step {
        scenario.integrator.step = step;
    }
    if let Some(horizon) = global.horizon {
        scenario.integrator.horizon = horizon;
    }
    if let Some(window) = global.fit_window {
        scenario.fit_window = Some(window);
    }
    scenario.integrator.steps()?;
    Ok(scenario)
}

fn create(dir: &Path, name: &Path) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(dir: &Path, name: &Path, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(global: &Global) -> Result<()> {
    let scenario = load(global, "kuramoto")?;
    let traj = scenario.integrate()?;
    if let Some((a, b)) = scenario.fit_window {
        if b > traj.t_end() + 1e-9 || a < 0.0 {
            bail!("fit window {a},{b} lies outside [0, {}]", traj.t_end());
        }
    }
    let report = analyze(&scenario, &traj, scenario.fit_window)?;
    let mut csv = create(&global.out_dir, &scenario.output.trajectory)?;
    write_trajectory_csv(&mut csv, &traj, &report)?;
    let metrics = report.key_values().render();
    write_text(&global.out_dir, &scenario.output.metrics, &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn bounds(global: &Global) -> Result<()> {
    let scenario = load(global, "kuramoto")?;
    print!("{}", bounds_report(&scenario)?.render());
    Ok(())
}

fn icas(global: &Global) -> Result<()> {
    let scenario = load(global, "icas")?;
    let mut config = scenario
        .icas
        .clone()
        .with_context(|| format!("scenario `{}` has no [icas] section", scenario.name))?;
    if let Some(seed) = global.seed {
        config.noise.seed = seed;
    }
    if let Some(horizon) = global.horizon {
        let slowest = config.horizon() / config.tones as f64;
        config.tones = (horizon / slowest).ceil().max(1.0) as usize;
    }
    let run = run_icas(&config)?;
    let mut csv = create(&global.out_dir, &scenario.output.icas_records)?;
    write_icas_csv(&mut csv, &run)?;
    let metrics = icas_key_values(&scenario.name, &run).render();
    write_text(&global.out_dir, &scenario.output.metrics, &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn verify(global: &Global, criterion: Option<u8>) -> Result<bool> {
    let mut opts = VerifyOptions::bundled(global.seed.unwrap_or(2024));
    if global.config.is_some() || global.scenario.is_some() {
        let scenario = load(global, "kuramoto")?;
        if let Some(icas) = &scenario.icas {
            opts.icas.icas = Some(icas.clone());
        }
        opts.kuramoto = scenario.clone();
        opts.kuramoto.protocol.kind = ProtocolKind::Kuramoto;
        opts.extended = scenario;
        opts.extended.protocol.kind = ProtocolKind::ExtendedKuramoto;
    } else {
        for s in [&mut opts.kuramoto, &mut opts.extended] {
            if let Some(step) = global.step {
                s.integrator.step = step;
            }
            s.fit_window = global.fit_window.or(s.fit_window);
            s.integrator.steps()?;
        }
    }
    let results = match criterion {
        Some(id) => {
            vec![run_criterion(id, &opts).with_context(|| format!("no criterion {id}; use 1-10"))?]
        }
        None => run_all(&opts),
    };
    for r in &results {
        println!("{}", r.line());
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    Ok(passed == results.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate => simulate(&cli.global).map(|_| true),
        Command::Bounds => bounds(&cli.global).map(|_| true),
        Command::Icas => icas(&cli.global).map(|_| true),
        Command::Verify { criterion } => verify(&cli.global, *criterion),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
