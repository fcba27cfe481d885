//! `rbwp`: run class-incremental scenarios, compare strategies and verify gradients.

mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbwp_core::config::RunConfig;
use rbwp_core::diffcore::GradCheckHooks;
use rbwp_core::harness::gradcheck::{full_loss_grad_check, TOLERANCE};
use rbwp_core::harness::rundir::{diversity_cell, write_events, write_run_dir};
use rbwp_core::harness::{format_float, prepare, run_prepared, Prepared, RunOutcome, Scenario, Strategy};
use rbwp_core::{Error, Precision};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "rbwp", version, about = "Prompt-evolving continual learning on synthetic class-incremental scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Override the scenario seed (and the gradient-check seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one strategy; prints `A=<float> F=<float>`.
    Run { config: PathBuf },
    /// Run several strategies on the same scenario and encoder.
    Compare {
        config: PathBuf,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',', default_value = "rainbow,fixed_weighted_sum,frozen_specific")]
        strategies: Vec<String>,
    },
    /// Verify analytic gradients of the training loss in 64-bit mode.
    Check {
        #[arg(long, required = true)]
        gradcheck: bool,
        /// Negative control: offset added to one analytic gradient entry.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<f64>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical { message: String, last_event: Option<String> },
    Gradient(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical { .. } | Failure::Gradient(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn report(&self) {
        match self {
            Failure::Config(m) | Failure::Gradient(m) | Failure::Other(m) => eprintln!("error: {m}"),
            Failure::Numerical { message, last_event } => {
                eprintln!("error: {message}");
                if let Some(line) = last_event {
                    eprintln!("last event: {line}");
                }
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn precision() -> Result<Precision, Failure> {
    match std::env::var("RBWP_PRECISION") {
        Err(_) => Ok(Precision::Single),
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .and_then(Precision::from_bits)
            .ok_or_else(|| Failure::Config(format!("RBWP_PRECISION must be 32 or 64, got {v:?}"))),
    }
}

fn load_config(path: &Path, global: &Global) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| match e {
        Error::Config(m) => Failure::Config(format!("{}: {m}", path.display())),
        other => other.into(),
    })?;
    if let Some(seed) = global.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare_run(cfg: &RunConfig) -> Result<Prepared, Failure> {
    Ok(prepare(&cfg.scenario, &cfg.model, precision()?)?)
}

/// Trains one strategy and writes its run directory.
fn execute(cfg: &RunConfig, prepared: &Prepared, dir: &Path) -> Result<RunOutcome, Failure> {
    match run_prepared(&cfg.settings(), prepared) {
        Ok(outcome) => {
            write_run_dir(dir, &cfg.to_text(), prepared, &outcome)?;
            Ok(outcome)
        }
        Err(failure) => match failure.error {
            Error::Numerical(message) => {
                write_events(dir, &failure.events)?;
                Err(Failure::Numerical {
                    message: format!("numerical failure: {message}"),
                    last_event: failure.events.last().map(|e| e.to_string()),
                })
            }
            other => Err(other.into()),
        },
    }
}

fn run(config: &Path, global: &Global) -> Result<(), Failure> {
    let cfg = load_config(config, global)?;
    let prepared = prepare_run(&cfg)?;
    let outcome = execute(&cfg, &prepared, &cfg.output_dir)?;
    let m = outcome.final_step().metrics;
    println!("A={} F={}", format_float(m.average_accuracy), format_float(m.forgetting));
    Ok(())
}

/// SHA-256 over every sample, label and class range of the scenario.
fn scenario_hash(scenario: &Scenario) -> String {
    let mut h = Sha256::new();
    for task in scenario.tasks() {
        h.update((task.classes.start as u64).to_le_bytes());
        h.update((task.classes.end as u64).to_le_bytes());
        for set in [&task.train, &task.test] {
            for v in set.x.data() {
                h.update(v.to_le_bytes());
            }
            for &y in &set.y {
                h.update((y as u64).to_le_bytes());
            }
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn color(strategy: Strategy) -> plot::Rgb {
    match strategy {
        Strategy::Rainbow => [148, 40, 180],
        Strategy::FixedWeightedSum => [230, 120, 20],
        Strategy::FrozenSpecific => [30, 100, 200],
    }
}

fn compare(config: &Path, names: &[String], global: &Global) -> Result<(), Failure> {
    let cfg = load_config(config, global)?;
    let mut strategies: Vec<Strategy> = Vec::new();
    for name in names {
        let s: Strategy = name.trim().parse()?;
        if strategies.contains(&s) {
            return Err(Failure::Config(format!("strategy {s} listed twice")));
        }
        strategies.push(s);
    }
    if strategies.is_empty() {
        return Err(Failure::Config("no strategies given".into()));
    }

    let prepared = prepare_run(&cfg)?;
    let hash = scenario_hash(&prepared.scenario);
    let mut csv = String::from("strategy,A,F,diversity,scenario_hash\n");
    let mut series = Vec::new();
    for &strategy in &strategies {
        let run_cfg = RunConfig {
            strategy,
            output_dir: cfg.output_dir.join(strategy.name()),
            ..cfg.clone()
        };
        let outcome = execute(&run_cfg, &prepared, &run_cfg.output_dir)?;
        let last = outcome.final_step();
        let row = format!(
            "{strategy},{},{},{},{hash}",
            format_float(last.metrics.average_accuracy),
            format_float(last.metrics.forgetting),
            diversity_cell(last.diversity)
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
        series.push(plot::Series {
            color: color(strategy),
            points: outcome.steps.iter().map(|s| s.diversity).collect(),
        });
    }

    let out = &cfg.output_dir;
    let io = |p: &Path, e: std::io::Error| Failure::Other(format!("cannot write {}: {e}", p.display()));
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let csv_path = out.join("comparison.csv");
    fs::write(&csv_path, csv).map_err(|e| io(&csv_path, e))?;
    let png_path = out.join("diversity.png");
    plot::line_chart(&series).write_png(&png_path).map_err(|e| io(&png_path, e))
}

fn check(seed: u64, corrupt: Option<f64>) -> Result<(), Failure> {
    let report = full_loss_grad_check(seed, GradCheckHooks { corrupt_analytic: corrupt })?;
    let (name, index) = report.worst.clone().unwrap_or_else(|| ("none".into(), 0));
    println!(
        "max_relative_error={} parameter={name} index={index} checked={} skipped={}",
        format_float(report.max_relative_error),
        report.checked,
        report.skipped
    );
    if report.passes(TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::Gradient(format!(
            "gradient of parameter {name} (entry {index}) has relative error {} >= {}",
            format_float(report.max_relative_error),
            format_float(TOLERANCE)
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config, &cli.global),
        Command::Compare { config, strategies } => compare(config, strategies, &cli.global),
        Command::Check { corrupt_gradient, .. } => check(cli.global.seed.unwrap_or(0), *corrupt_gradient),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code())
        }
    }
}
