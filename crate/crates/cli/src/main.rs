use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use echoloc::geometry::Point;
use echoloc::harness::{
    ambiguity_text, counterexample_text, default_config, export, load_scenario, run, scenario_ambiguity,
    scenario_genericity, summarize, ExportFormat,
};

/// Echo-based self-location of a four-microphone vehicle.
#[derive(Debug, Parser)]
#[command(name = "echoloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the scenario's path and reconstruct it step by step.
    Run {
        scenario: PathBuf,
        /// Override the travel-distance noise level (meters).
        #[arg(long)]
        noise: Option<f64>,
        /// Override the noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the step records to this file.
        #[arg(long, requires = "format")]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_format, requires = "out")]
        format: Option<ExportFormat>,
    },
    /// Check whether a speaker position is generic for the scenario's walls.
    Genericity {
        scenario: PathBuf,
        /// Comma-separated coordinates, e.g. 8,5 or 2,3,1.5.
        #[arg(long, allow_hyphen_values = true)]
        speaker: String,
    },
    /// Show the dihedral arrangement whose mirror points form a regular polygon.
    Counterexample {
        #[arg(long)]
        k: usize,
        #[arg(long, allow_hyphen_values = true, default_value = "0.7,0.3")]
        point: String,
    },
    /// Compare the echoes heard at two poses of the scenario's path.
    Ambiguity {
        scenario: PathBuf,
        #[arg(long)]
        pose_a: usize,
        #[arg(long)]
        pose_b: usize,
    },
}

fn parse_format(s: &str) -> std::result::Result<ExportFormat, String> {
    s.parse()
}

fn parse_point(s: &str) -> Result<Point> {
    let coords = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().with_context(|| format!("bad coordinate '{c}'")))
        .collect::<Result<Vec<_>>>()?;
    if !(2..=3).contains(&coords.len()) {
        bail!("expected 2 or 3 comma-separated coordinates, got {}", coords.len());
    }
    Ok(Point::new(coords)?)
}

fn load(path: &PathBuf) -> Result<echoloc::simulator::Scenario> {
    let (s, warnings) = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(s)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, noise, seed, out, format } => {
            let mut s = load(&scenario)?;
            if let Some(sigma) = noise {
                s.noise_sigma = sigma;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s.validate()?;
            let report = run(&s, &default_config(&s))?;
            print!("{}", summarize(&report));
            if let (Some(path), Some(format)) = (out, format) {
                export(&report, &path, format).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Genericity { scenario, speaker } => {
            let s = load(&scenario)?;
            let report = scenario_genericity(&s, &parse_point(&speaker)?)?;
            println!("{report}");
        }
        Command::Counterexample { k, point } => {
            print!("{}", counterexample_text(k, &parse_point(&point)?)?);
        }
        Command::Ambiguity { scenario, pose_a, pose_b } => {
            let s = load(&scenario)?;
            print!("{}", ambiguity_text(&scenario_ambiguity(&s, pose_a, pose_b)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
