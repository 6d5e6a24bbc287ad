use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forced_osc_cli::pipeline::{EXIT_INVALID, EXIT_IO};
use forced_osc_cli::scenario::GALLERY;
use forced_osc_cli::{parse_scenario, run, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "forced-osc", version, about = "Periodic segments, exit-face verification and periodic orbit search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the scenario's output_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for all randomized sampling.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Residual tolerance for Newton shooting.
    #[arg(long, global = true, value_name = "X")]
    tol: Option<f64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Treat warnings as failures.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario's full pipeline.
    Run { file: PathBuf },
    /// Classify the segment's exit faces.
    VerifySegment { file: PathBuf },
    /// Multistart shooting for periodic orbits.
    FindOrbits { file: PathBuf },
    /// Geodesic-tracking table.
    LemmaDemo { file: PathBuf },
    /// Print the gallery of systems.
    ListGallery,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (file, stages) = match &cli.command {
        Command::ListGallery => {
            for (name, about) in GALLERY {
                println!("{name:<20}{about}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Run { file } => (file, None),
        Command::VerifySegment { file } => (file, Some(vec![Stage::VerifySegment])),
        Command::FindOrbits { file } => (file, Some(vec![Stage::FindOrbits])),
        Command::LemmaDemo { file } => (file, Some(vec![Stage::LemmaDemo])),
    };
    let scn = match parse_scenario(file) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_INVALID as u8);
        }
    };
    let opts = RunOptions { out: cli.out, seed: cli.seed, tol: cli.tol, jobs: cli.jobs, strict: cli.strict, stages };
    match run(&scn, &opts) {
        Ok(outcome) => {
            for st in outcome.report["stages"].as_array().into_iter().flatten() {
                let status = if st["passed"].as_bool() == Some(true) { "pass" } else { "FAIL" };
                println!("{status}  {}", st["stage"].as_str().unwrap_or("?"));
            }
            for f in outcome.report["failures"].as_array().into_iter().flatten() {
                eprintln!("failure [{}] {}", f["stage"].as_str().unwrap_or("?"), f["message"].as_str().unwrap_or(""));
            }
            println!("report: {}", outcome.out_dir.join("report.json").display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_IO as u8)
        }
    }
}
