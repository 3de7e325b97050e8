use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bangbang::harness::{run_and_write, Command, ExperimentConfig, HarnessError, OUT_ENV};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bangbang", version, about = "Likelihood and bang-bang purification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Evaluate h(y, K) for a named body
    HEval,
    /// Purify the reference trajectory of a scenario
    Purify,
    /// Purification table over k and eps
    Convergence,
    /// Solve, purify and extract the concave Bolza problem
    Bolza,
    /// V-deficit table for the counterexample
    Counterexample,
    /// Sample the concavity conditions of a scenario
    VerifyConcavity,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key = value config file, applied before the flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[arg(long, global = true)]
    k: Option<String>,
    /// Comma separated, strictly increasing
    #[arg(long = "k-list", global = true)]
    k_list: Option<String>,
    /// One value or a comma separated list
    #[arg(long, global = true)]
    eps: Option<String>,
    /// Reference grid steps
    #[arg(long, global = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory (default: $BANGBANG_OUT, then ./results)
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Body for h-eval: square, segment, triangle, ball
    #[arg(long, global = true)]
    body: Option<String>,
    /// Point for h-eval, comma separated
    #[arg(long, global = true, allow_hyphen_values = true)]
    y: Option<String>,
    /// Sample count for verify-concavity
    #[arg(long, global = true)]
    samples: Option<String>,
}

fn build_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    let flags = [
        ("scenario", &c.scenario),
        ("k", &c.k),
        ("k_list", &c.k_list),
        ("eps", &c.eps),
        ("grid", &c.grid),
        ("seed", &c.seed),
        ("body", &c.body),
        ("y", &c.y),
        ("samples", &c.samples),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            cfg.set(key, v)?;
        }
    }
    if let Some(out) = &c.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::HEval => Command::HEval,
        Cmd::Purify => Command::Purify,
        Cmd::Convergence => Command::Convergence,
        Cmd::Bolza => Command::Bolza,
        Cmd::Counterexample => Command::Counterexample,
        Cmd::VerifyConcavity => Command::VerifyConcavity,
    };
    match build_config(&cli.common).and_then(|cfg| run_and_write(command, &cfg)) {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("summary serializes");
            // a closed pipe downstream is not a failure of the run
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(1)
        }
    }
}
