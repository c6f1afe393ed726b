use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use truthlab_cli::{run, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "truthlab", version, about = "Truth-encoding experiments on synthetic fact sequences")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the config's `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Sample a world and a batch of sequences.
    Generate(RunArgs),
    /// Train the one-hot toy model (SGD or the sequential algorithm).
    TrainToy(RunArgs),
    /// Train the dense attention-only transformer with periodic probing.
    TrainDense(RunArgs),
    /// Fit linear probes and PCA on a dense checkpoint.
    Probe(RunArgs),
    /// Run the theorem suite; exits 0 iff every claim passes.
    Verify(RunArgs),
    /// Co-occurrence statistics of a labelled corpus.
    Cooccur(RunArgs),
    /// Export value matrices, VO kernels and attention maps.
    Export(RunArgs),
}

fn fail(err: &CliError) -> ExitCode {
    let report = serde_json::to_string(&err.report()).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", err.kind()));
    eprintln!("{report}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(&CliError::Usage(e.to_string().trim().to_string())),
    };
    let (command, args) = match cli.command {
        Sub::Generate(a) => (Command::Generate, a),
        Sub::TrainToy(a) => (Command::TrainToy, a),
        Sub::TrainDense(a) => (Command::TrainDense, a),
        Sub::Probe(a) => (Command::Probe, a),
        Sub::Verify(a) => (Command::Verify, a),
        Sub::Cooccur(a) => (Command::Cooccur, a),
        Sub::Export(a) => (Command::Export, a),
    };
    let config = match &args.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    let mut config = match config {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    match run(command, &config) {
        Ok(outcome) => {
            if command == Command::Verify {
                for r in outcome.summary["reports"].as_array().into_iter().flatten() {
                    let status = if r["pass"].as_bool() == Some(true) { "PASS" } else { "FAIL" };
                    println!("{status} {} (bound {}, empirical {})", r["claim"].as_str().unwrap_or("?"), r["bound"], r["empirical"]);
                }
            } else {
                println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(&e),
    }
}
