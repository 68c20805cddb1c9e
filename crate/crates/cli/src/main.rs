use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robustmv_cli::{run, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "robustmv",
    version,
    about = "Adaptive robust mean-variance portfolio experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set solver.mesh_paths=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set case=...` (I or II).
    #[arg(long, global = true)]
    case: Option<String>,
    /// Shorthand for `--set guess=...`.
    #[arg(long, global = true)]
    guess: Option<String>,
    /// Shorthand for `--set mode=...`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Shorthand for `--set output.dir=...`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mesh, run the backward recursion and write the policy.
    Solve,
    /// Forward-simulate a saved policy under the true parameter.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Solve and evaluate both adaptive and strong robust modes on shared paths.
    Compare,
    /// Check the exact solver against the brute-force oracle.
    OracleCheck,
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    for (key, value) in [("case", &common.case), ("guess", &common.guess), ("mode", &common.mode)] {
        if let Some(v) = value {
            overrides.push(format!("{key}=\"{v}\""));
        }
    }
    if let Some(dir) = &common.out {
        overrides.push(format!("output.dir={:?}", dir.to_string_lossy()));
    }
    overrides.extend(common.overrides.iter().cloned());
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let config = load(&cli.common)?;
    match cli.command {
        Command::Solve => {
            for (name, sha) in run::run_solve(&config)? {
                println!("{}  {}", sha, config.output.dir.join(name).display());
            }
        }
        Command::Evaluate { policy } => {
            let result = run::run_evaluate(&config, &policy)?;
            let s = result.summary;
            println!(
                "mean {:.4}  var {:.4}  q0.90 {:.4}  max {:.4}  min {:.4}  V {:.4}",
                s.mean, s.variance, s.q90, s.max, s.min, s.value
            );
        }
        Command::Compare => {
            let outcome = run::run_compare(&config)?;
            print!("{}", run::format_comparison(&outcome.comparison));
        }
        Command::OracleCheck => {
            let report = run::run_oracle_check(&config)?;
            for c in &report.instances {
                println!(
                    "T={} gamma={} nodes={} value_gap={:.1e} violation={:.1e} perturbed={:.3e} {}",
                    c.horizon,
                    c.gamma,
                    c.nodes,
                    c.max_value_gap.max(c.max_mean_gap),
                    c.max_violation,
                    c.perturbation_violation.unwrap_or(f64::NAN),
                    if c.passed() { "ok" } else { "FAILED" }
                );
            }
            if !report.passed {
                return Err(CliError::Check("exact solver disagrees with the oracle".into()));
            }
        }
        Command::PrintConfig => {
            println!("# config_hash = {}", config.hash());
            print!("{}", config.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
