use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpzero::dp::DispatchRule;
use dpzero_cli::commands::{self, Format};
use dpzero_cli::verify::{run_suite, Suite, SuiteOptions};

/// Deterministic simulator and cost model for differentially private ZeRO training.
#[derive(Parser)]
#[command(name = "dpzero", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config and write trace, collective and flow logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an invariant suite; exits 1 if any check fails.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Gram weight of the norm dispatch rule (for negative controls).
        #[arg(long, hide = true, default_value_t = DispatchRule::default().grams)]
        dispatch_grams: usize,
    },
    /// Cost a configuration or sweep and print one row per configuration.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

const CONFIG_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CONFIG_ERROR } else { 0 });
        }
    };
    match cli.command {
        Command::Simulate { config, out } => match commands::simulate(&config, &out) {
            Ok(artifacts) => {
                println!("wrote {} steps to {}", artifacts.records.len(), out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Verify { suite, dispatch_grams } => {
            let options = SuiteOptions { dispatch: DispatchRule { grams: dispatch_grams } };
            match run_suite(suite, options) {
                Ok(checks) => {
                    for check in &checks {
                        println!("{check}");
                    }
                    let failed = checks.iter().filter(|c| !c.passed).count();
                    println!("{} checks, {failed} failed", checks.len());
                    if failed == 0 {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(e.into()),
            }
        }
        Command::Cost { config, format } => {
            let result = commands::cost_rows(&config)
                .and_then(|rows| commands::write_cost_rows(&rows, format, std::io::stdout().lock()));
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
    }
}

fn fail(e: anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::from(CONFIG_ERROR)
}
