use std::fmt::Write as _;
use std::io::Write as _;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradient_remedy::experiment::{self, SpecOverrides, StrategyVariant};

#[derive(Parser)]
#[command(name = "gradient-remedy", version, about = "Train two-task models with gradient conflict remedies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed with a single strategy.
    Run(SpecOverrides),
    /// Train every listed strategy on every seed.
    Sweep {
        /// Comma-separated strategies, e.g. naive,pcgrad,gradient-remedy.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<StrategyVariant>,
        #[command(flatten)]
        spec: SpecOverrides,
    },
    /// Check a spec and print the resolved configuration.
    Validate(SpecOverrides),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), experiment::ExperimentError> {
    match command {
        Command::Run(o) => {
            let report = experiment::run(&o.resolve()?)?;
            print_report(&report);
        }
        Command::Sweep { strategies, spec } => {
            let report = experiment::sweep(&spec.resolve()?, &strategies)?;
            print_report(&report);
        }
        Command::Validate(o) => {
            let spec = o.resolve()?;
            let errors = experiment::validate(&spec);
            if !errors.is_empty() {
                return Err(experiment::ExperimentError::Invalid(errors));
            }
            let _ = std::io::stdout().write_all(spec.to_toml_string()?.as_bytes());
            eprintln!("ok");
        }
    }
    Ok(())
}

fn print_report(report: &experiment::RunReport) {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>5} {:>9} {:>9} {:>9} {:>8} {:>8}",
        "strategy", "seeds", "acc_med", "acc_min", "acc_max", "%confl", "%wdom"
    );
    for s in &report.strategies {
        let r = &s.summary;
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2}",
            r.strategy,
            r.seeds,
            r.acc_median,
            r.acc_min,
            r.acc_max,
            r.pct_conflicting_mean,
            r.pct_wrongly_dominant_mean
        );
    }
    let _ = writeln!(out, "outputs in {}", report.dir.display());
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().write_all(out.as_bytes());
}
