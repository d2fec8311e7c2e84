//! Command-line front end: parses scenario configs, dispatches to the
//! harness, and maps outcomes to exit codes (0 success, 1 runtime failure,
//! 2 usage or config error, 3 weight collapse, 4 divergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fpf::harness::{
    compare_filters, gaindump, run_scenario, HarnessError, ScenarioConfig, TrialOutcome,
};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_COLLAPSE: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fpf",
    version,
    about = "Continuous-time filtering scenarios: feedback particle filter, baselines, grid oracle"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write truth.csv, estimate_<filter>.csv, and
    /// report.txt.
    Run {
        /// Scenario config file (flat key=value lines).
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config and FPF_OUT_DIR).
        #[arg(long)]
        out: Option<String>,
        /// Override the config's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run several configs against shared truth paths and write
    /// comparison.csv.
    Compare {
        /// Scenario config files; all must agree on model, time grid,
        /// seed, and trials.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Override every config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for comparison.csv.
        #[arg(long)]
        out: Option<String>,
        /// Override every config's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Replay an fpf scenario to a time and write the gain field there as
    /// gain_at_<t>.csv.
    Gaindump {
        /// Scenario config file; must use filter=fpf.
        config: PathBuf,
        /// Time at which to dump the gain field.
        #[arg(long)]
        at: f64,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config and FPF_OUT_DIR).
        #[arg(long)]
        out: Option<String>,
    },
}

fn apply_overrides(
    config: &mut ScenarioConfig,
    seed: Option<u64>,
    out: Option<&String>,
    trials: Option<usize>,
) -> Result<(), String> {
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = Some(out.clone());
    }
    if let Some(trials) = trials {
        if trials == 0 {
            return Err("--trials must be at least 1".into());
        }
        config.trials = trials;
    }
    Ok(())
}

fn exit_code_for(error: &HarnessError) -> u8 {
    match error {
        HarnessError::Config(_)
        | HarnessError::Incompatible(_)
        | HarnessError::GaindumpNeedsFpf
        | HarnessError::BadDumpTime { .. } => EXIT_USAGE,
        HarnessError::Io { .. } | HarnessError::Metric(_) | HarnessError::Internal(_) => {
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Result<u8, HarnessError> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            trials,
        } => {
            let mut scenario = ScenarioConfig::from_file(&config)?;
            apply_overrides(&mut scenario, seed, out.as_ref(), trials)
                .map_err(HarnessError::Incompatible)?;
            let report = run_scenario(&scenario)?;
            println!(
                "ran {} trial(s): {} collapsed, {} diverged",
                report.outcomes.len(),
                report.collapse_count,
                report.divergence_count
            );
            let first_failure = report
                .outcomes
                .iter()
                .find(|o| !matches!(o, TrialOutcome::Ok { .. }));
            Ok(match first_failure {
                Some(TrialOutcome::Collapsed { .. }) => EXIT_COLLAPSE,
                Some(TrialOutcome::Diverged { .. }) => EXIT_DIVERGENCE,
                _ => 0,
            })
        }
        Command::Compare {
            configs,
            seed,
            out,
            trials,
        } => {
            let mut scenarios = Vec::with_capacity(configs.len());
            for path in &configs {
                let mut scenario = ScenarioConfig::from_file(path)?;
                apply_overrides(&mut scenario, seed, out.as_ref(), trials)
                    .map_err(HarnessError::Incompatible)?;
                scenarios.push(scenario);
            }
            let rows = compare_filters(&scenarios)?;
            println!("compared {} config(s)", rows.len());
            Ok(0)
        }
        Command::Gaindump {
            config,
            at,
            seed,
            out,
        } => {
            let mut scenario = ScenarioConfig::from_file(&config)?;
            apply_overrides(&mut scenario, seed, out.as_ref(), None)
                .map_err(HarnessError::Incompatible)?;
            let path = gaindump(&scenario, at)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
