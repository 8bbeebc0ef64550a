use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msm_iv_cli::{classify, commands, Outcome, ScenarioConfig};

/// Instrumented marginal structural model estimation: simulate panels,
/// run exact identity checks, fit estimators, and produce robustness and
/// efficiency reports from a JSON scenario config.
#[derive(Parser)]
#[command(name = "msm-iv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (falls back to MSM_IV_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Parse and validate the config, then exit.
    #[arg(long, global = true)]
    validate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a panel from the configured process and write it as CSV.
    Simulate,
    /// Run the exact identity checks and the probability-limit matrix.
    Oracle,
    /// Fit the requested estimators on a panel file.
    Fit {
        /// Long-format panel CSV.
        #[arg(long)]
        panel: PathBuf,
    },
    /// Population and finite-sample bias across misspecification patterns.
    Robustness,
    /// Enumerated asymptotic variances and Monte Carlo variances.
    Efficiency,
}

fn init_threads(threads: Option<usize>) {
    let n = threads.or_else(|| {
        std::env::var("MSM_IV_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // A second initialization (e.g. in tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: &Cli) -> msm_iv_core::Result<Outcome> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| msm_iv_core::Error::Config("--config is required".into()))?;
    let config = ScenarioConfig::load(config_path)?;
    if cli.validate {
        println!("config ok: hash {}", config.hash());
        return Ok(Outcome::Success);
    }
    match &cli.command {
        Command::Simulate => commands::cmd_simulate(&config, &cli.out),
        Command::Oracle => commands::cmd_oracle(&config, &cli.out),
        Command::Fit { panel } => commands::cmd_fit(&config, panel, &cli.out),
        Command::Robustness => commands::cmd_robustness(&config, &cli.out),
        Command::Efficiency => commands::cmd_efficiency(&config, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(&cli) {
        Ok(outcome) => {
            if outcome != Outcome::Success {
                eprintln!("finished with outcome {outcome:?}");
            }
            ExitCode::from(outcome.code() as u8)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(classify(&err).code() as u8)
        }
    }
}
