use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lepdkrr::experiment::{run_experiment, sweep, write_outputs, ExperimentConfig, MRule};

#[derive(Parser)]
#[command(
    name = "lepdkrr",
    version,
    about = "Adaptive distributed kernel ridge regression experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run repeated experiments over a grid of total sample sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, strictly increasing total sample sizes.
        #[arg(long, value_delimiter = ',', default_value = "512,2048,8192")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Agents per run: `quarter` for ceil(n^(1/4)) or a fixed count.
        #[arg(long, default_value = "quarter")]
        m_rule: String,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for results.csv, selection_trace.csv and manifest.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> lepdkrr::Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

fn parse_m_rule(text: &str) -> Result<MRule, String> {
    match text {
        "quarter" => Ok(MRule::QuarterPower),
        other => other.parse().map(|m| MRule::Fixed { m }).map_err(|_| {
            format!("invalid --m-rule '{other}': use 'quarter' or a positive integer")
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run(common) => {
            let config = common.load().map_err(|e| e.to_string())?;
            let result = run_experiment(&config).map_err(|e| e.to_string())?;
            write_outputs(&common.out, &config, std::slice::from_ref(&result), None)
                .map_err(|e| e.to_string())?;
            println!(
                "n={} m={} K*={} k*={:?} rho_err={:.4e} k_err={:.4e} oracle_err={:.4e} floats={} wall_ms={}",
                result.n,
                result.m,
                result.k_star,
                result.selected_k,
                result.rho_err,
                result.k_err,
                result.oracle_err,
                result.floats_sent,
                result.wall_ms
            );
            println!("wrote {}", common.out.display());
            Ok(())
        }
        Command::Sweep {
            common,
            grid,
            reps,
            m_rule,
        } => {
            let config = common.load().map_err(|e| e.to_string())?;
            let rule = parse_m_rule(&m_rule)?;
            match sweep(&config, &grid, rule, reps) {
                Ok(result) => {
                    write_outputs(&common.out, &config, &result.runs, Some(&result.summary))
                        .map_err(|e| e.to_string())?;
                    let s = &result.summary;
                    for ((n, e), o) in s.n_grid.iter().zip(&s.mean_rho_err).zip(&s.mean_oracle_err)
                    {
                        println!("n={n} mean_rho_err={e:.4e} mean_oracle_err={o:.4e}");
                    }
                    println!("slope={:.4}", s.slope);
                    println!("wrote {}", common.out.display());
                    Ok(())
                }
                Err(failure) => {
                    write_outputs(&common.out, &config, &failure.partial, None)
                        .map_err(|e| e.to_string())?;
                    Err(format!(
                        "{failure}; {} completed runs written to {}",
                        failure.partial.len(),
                        common.out.display()
                    ))
                }
            }
        }
    }
}
