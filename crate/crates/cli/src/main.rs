use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saip_core::harness::{self, RunConfig, VerifyOptions, EXIT_USAGE};
use saip_core::Error;

const OUT_ENV: &str = "SAIP_LAB_OUT";
const DEFAULT_OUT: &str = "saip-lab-out";

/// Diffusion posterior sampling experiments with an adaptive prior-score scale.
#[derive(Parser, Debug)]
#[command(name = "saip-lab", version)]
struct Cli {
    /// Run config (TOML), or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory. Falls back to the config, then $SAIP_LAB_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel chains (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run baseline and SAIP variants of the configured task.
    Run,
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        /// Add this offset to every adaptive scale (fault injection).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        perturb_s: f64,
    },
    /// Sweep the guidance scale on a synthetic task.
    Sweep {
        /// Comma-separated guidance scales.
        #[arg(long, value_delimiter = ',', required = true)]
        omegas: Vec<f64>,
    },
    /// Summarise a trace CSV and write a gnuplot data file.
    TracePlot { trace_csv: PathBuf },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.io.output_dir.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run(cli: &Cli) -> Result<i32, Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Run => {
            let cfg = load_config(cli)?;
            let out = output_dir(cli, Some(&cfg));
            let summary = harness::cmd_run(&cfg, &out)?;
            print!("{}", harness::metrics_csv(&summary.manifest.metrics));
            println!(
                "wrote {} files to {}",
                summary.manifest.files.len() + 1,
                out.display()
            );
            eprint!("{}", summary.failure_report());
            Ok(summary.exit_code())
        }
        Command::Verify { perturb_s } => {
            let report = harness::cmd_verify(&VerifyOptions {
                perturb_s: *perturb_s,
            })?;
            print!("{}", report.render());
            Ok(report.exit_code())
        }
        Command::Sweep { omegas } => {
            let cfg = load_config(cli)?;
            let out = output_dir(cli, Some(&cfg));
            let summary = harness::cmd_sweep(&cfg, omegas, &out)?;
            for r in &summary.rows {
                println!(
                    "omega {:<8} {:<8} sw {:.5}",
                    r.omega,
                    r.variant.name(),
                    r.sw_distance
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
            eprint!("{}", summary.manifest.failures.join("\n"));
            Ok(summary.exit_code())
        }
        Command::TracePlot { trace_csv } => {
            let out = cli.out.as_deref();
            let summary = harness::cmd_trace_plot(trace_csv, out)?;
            print!("{}", summary.render());
            Ok(harness::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code_for(&e) as u8)
        }
    }
}
