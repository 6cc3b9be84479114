use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peiv_cli::{cmd_benchmark, cmd_estimate, cmd_simulate, exit_code, sidecar_path, with_threads};
use peiv_core::Method;

#[derive(Parser)]
#[command(name = "peiv", version, about = "Joint state and parameter estimation experiments")]
struct Cli {
    /// Worker threads for Monte Carlo runs.
    #[arg(long, global = true, env = "PEIV_THREADS")]
    threads: Option<usize>,
    /// Only errors go to stderr; stdout carries only output paths.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory to CSV.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate states and parameters from a trajectory CSV.
    Estimate {
        config: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo comparison over a grid of batch sizes.
    Benchmark {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Simulate { config, seed, out } => {
            cmd_simulate(&config, seed, &out)?;
            Ok(vec![sidecar_path(&out), out])
        }
        Command::Estimate {
            config,
            method,
            data,
            out,
        } => {
            let res = cmd_estimate(&config, method, &data, &out)?;
            if !quiet {
                eprintln!(
                    "{}: theta = {:?}, {} iterations, converged = {}",
                    res.method, res.theta_hat, res.iterations, res.converged
                );
            }
            Ok(vec![PathBuf::from(res.xhat_path), out])
        }
        Command::Benchmark { config, out_dir } => {
            let start = std::time::Instant::now();
            let paths = with_threads(cli.threads, || cmd_benchmark(&config, out_dir.as_deref()))??;
            if !quiet {
                eprintln!("benchmark finished in {:.1} s", start.elapsed().as_secs_f64());
            }
            Ok(paths)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
