use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evproc::experiment::{
    check_kernel, emit_plot_data, load_config, run_experiment, shipped_kernels, static_checks, write_kl_tables,
    ExperimentConfig, SamplerKind,
};
use evproc::kernels::{make_kernel, uniform_grid};
use evproc::Error;

/// Eigenvector processes of Wigner matrices: simulation and checks.
#[derive(Parser)]
#[command(name = "evproc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `ensemble.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate eigenvector paths and write paths, covariance and diagnostics.
    Simulate(RunArgs),
    /// Same outputs from the limiting Gaussian process instead of matrices.
    Reference(RunArgs),
    /// Write the KL eigenvalues and eigenfunctions of a `kl` observable.
    Kl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positive-type and increment-modulus checks of the shipped kernels.
    Kernels {
        /// Number of uniform grid points.
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
    /// Hypothesis reports for a config, without simulation.
    Check {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report to this directory as checks.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write slices.csv from a run directory's covariance.csv.
    Slices {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<ExperimentConfig, Error> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.ensemble.master_seed = s;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Simulate(a) => simulate(a, None),
        Command::Reference(a) => simulate(a, Some(SamplerKind::GaussianReference)),
        Command::Kl { config, out } => {
            let cfg = load(&config, None, None)?;
            let rows = write_kl_tables(&cfg, &out)?;
            println!("mode,lambda,sup_norm");
            for r in rows {
                println!("{},{:.10e},{:.6}", r.mode, r.lambda, r.sup_norm);
            }
            Ok(true)
        }
        Command::Kernels { points } => {
            if points < 3 {
                return Err(Error::InvalidInput("need at least 3 grid points".into()));
            }
            let grid = uniform_grid(points);
            let mut all = true;
            for spec in shipped_kernels() {
                let kernel = make_kernel(spec.spec())?;
                let r = check_kernel(&kernel, &grid)?;
                all &= r.passed;
                println!(
                    "{:<40} positive={} min_eig={:+.3e} covlip={} L_hat={:.4} gamma_hat={:.3}",
                    r.name,
                    r.positive_type.positive,
                    r.positive_type.min_eigenvalue,
                    r.covlip.pass,
                    r.covlip.l_hat,
                    r.covlip.gamma_hat
                );
            }
            Ok(all)
        }
        Command::Check { config, out, threads } => {
            let cfg = load(&config, None, threads)?;
            let report = static_checks(&cfg)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("checks.json"), format!("{json}\n"))?;
            }
            println!("{json}");
            Ok(report.passed)
        }
        Command::Slices { out } => {
            let path = emit_plot_data(&out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

fn simulate(a: RunArgs, sampler: Option<SamplerKind>) -> Result<bool, Error> {
    let mut cfg = load(&a.config, a.seed, a.threads)?;
    if let Some(s) = sampler {
        cfg.sampler = s;
    }
    let result = run_experiment(&cfg, &a.out)?;
    for c in &result.diagnostics.checks {
        println!(
            "{:<12} {}  {}",
            format!("{:?}", c.name).to_lowercase(),
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    println!("outputs in {}", result.out_dir.display());
    Ok(result.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
