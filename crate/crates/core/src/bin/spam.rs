use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spam::cli::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spam", version, about = "Sparse signed message passing experiments")]
struct Args {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train every seed and write metrics, summary and checkpoints.
    Run { config: PathBuf },
    /// Sweep the lambda_sp x lambda_st grid of the config.
    Grid { config: PathBuf },
    /// Test accuracy against the number of Monte-Carlo samples.
    McStudy { config: PathBuf },
    /// Accuracy under increasing perturbation.
    Robustness { config: PathBuf },
    /// Margin, support-recovery and posterior-consistency checks on a CSBM.
    CsbmVerify { config: PathBuf },
    /// Gradient and solver oracle checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(verb: Verb) -> spam::Result<bool> {
    let load = |p: &PathBuf| ExperimentConfig::load(p);
    match verb {
        Verb::Run { config } => {
            let s = cli::run(&load(&config)?)?;
            println!("{}: test accuracy {:.4} ± {:.4} over {} seeds", s.tag, s.mean, s.std, s.per_seed.len());
        }
        Verb::Grid { config } => {
            for r in cli::grid(&load(&config)?)? {
                println!("lambda_sp {:<8} lambda_st {:<8} {:.4} ± {:.4}", r.lambda_sp, r.lambda_st, r.mean_acc, r.std_acc);
            }
        }
        Verb::McStudy { config } => {
            for r in cli::mc_study(&load(&config)?)? {
                println!("K {:<5} {:.4} ± {:.4}", r.k, r.mean_acc, r.std_acc);
            }
        }
        Verb::Robustness { config } => {
            let t = cli::robustness(&load(&config)?)?;
            for r in &t.rows {
                println!("{:<8} {:.4} ± {:.4} ({} missing)", r.magnitude, r.mean_acc, r.std_acc, r.missing);
            }
        }
        Verb::CsbmVerify { config } => {
            let items = cli::csbm_verify(&load(&config)?)?;
            for i in &items {
                println!("{} {}: {}", if i.passed { "PASS" } else { "FAIL" }, i.name, i.detail);
            }
            return Ok(items.iter().all(|i| i.passed));
        }
        Verb::Check { seed } => {
            let items = cli::check(seed)?;
            for i in &items {
                let mark = if i.passed { "PASS" } else { "FAIL" };
                println!("{mark} {}: {:.3e} (tolerance {:.0e})", i.name, i.value, i.tolerance);
            }
            return Ok(items.iter().all(|i| i.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match cli::threads_from_env() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(args.verb) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
