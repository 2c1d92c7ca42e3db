use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mom_core::checks::{run_equivalence, run_gradcheck, GradcheckConfig, EQUIVALENCE_TOL_F32, EQUIVALENCE_TOL_F64};
use mom_core::recall::{compare, run_experiment, ExperimentConfig};
use mom_core::Result;

/// Train and check mixture-of-memories layers on synthetic associative recall.
#[derive(Parser)]
#[command(name = "mom", version)]
struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress per-step progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes run.json, loss.csv and routing.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train several configurations over a range of seeds.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Compare analytic layer gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the bucketed forward against the token-by-token forward.
    Equivalence {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let log_every = cfg.train.log_every;
            let record = run_experiment(&cfg, &mut |p| {
                if !cli.quiet && p.step % log_every == 0 {
                    eprintln!("step {:>6}  loss {:.5}  aux {:.6}", p.step, p.loss, p.aux_loss);
                }
            })?;
            record.write_artifacts(&cli.out)?;
            println!(
                "{}: accuracy {:.4} (initial {:.4}), {:.1}s",
                cfg.name,
                record.final_accuracy,
                record.initial_accuracy,
                record.wall_time.as_secs_f64()
            );
            for check in &record.invariants {
                println!("{} {}: {}", if check.pass { "ok  " } else { "FAIL" }, check.name, check.detail);
            }
            Ok(record.passed())
        }
        Command::Compare { configs, seeds, first_seed } => {
            let arms = configs.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (*first_seed..first_seed + seeds).collect();
            let report = compare(&arms, &seeds, &mut |name, seed, p| {
                if !cli.quiet && p.step % 100 == 0 {
                    eprintln!("{name} seed {seed} step {:>6}  loss {:.5}", p.step, p.loss);
                }
            })?;
            report.write_artifacts(&cli.out)?;
            for arm in &report.arms {
                println!(
                    "{:<20} accuracy {:.4} ± {:.4} (median {:.4})",
                    arm.name, arm.accuracy.mean, arm.accuracy.std, arm.accuracy.median
                );
            }
            Ok(report.passed())
        }
        Command::Gradcheck { config } => {
            let text = std::fs::read_to_string(config)?;
            let cfg = GradcheckConfig::from_toml(&text)?;
            let run = run_gradcheck(&cfg)?;
            std::fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join("gradcheck.json"), &run)?;
            for r in &run.reports {
                println!("{} max rel error {:.3e}  {}", if r.pass { "ok  " } else { "FAIL" }, r.max_rel_error(), r.fingerprint);
            }
            Ok(run.pass)
        }
        Command::Equivalence { trials, seed } => {
            let report = run_equivalence(*trials, *seed)?;
            std::fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join("equivalence.json"), &report)?;
            let mut w = csv::Writer::from_path(cli.out.join("equivalence.csv"))?;
            for t in &report.trials {
                w.serialize(t)?;
            }
            w.flush()?;
            println!(
                "{} trials: max error f64 {:.3e} (< {EQUIVALENCE_TOL_F64:e}), f32 {:.3e} (< {EQUIVALENCE_TOL_F32:e})",
                report.trials.len(),
                report.max_err_f64,
                report.max_err_f32
            );
            Ok(report.pass)
        }
    }
}
