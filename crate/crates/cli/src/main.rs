use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trinet_core::harness::{
    evaluate_checkpoint, output_dir, parse_config, run_experiment_with, run_fim_diagnostic,
    run_joint_head_diagnostic, write_eval_csv, ExperimentConfig, RunOptions, RunStatus,
};
use trinet_core::Result;

/// Class-incremental training with a masked generator, a critic with an
/// auxiliary classifier, and an independent classifier.
#[derive(Parser)]
#[command(name = "trinet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through the configured task sequence.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to $TRINET_OUT_DIR, then ./trinet-out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test data of every class it has seen.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Importance similarity between real and generated data over a
    /// consolidation-strength sweep.
    DiagnoseFim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Importance similarity of the critic and auxiliary heads on their shared trunk.
    DiagnoseJointHead {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            resume,
            out,
            stop_after_epochs,
        } => {
            let cfg = load(&config, seed)?;
            let opts = RunOptions {
                out_dir: output_dir(out.as_deref()),
                resume,
                stop_after_epochs,
            };
            let summary = run_experiment_with(&cfg, &opts, |r| {
                eprintln!(
                    "task {} epoch {}: A_t {:.2} (D' {:.2}, C {:.2})",
                    r.task, r.epoch, r.accuracy.a_t, r.accuracy.acc_dprime, r.accuracy.acc_c
                );
            })?;
            match (summary.status, summary.history.last()) {
                (RunStatus::Finished, Some(r)) => println!(
                    "finished {} tasks: A_{} = {:.2}; results in {}",
                    r.task,
                    r.task,
                    r.accuracy.a_t,
                    opts.out_dir.display()
                ),
                (RunStatus::Finished, None) => println!("nothing to train"),
                (RunStatus::Stopped, _) => println!(
                    "stopped; resume with --resume {}",
                    summary.latest_checkpoint.display()
                ),
            }
        }
        Command::Eval { ckpt } => {
            let (c, report) = evaluate_checkpoint(&ckpt)?;
            write_eval_csv(c.trainer.tasks_seen(), &report, std::io::stdout().lock())?;
        }
        Command::DiagnoseFim {
            config,
            lambdas,
            seed,
            out,
        } => {
            let cfg = load(&config, seed)?;
            let dir = output_dir(out.as_deref());
            let report = run_fim_diagnostic(&cfg, lambdas, &dir)?;
            let mut seen = Vec::new();
            for r in &report.rows {
                if !seen.contains(&r.lambda) {
                    seen.push(r.lambda);
                    let mean = report.mean_cosine(r.lambda).unwrap_or(0.0);
                    println!("lambda {}: mean cosine {mean:.4}", r.lambda);
                }
            }
            println!("wrote {}", dir.join("fim_similarity.csv").display());
        }
        Command::DiagnoseJointHead { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let dir = output_dir(out.as_deref());
            let report = run_joint_head_diagnostic(&cfg, &dir)?;
            for r in &report.rows {
                println!(
                    "{}: cosine {:.4}, correlation {:.4}",
                    r.group, r.cosine, r.correlation
                );
            }
            println!("wrote {}", dir.join("joint_head_similarity.csv").display());
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
