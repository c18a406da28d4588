use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CHECKPOINT_VERSION,
};
use super::config::ExperimentConfig;
use super::datasets::{open_source, DataSource};
use super::format::fmt_g;
use crate::diagnostics::{
    joint_head_interference_experiment, mask_usage_report, replay_alignment_experiment,
    SimilarityReport,
};
use crate::error::{Error, Result};
use crate::replay::{AccuracyReport, MetricsRow, Phase, Trainer};

/// Environment variable naming the output directory.
pub const OUT_DIR_ENV: &str = "TRINET_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "trinet-out";

pub const METRICS_HEADER: [&str; 11] = [
    "task",
    "epoch",
    "A_t",
    "acc_Dprime",
    "acc_C",
    "acc_ensemble",
    "loss_D",
    "loss_Dprime",
    "loss_C",
    "loss_G",
    "R_M",
];

/// `explicit`, else the environment variable, else the default.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let a = &r.accuracy;
        let mut rec = vec![r.task.to_string(), r.epoch.to_string()];
        rec.extend(
            [
                a.a_t,
                a.acc_dprime,
                a.acc_c,
                a.acc_ensemble,
                r.loss_d,
                r.loss_dprime,
                r.loss_c,
                r.loss_g,
                r.r_m,
            ]
            .map(fmt_g),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_file(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write_atomic(path, &buf)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many epochs in this invocation.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub status: RunStatus,
    pub history: Vec<MetricsRow>,
    pub latest_checkpoint: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    checkpoint_format: u32,
    seed: u64,
    config_hash: String,
    config: String,
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

pub fn latest_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("latest.ckpt")
}

/// Checkpoint written when task `task` (1-based) is finished.
pub fn task_checkpoint_path(out_dir: &Path, task: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("task{task}.ckpt"))
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

impl Run<'_> {
    fn save(&self, trainer: &Trainer, extra: Option<PathBuf>) -> Result<()> {
        let ckpt = Checkpoint::new(self.cfg, trainer)?;
        save_checkpoint(&latest_checkpoint_path(self.out), &ckpt)?;
        if let Some(p) = extra {
            save_checkpoint(&p, &ckpt)?;
        }
        Ok(())
    }

    fn write_metrics(&self, trainer: &Trainer) -> Result<()> {
        write_csv_file(&metrics_path(self.out), |b| {
            write_metrics_csv(&trainer.history, b)
        })
    }

    fn dump_abort(&self, trainer: &Trainer, err: &Error) -> Result<()> {
        let mut text = format!(
            "run aborted: {err}\nphase: {:?}\n\nlast metrics:\n",
            trainer.phase()
        );
        let mut rows = Vec::new();
        let tail = trainer.history.len().saturating_sub(5);
        write_metrics_csv(&trainer.history[tail..], &mut rows)?;
        text.push_str(&String::from_utf8_lossy(&rows));
        text.push_str("\nconfig:\n");
        text.push_str(&self.cfg.to_toml()?);
        write_atomic(&self.out.join("abort.txt"), text.as_bytes())
    }
}

/// Trains through the whole task sequence, writing metrics, checkpoints, a
/// manifest and a mask usage table into `opts.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    run_experiment_with(cfg, opts, |_| {})
}

/// [`run_experiment`] with a callback after every epoch.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    cfg.validate()?;
    let out = opts.out_dir.as_path();
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let source = open_source(&cfg.dataset, cfg.seed)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config_hash != cfg.hash()? {
                return Err(Error::Config {
                    key: "resume".into(),
                    message: format!(
                        "checkpoint {} was written with a different config",
                        path.display()
                    ),
                });
            }
            ckpt.trainer
        }
        None => Trainer::new(
            cfg.trainer.clone(),
            source.data_dim(),
            source.classes_of(0).len(),
            cfg.seed,
        )?,
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: CHECKPOINT_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        config: cfg.to_toml()?,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
    write_atomic(&out.join("manifest.json"), format!("{json}\n").as_bytes())?;

    let run = Run { cfg, out };
    match drive(
        &run,
        &mut trainer,
        source.as_ref(),
        opts.stop_after_epochs,
        &mut on_epoch,
    ) {
        Ok(status) => {
            if status == RunStatus::Finished {
                write_mask_usage(out, &trainer)?;
            }
            Ok(RunSummary {
                status,
                history: trainer.history.clone(),
                latest_checkpoint: latest_checkpoint_path(out),
            })
        }
        Err(e) => {
            if matches!(e, Error::Aborted(_)) {
                run.dump_abort(&trainer, &e)?;
            }
            Err(e)
        }
    }
}

fn drive(
    run: &Run,
    trainer: &mut Trainer,
    source: &dyn DataSource,
    budget: Option<usize>,
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<RunStatus> {
    let mut budget = budget;
    loop {
        let task = match trainer.phase() {
            Phase::Idle => {
                let t = trainer.tasks_seen();
                if t == source.num_tasks() {
                    return Ok(RunStatus::Finished);
                }
                trainer.begin_task(source.train(t)?, source.test(t)?)?;
                t
            }
            Phase::Training { task, .. } => {
                if !trainer.holds_real_data() {
                    trainer.attach(source.train(task)?)?;
                }
                task
            }
        };
        while let Phase::Training { epochs_done, .. } = trainer.phase() {
            if epochs_done == trainer.config.epochs {
                break;
            }
            if budget == Some(0) {
                return Ok(RunStatus::Stopped);
            }
            let row = trainer.run_epoch()?;
            on_epoch(&row);
            budget = budget.map(|b| b - 1);
            run.write_metrics(trainer)?;
            run.save(trainer, None)?;
        }
        trainer.end_task()?;
        run.save(trainer, Some(task_checkpoint_path(run.out, task + 1)))?;
    }
}

fn write_mask_usage(out: &Path, trainer: &Trainer) -> Result<()> {
    let masks = &trainer.generator.masks;
    let report = mask_usage_report(masks, masks.num_finished())?;
    write_csv_file(&out.join("mask_usage.csv"), |b| {
        let mut w = csv_writer(b);
        w.write_record(["layer", "width", "used", "exclusive", "shared", "free"])?;
        for l in &report {
            w.write_record([
                l.layer.to_string(),
                l.width.to_string(),
                fmt_g(l.used),
                fmt_g(l.exclusive),
                fmt_g(l.shared),
                fmt_g(l.free),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Accuracy of a checkpoint on the union test set of the classes it has seen.
pub fn evaluate_checkpoint(path: &Path) -> Result<(Checkpoint, AccuracyReport)> {
    let ckpt = load_checkpoint(path)?;
    let report = ckpt.trainer.evaluate()?;
    Ok((ckpt, report))
}

pub fn write_eval_csv<W: Write>(tasks: usize, r: &AccuracyReport, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["tasks", "A_t", "acc_Dprime", "acc_C", "acc_ensemble"])?;
    w.write_record([
        tasks.to_string(),
        fmt_g(r.a_t),
        fmt_g(r.acc_dprime),
        fmt_g(r.acc_c),
        fmt_g(r.acc_ensemble),
    ])?;
    w.flush()?;
    Ok(())
}

/// Real-versus-generated importance similarity over a strength sweep;
/// writes `fim_similarity.csv`.
pub fn run_fim_diagnostic(
    cfg: &ExperimentConfig,
    lambdas: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<SimilarityReport> {
    let mut settings = cfg.alignment.clone();
    if let Some(l) = lambdas {
        if l.is_empty() || l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config {
                key: "lambdas".into(),
                message: "must be a non-empty list of values ≥ 0".into(),
            });
        }
        settings.lambdas = l;
    }
    let source = open_source(&cfg.dataset, cfg.seed)?;
    let mut report =
        replay_alignment_experiment(&cfg.trainer, source.as_ref(), &settings, cfg.seed)?;
    report.dataset = cfg.dataset.id.clone();
    std::fs::create_dir_all(out_dir)?;
    write_csv_file(&out_dir.join("fim_similarity.csv"), |b| report.write_csv(b))?;
    Ok(report)
}

/// Critic-versus-auxiliary trunk importance similarity; writes
/// `joint_head_similarity.csv`.
pub fn run_joint_head_diagnostic(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<SimilarityReport> {
    let source = open_source(&cfg.dataset, cfg.seed)?;
    let mut report = joint_head_interference_experiment(
        &cfg.trainer,
        source.as_ref(),
        &cfg.interference,
        cfg.seed,
    )?;
    report.dataset = cfg.dataset.id.clone();
    std::fs::create_dir_all(out_dir)?;
    write_csv_file(&out_dir.join("joint_head_similarity.csv"), |b| {
        report.write_csv(b)
    })?;
    Ok(report)
}
