use serde::Serialize;
use trinet_core::autodiff::Tensor;
use trinet_core::harness::datasets::builtin_source;
use trinet_core::harness::{DataSource, DatasetConfig};
use trinet_core::nets::ClassHead;
use trinet_core::replay::{predict, predict_one, MetricsRow, Phase, Trainer, TrainerConfig};
use trinet_core::Result;

/// A class-incremental run on the ten-Gaussian toy data that advances one
/// epoch at a time.
pub struct ToyDemo {
    trainer: Trainer,
    source: Box<dyn DataSource>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepInfo {
    pub task: usize,
    pub epoch: usize,
    pub a_t: f64,
    pub acc_dprime: f64,
    pub acc_c: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub r_m: f64,
    /// The step closed its task, so a replay set was generated.
    pub task_finished: bool,
    /// Every task of the sequence has been trained.
    pub done: bool,
}

/// Mask values of every started task, by layer.
#[derive(Debug, Clone, Serialize)]
pub struct MaskView {
    pub widths: Vec<usize>,
    /// `masks[task][layer][unit]`; the task in progress shows its soft mask
    /// at the final annealing scale.
    pub masks: Vec<Vec<Vec<f64>>>,
    pub finished: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub class: usize,
    /// `max(p_a[k], p_b[k])` per class.
    pub combined: Vec<f64>,
    /// Whether the winning value came from the first table.
    pub from_first: bool,
}

/// The two-head decision rule with the per-class values it compares.
pub fn explain_decision(p_a: &[f64], p_b: &[f64]) -> Result<Decision> {
    let class = predict_one(p_a, p_b)?;
    let combined: Vec<f64> = p_a.iter().zip(p_b).map(|(a, b)| a.max(*b)).collect();
    Ok(Decision {
        class,
        from_first: p_a[class] >= p_b[class],
        combined,
    })
}

impl ToyDemo {
    pub fn new(seed: u64, epochs_per_task: usize) -> Result<Self> {
        let data = DatasetConfig {
            train_per_class: 100,
            test_per_class: 40,
            ..DatasetConfig::default()
        };
        let source = builtin_source(&data, seed)?;
        let config = TrainerConfig {
            epochs: epochs_per_task,
            fisher_samples: 200,
            ..TrainerConfig::default()
        };
        let first = source.classes_of(0).len();
        let trainer = Trainer::new(config, source.data_dim(), first, seed)?;
        Ok(ToyDemo {
            trainer,
            source: Box::new(source),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.source.num_tasks()
    }

    pub fn is_done(&self) -> bool {
        self.trainer.phase() == Phase::Idle && self.trainer.tasks_seen() == self.num_tasks()
    }

    /// Trains one epoch, starting the next task or closing the current one
    /// as needed. Returns `None` once the sequence is finished.
    pub fn step(&mut self) -> Result<Option<StepInfo>> {
        if self.is_done() {
            return Ok(None);
        }
        if self.trainer.phase() == Phase::Idle {
            let t = self.trainer.tasks_seen();
            self.trainer
                .begin_task(self.source.train(t)?, self.source.test(t)?)?;
        }
        let row: MetricsRow = self.trainer.run_epoch()?;
        let task_finished = row.epoch == self.trainer.config.epochs;
        if task_finished {
            self.trainer.end_task()?;
        }
        Ok(Some(StepInfo {
            task: row.task,
            epoch: row.epoch,
            a_t: row.accuracy.a_t,
            acc_dprime: row.accuracy.acc_dprime,
            acc_c: row.accuracy.acc_c,
            loss_d: row.loss_d,
            loss_g: row.loss_g,
            r_m: row.r_m,
            task_finished,
            done: self.is_done(),
        }))
    }

    /// Test points of all classes seen so far as `(xy pairs, labels)`.
    pub fn test_points(&self) -> Result<(Vec<f64>, Vec<usize>)> {
        let (x, y) = self.trainer.eval_set()?;
        Ok((x.data().to_vec(), y))
    }

    /// Stored generated samples of finished tasks as `(xy pairs, labels)`.
    pub fn replay_points(&self) -> (Vec<f64>, Vec<usize>) {
        let mut xy = Vec::new();
        let mut c = Vec::new();
        for set in &self.trainer.replay.generated {
            xy.extend_from_slice(set.x.data());
            c.extend_from_slice(&set.c);
        }
        (xy, c)
    }

    /// Predicted class on an `nx` by `ny` grid over the box, row-major
    /// starting at `(x0, y0)`. Empty before the first task starts.
    pub fn decision_grid(&self, nx: usize, ny: usize, bounds: [f64; 4]) -> Result<Vec<usize>> {
        if self.trainer.tasks_seen() == 0 || nx == 0 || ny == 0 {
            return Ok(Vec::new());
        }
        let [x0, x1, y0, y1] = bounds;
        let step = |lo: f64, hi: f64, n: usize, i: usize| {
            if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut pts = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                pts.push(step(x0, x1, nx, i));
                pts.push(step(y0, y1, ny, j));
            }
        }
        let x = Tensor::matrix(nx * ny, 2, pts)?;
        let pd = self.trainer.critic.class_probs(&x)?;
        let pc = self.trainer.classifier.class_probs(&x)?;
        predict(&pd, &pc)
    }

    pub fn masks(&self) -> Result<MaskView> {
        let m = &self.trainer.generator.masks;
        let mut masks = Vec::with_capacity(m.num_tasks());
        for t in 0..self.trainer.tasks_seen() {
            let layers = (0..m.num_layers())
                .map(|l| m.task_mask(t, l).map(|v| v.data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            masks.push(layers);
        }
        Ok(MaskView {
            widths: m.widths().to_vec(),
            masks,
            finished: m.num_finished(),
        })
    }
}
