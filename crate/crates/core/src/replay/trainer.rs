use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BatchMixing, TrainerConfig};
use super::data::{
    build_replay_dataset, sample_replay_labels, GeneratedSet, Origin, ReplayDataset, ReplayState,
    TaskDataset,
};
use super::decision::{average_accuracy, AccuracyReport};
use super::losses::{
    aux_loss, classifier_importance_loss, classifier_loss, critic_loss, cross_entropy,
    generator_loss, one_hot, GpMode,
};
use crate::autodiff::{apply_gate, Graph, Optimizer, ParamStore, Tensor};
use crate::consolidation::{estimate_fisher, ConsolidationState, FisherMap, ImportanceSource};
use crate::error::{Error, Result};
use crate::nets::{ClassHead, ClassifierNet, CriticNet, GeneratorNet, GeneratorSpec, TrainingMask};

/// One row of the metrics log. Task and epoch are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: usize,
    pub epoch: usize,
    pub accuracy: AccuracyReport,
    pub loss_d: f64,
    pub loss_dprime: f64,
    pub loss_c: f64,
    pub loss_g: f64,
    pub r_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Training { task: usize, epochs_done: usize },
}

/// Loss values of one batch, used for the epoch means.
#[derive(Debug, Clone, Copy, Default)]
struct BatchLosses {
    d: f64,
    dprime: f64,
    c: f64,
    g: f64,
    r_m: f64,
}

/// Real data of the task in progress. Never serialized.
#[derive(Debug, Clone)]
struct ActiveTask {
    data: TaskDataset,
    merged: ReplayDataset,
}

/// Complete state of a class-incremental run: the three networks, their
/// consolidation state, generated replay sets and the RNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub generator: GeneratorNet,
    pub critic: CriticNet,
    pub classifier: ClassifierNet,
    pub cons_dprime: ConsolidationState,
    pub cons_c: ConsolidationState,
    pub replay: ReplayState,
    opt_critic: Optimizer,
    opt_aux: Optimizer,
    opt_classifier: Optimizer,
    opt_generator: Optimizer,
    opt_mask: Optimizer,
    rng: ChaCha8Rng,
    task_classes: Vec<Vec<usize>>,
    eval_x: Vec<f64>,
    eval_y: Vec<usize>,
    data_dim: usize,
    phase: Phase,
    pub history: Vec<MetricsRow>,
    #[serde(skip)]
    active: Option<ActiveTask>,
}

impl PartialEq for Trainer {
    fn eq(&self, other: &Self) -> bool {
        // The active task is rebuilt from the data source on resume.
        bincode::serialize(self).ok() == bincode::serialize(other).ok()
    }
}

impl Trainer {
    /// Fresh networks sized for the first task's `first_classes` classes.
    pub fn new(
        config: TrainerConfig,
        data_dim: usize,
        first_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if data_dim == 0 {
            return Err(Error::InvalidArgument(
                "data dimension must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = &config.architecture;
        let spec = GeneratorSpec {
            latent_dim: a.latent_dim,
            embedding_dim: a.embedding_dim,
            hidden: a.generator_hidden.clone(),
            data_dim,
            output: a.generator_output,
            slope: a.slope,
            s_max: config.s_max,
            binarize_masks: config.binarize_masks,
        };
        let generator = GeneratorNet::new(spec, first_classes, &mut rng)?;
        let critic = CriticNet::new(
            data_dim,
            a.critic_hidden.clone(),
            first_classes,
            a.slope,
            &mut rng,
        )?;
        let classifier = ClassifierNet::new(
            data_dim,
            a.classifier_hidden.clone(),
            first_classes,
            a.slope,
            &mut rng,
        )?;
        let cons = |kind, lambda| {
            ConsolidationState::new(kind, lambda, config.fisher_combine, config.si_xi)
        };
        Ok(Trainer {
            cons_dprime: cons(config.consolidation_dprime, config.lambda_dprime),
            cons_c: cons(config.consolidation_c, config.lambda_c),
            opt_critic: Optimizer::new(config.optimizer),
            opt_aux: Optimizer::new(config.optimizer),
            opt_classifier: Optimizer::new(config.optimizer),
            opt_generator: Optimizer::new(config.generator_settings()),
            opt_mask: Optimizer::new(config.mask_settings()),
            generator,
            critic,
            classifier,
            replay: ReplayState::default(),
            rng,
            task_classes: Vec::new(),
            eval_x: Vec::new(),
            eval_y: Vec::new(),
            data_dim,
            phase: Phase::Idle,
            history: Vec::new(),
            active: None,
            config,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Number of tasks started so far.
    pub fn tasks_seen(&self) -> usize {
        self.task_classes.len()
    }

    pub fn task_classes(&self) -> &[Vec<usize>] {
        &self.task_classes
    }

    pub fn num_classes(&self) -> usize {
        self.task_classes.iter().map(Vec::len).sum()
    }

    /// True while real data of the current task is held.
    pub fn holds_real_data(&self) -> bool {
        self.active.is_some()
    }

    /// Union test set of all classes seen so far.
    pub fn eval_set(&self) -> Result<(Tensor, Vec<usize>)> {
        let x = Tensor::matrix(self.eval_y.len(), self.data_dim, self.eval_x.clone())?;
        Ok((x, self.eval_y.clone()))
    }

    pub fn evaluate(&self) -> Result<AccuracyReport> {
        let (x, y) = self.eval_set()?;
        average_accuracy(&self.critic, &self.classifier, &x, &y)
    }

    /// Expands the networks for a new task and takes ownership of its real
    /// training data. `test` joins the evaluation set.
    pub fn begin_task(&mut self, train: TaskDataset, test: TaskDataset) -> Result<()> {
        if self.phase != Phase::Idle {
            return Err(Error::InvalidArgument(
                "previous task has not finished".into(),
            ));
        }
        let task = self.task_classes.len();
        let offset = self.num_classes();
        let expected: Vec<usize> = (offset..offset + train.classes.len()).collect();
        if train.task != task || train.classes != expected || test.classes != train.classes {
            return Err(Error::InvalidArgument(format!(
                "expected task {} with classes {:?}, got task {} with classes {:?}",
                task + 1,
                expected,
                train.task + 1,
                train.classes
            )));
        }
        if train.dim() != self.data_dim || test.dim() != self.data_dim {
            return Err(Error::shape(
                "task dataset",
                format!("expected width {}", self.data_dim),
            ));
        }
        let k = train.classes.len();
        if task == 0 {
            if self.critic.num_classes() != k {
                return Err(Error::InvalidArgument(format!(
                    "networks were built for {} classes, first task has {k}",
                    self.critic.num_classes()
                )));
            }
        } else {
            let total = offset + k;
            self.critic.expand_output_layer(total, &mut self.rng)?;
            self.classifier.expand_output_layer(total, &mut self.rng)?;
            self.generator.add_task(k, &mut self.rng)?;
        }
        self.task_classes.push(train.classes.clone());
        self.eval_x.extend_from_slice(test.x.data());
        self.eval_y.extend_from_slice(&test.y);
        for o in [
            &mut self.opt_critic,
            &mut self.opt_aux,
            &mut self.opt_classifier,
            &mut self.opt_generator,
            &mut self.opt_mask,
        ] {
            o.reset();
        }
        let dnames = self.critic.aux_names();
        self.cons_dprime.begin_task(&self.critic.params, &dnames)?;
        let cnames = names(&self.classifier.params);
        self.cons_c.begin_task(&self.classifier.params, &cnames)?;
        self.phase = Phase::Training {
            task,
            epochs_done: 0,
        };
        self.attach(train)
    }

    /// Re-supplies the current task's real data after restoring a checkpoint.
    pub fn attach(&mut self, train: TaskDataset) -> Result<()> {
        let Phase::Training { task, .. } = self.phase else {
            return Err(Error::InvalidArgument("no task in progress".into()));
        };
        if train.task != task || train.classes != self.task_classes[task] {
            return Err(Error::InvalidArgument(format!(
                "attached data belongs to task {}, expected {}",
                train.task + 1,
                task + 1
            )));
        }
        let merged = build_replay_dataset(&self.replay, &train)?;
        self.active = Some(ActiveTask {
            data: train,
            merged,
        });
        Ok(())
    }

    /// Row indices of each batch of one epoch over the replay set.
    fn epoch_batches(&mut self, merged: &ReplayDataset) -> Vec<Vec<usize>> {
        let bs = self.config.batch_size;
        let (mut real, mut generated): (Vec<usize>, Vec<usize>) =
            (0..merged.len()).partition(|&i| merged.origin[i] == Origin::Real);
        if self.config.batch_mixing == BatchMixing::Uniform || generated.is_empty() || bs < 2 {
            let mut order: Vec<usize> = (0..merged.len()).collect();
            order.shuffle(&mut self.rng);
            return order.chunks(bs).map(<[usize]>::to_vec).collect();
        }
        // Half of every batch is real data of the current task, the other
        // half cycles through the generated sets.
        real.shuffle(&mut self.rng);
        generated.shuffle(&mut self.rng);
        let half = bs / 2;
        let mut next = 0;
        let mut out = Vec::with_capacity(real.len().div_ceil(bs - half));
        for chunk in real.chunks(bs - half) {
            let mut batch = chunk.to_vec();
            for _ in 0..half.min(chunk.len()) {
                if next == generated.len() {
                    generated.shuffle(&mut self.rng);
                    next = 0;
                }
                batch.push(generated[next]);
                next += 1;
            }
            out.push(batch);
        }
        out
    }

    /// Mask scale for a batch: linear from 1 to `s_max` over the task.
    fn mask_scale(&self, batch: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.config.s_max;
        }
        1.0 + (self.config.s_max - 1.0) * batch as f64 / (total - 1) as f64
    }

    /// Trains one epoch of the current task and returns its metrics row.
    pub fn run_epoch(&mut self) -> Result<MetricsRow> {
        let Phase::Training { task, epochs_done } = self.phase else {
            return Err(Error::InvalidArgument("no task in progress".into()));
        };
        if epochs_done >= self.config.epochs {
            return Err(Error::InvalidArgument(
                "all epochs of this task are done".into(),
            ));
        }
        if self.active.is_none() {
            return Err(Error::InvalidArgument(
                "real data of the current task is not attached".into(),
            ));
        }
        if self.config.resample_replay && task > 0 {
            self.regenerate_replay(task)?;
        }
        let merged = self.active.as_ref().expect("checked above").merged.clone();
        let batches = self.epoch_batches(&merged);
        let bpe = batches.len();
        let total = bpe * self.config.epochs;
        let mut sums = BatchLosses::default();
        let mut count = 0.0f64;
        for (b, chunk) in batches.iter().enumerate() {
            let xb = merged.x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| merged.y[i]).collect();
            let s = self.mask_scale(epochs_done * bpe + b, total);
            let l = self.step_batch(task, &xb, &yb, s).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Shape { .. } => Error::Aborted(format!(
                    "task {} epoch {} batch {}: {e}; epoch means so far: D {:.6} D' {:.6} C {:.6} G {:.6}",
                    task + 1,
                    epochs_done + 1,
                    b + 1,
                    sums.d / count.max(1.0),
                    sums.dprime / count.max(1.0),
                    sums.c / count.max(1.0),
                    sums.g / count.max(1.0),
                )),
                other => other,
            })?;
            sums.d += l.d;
            sums.dprime += l.dprime;
            sums.c += l.c;
            sums.g += l.g;
            sums.r_m += l.r_m;
            count += 1.0;
        }
        let row = MetricsRow {
            task: task + 1,
            epoch: epochs_done + 1,
            accuracy: self.evaluate()?,
            loss_d: sums.d / count,
            loss_dprime: sums.dprime / count,
            loss_c: sums.c / count,
            loss_g: sums.g / count,
            r_m: sums.r_m / count,
        };
        self.history.push(row);
        self.phase = Phase::Training {
            task,
            epochs_done: epochs_done + 1,
        };
        Ok(row)
    }

    fn labels_upto(&mut self, task: usize, n: usize) -> Result<Vec<usize>> {
        sample_replay_labels(&self.task_classes, task + 1, n, &mut self.rng)
    }

    /// Generated batch for the critic, with the current task's mask at scale `s`.
    fn fake_batch(&mut self, task: usize, n: usize, s: f64) -> Result<Tensor> {
        let labels = self.labels_upto(task, n)?;
        let z = self.generator.latent(n, &mut self.rng);
        let mut g = Graph::no_grad();
        let zv = g.constant(z);
        let out =
            self.generator
                .forward(&mut g, zv, &labels, Some(TrainingMask { task, scale: s }))?;
        Ok(g.value(out.samples).clone())
    }

    fn step_batch(
        &mut self,
        task: usize,
        xb: &Tensor,
        yb: &[usize],
        s: f64,
    ) -> Result<BatchLosses> {
        let n = yb.len();
        let mut out = BatchLosses::default();

        for _ in 0..self.config.n_critic {
            let fake = self.fake_batch(task, n, s)?;
            let gp_points = match self.config.gp_mode {
                GpMode::Literal => None,
                GpMode::Interpolate => {
                    let (rows, cols) = xb.dims2();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let eps: f64 = self.rng.random();
                        for (a, b) in xb.row_slice(r).iter().zip(fake.row_slice(r)) {
                            data.push(eps * a + (1.0 - eps) * b);
                        }
                    }
                    Some(Tensor::matrix(rows, cols, data)?)
                }
            };
            let mut g = Graph::new();
            let l = critic_loss(
                &mut g,
                &self.critic,
                xb,
                &fake,
                gp_points.as_ref(),
                self.config.lambda_gp,
            )?;
            let grads = g.param_grads(l.total)?;
            self.opt_critic.step(&mut self.critic.params, &grads)?;
            out.d += g.value(l.total).item() / self.config.n_critic as f64;
        }

        {
            let mut g = Graph::new();
            let l = aux_loss(&mut g, &self.critic, xb, yb, &self.cons_dprime)?;
            let grads = g.param_grads(l.total)?;
            let before = self.cons_dprime.pre_step(&self.critic.params)?;
            let data_grads = match before {
                Some(_) => Some(g.param_grads(l.data)?),
                None => None,
            };
            self.opt_aux.step(&mut self.critic.params, &grads)?;
            if let (Some(before), Some(dg)) = (before, data_grads) {
                self.cons_dprime
                    .record_step(&dg, &before, &self.critic.params)?;
            }
            out.dprime = g.value(l.total).item();
        }

        {
            let soft = self.critic.aux_classifier_forward(xb)?;
            let mut g = Graph::new();
            let l = classifier_loss(&mut g, &self.classifier, xb, &soft, &self.cons_c)?;
            let grads = g.param_grads(l.total)?;
            let before = self.cons_c.pre_step(&self.classifier.params)?;
            let data_grads = match before {
                Some(_) => {
                    let mut gi = Graph::new();
                    let li = classifier_importance_loss(&mut gi, &self.classifier, xb, yb, &soft)?;
                    Some(gi.param_grads(li)?)
                }
                None => None,
            };
            self.opt_classifier
                .step(&mut self.classifier.params, &grads)?;
            if let (Some(before), Some(dg)) = (before, data_grads) {
                self.cons_c
                    .record_step(&dg, &before, &self.classifier.params)?;
            }
            out.c = g.value(l.total).item();
        }

        {
            let labels = self.labels_upto(task, n)?;
            let z = self.generator.latent(n, &mut self.rng);
            let previous = self.generator.masks.previous_cumulative();
            let mut g = Graph::new();
            let l = generator_loss(
                &mut g,
                &self.generator,
                &self.critic,
                &z,
                &labels,
                TrainingMask { task, scale: s },
                &previous,
                self.config.lambda_g,
            )?;
            let all = g.param_grads(l.total)?;
            let mut gen = all.clone();
            gen.retain(|name| self.generator.params.contains(name));
            let gen = apply_gate(gen, &self.generator.gradient_gates(task)?)?;
            let mut masks = all;
            masks.retain(|name| name.starts_with("mask."));
            self.opt_generator.step(&mut self.generator.params, &gen)?;
            self.opt_mask
                .step(self.generator.masks.embeddings_mut(task)?, &masks)?;
            out.g = g.value(l.total).item();
            out.r_m = g.value(l.sparsity).item();
        }
        Ok(out)
    }

    /// Generated set for `task` drawn from the current generator.
    fn generate_set(&mut self, task: usize, n: usize) -> Result<GeneratedSet> {
        let classes = vec![self.task_classes[task].clone()];
        let c = sample_replay_labels(&classes, 1, n, &mut self.rng)?;
        let x = self.generator.sample(&c, &mut self.rng)?;
        Ok(GeneratedSet { task, x, c })
    }

    fn regenerate_replay(&mut self, task: usize) -> Result<()> {
        let sizes: Vec<(usize, usize)> = self
            .replay
            .generated
            .iter()
            .map(|s| (s.task, s.c.len()))
            .collect();
        let mut fresh = Vec::with_capacity(sizes.len());
        for (t, n) in sizes {
            fresh.push(self.generate_set(t, n)?);
        }
        self.replay.generated = fresh;
        let active = self.active.as_mut().expect("attached");
        active.merged = build_replay_dataset(&self.replay, &active.data)?;
        debug_assert!(self.replay.generated.iter().all(|s| s.task < task));
        Ok(())
    }

    /// Importance of the auxiliary head from cross-entropy on real data.
    pub fn aux_fisher(&self, x: &Tensor, y: &[usize], idx: &[usize]) -> Result<FisherMap> {
        let names = self.critic.aux_names();
        let excluded = self.critic.output_names();
        estimate_fisher(
            &names,
            &excluded,
            idx.len(),
            ImportanceSource::AuxCrossEntropy,
            |k| {
                let i = idx[k];
                let mut g = Graph::new();
                let xv = g.constant(x.select_rows(&[i]));
                let logits = self.critic.logits(&mut g, xv)?;
                let ce = cross_entropy(
                    &mut g,
                    logits,
                    &one_hot(&y[i..=i], self.critic.num_classes())?,
                )?;
                g.param_grads(ce)
            },
        )
    }

    /// Importance of the classifier from label cross-entropy plus
    /// distillation on real data.
    pub fn classifier_fisher(&self, x: &Tensor, y: &[usize], idx: &[usize]) -> Result<FisherMap> {
        let names = names(&self.classifier.params);
        let excluded = self.classifier.output_names();
        estimate_fisher(
            &names,
            &excluded,
            idx.len(),
            ImportanceSource::ClassifierCombined,
            |k| {
                let i = idx[k];
                let xi = x.select_rows(&[i]);
                let soft = self.critic.aux_classifier_forward(&xi)?;
                let mut g = Graph::new();
                let l =
                    classifier_importance_loss(&mut g, &self.classifier, &xi, &y[i..=i], &soft)?;
                g.param_grads(l)
            },
        )
    }

    /// Closes the current task: freezes its masks, generates its replay set,
    /// updates importance and anchors, and drops the real data.
    pub fn end_task(&mut self) -> Result<()> {
        let Phase::Training { task, epochs_done } = self.phase else {
            return Err(Error::InvalidArgument("no task in progress".into()));
        };
        if epochs_done < self.config.epochs {
            return Err(Error::InvalidArgument(format!(
                "task {} has {} of {} epochs done",
                task + 1,
                epochs_done,
                self.config.epochs
            )));
        }
        let active = self.active.take().ok_or_else(|| {
            Error::InvalidArgument("real data of the current task is not attached".into())
        })?;
        let data = active.data;

        self.generator.masks.finish_task()?;
        let n = self.config.replay_size.unwrap_or(data.len());
        let set = self.generate_set(task, n)?;
        self.replay.generated.push(set);

        let m = self.config.fisher_samples.min(data.len());
        let idx = rand::seq::index::sample(&mut self.rng, data.len(), m).into_vec();
        let dnames = self.critic.aux_names();
        let dexcl = self.critic.output_names();
        let fisher_d = match self.cons_dprime.kind {
            crate::consolidation::ConsolidationKind::Ewc => {
                Some(self.aux_fisher(&data.x, &data.y, &idx)?)
            }
            _ => None,
        };
        self.cons_dprime
            .end_task(&self.critic.params, &dnames, &dexcl, task, || {
                fisher_d.ok_or_else(|| Error::InvalidArgument("missing importance".into()))
            })?;
        let cnames = names(&self.classifier.params);
        let cexcl = self.classifier.output_names();
        let fisher_c = match self.cons_c.kind {
            crate::consolidation::ConsolidationKind::Ewc => {
                Some(self.classifier_fisher(&data.x, &data.y, &idx)?)
            }
            _ => None,
        };
        self.cons_c
            .end_task(&self.classifier.params, &cnames, &cexcl, task, || {
                fisher_c.ok_or_else(|| Error::InvalidArgument("missing importance".into()))
            })?;
        self.phase = Phase::Idle;
        Ok(())
    }

    /// Runs every remaining epoch of the current task, calling `on_epoch`
    /// after each, then closes the task.
    pub fn finish_current_task(
        &mut self,
        mut on_epoch: impl FnMut(&Trainer, &MetricsRow) -> Result<()>,
    ) -> Result<()> {
        while let Phase::Training { epochs_done, .. } = self.phase {
            if epochs_done >= self.config.epochs {
                break;
            }
            let row = self.run_epoch()?;
            on_epoch(self, &row)?;
        }
        self.end_task()
    }

    /// `begin_task` followed by all epochs and `end_task`.
    pub fn train_task(&mut self, train: TaskDataset, test: TaskDataset) -> Result<()> {
        self.begin_task(train, test)?;
        self.finish_current_task(|_, _| Ok(()))
    }

    /// Draws from the run's RNG; used by diagnostics that continue a run.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn names(store: &ParamStore) -> Vec<String> {
    store.names().map(str::to_string).collect()
}
