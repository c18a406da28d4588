use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, gaussian};
use super::mask::{embedding_name, MaskSet};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub data_dim: usize,
    pub output: OutputActivation,
    pub slope: f64,
    pub s_max: f64,
    pub binarize_masks: bool,
}

/// The task being trained, whose masks are live parameters at scale `scale`.
#[derive(Debug, Clone, Copy)]
pub struct TrainingMask {
    pub task: usize,
    pub scale: f64,
}

pub struct GeneratorOutput {
    pub samples: Var,
    /// Live masks of the training task, one `[1, width]` row per layer.
    pub masks: Vec<Var>,
}

/// Conditional generator `G(z, c)`: the class embedding is concatenated to
/// the latent vector and every hidden layer is gated by the mask of the
/// task that owns `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub spec: GeneratorSpec,
    pub params: ParamStore,
    pub masks: MaskSet,
    class_task: Vec<usize>,
}

impl GeneratorNet {
    /// Builds the generator together with its first task of `classes` classes.
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 || spec.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "generator needs at least one class and one hidden layer".into(),
            ));
        }
        let mut params = ParamStore::new();
        params.insert("emb", gaussian(rng, classes, spec.embedding_dim, 1.0));
        let mut fan_in = spec.latent_dim + spec.embedding_dim;
        for (l, &w) in spec.hidden.iter().enumerate() {
            layers::init_hidden(&mut params, &format!("fc.{l}"), fan_in, w, spec.slope, rng);
            fan_in = w;
        }
        layers::init_linear(&mut params, "out", fan_in, spec.data_dim, rng);
        let mut masks = MaskSet::new(spec.hidden.clone(), spec.s_max, spec.binarize_masks);
        masks.add_task();
        Ok(GeneratorNet {
            spec,
            params,
            masks,
            class_task: vec![0; classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_task.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.masks.num_tasks()
    }

    pub fn task_of(&self, class: usize) -> Result<usize> {
        self.class_task
            .get(class)
            .copied()
            .ok_or(Error::UnknownClass(class))
    }

    /// Registers a new task owning `classes` new class ids.
    pub fn add_task<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) -> Result<usize> {
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "a task needs at least one class".into(),
            ));
        }
        let task = self.masks.add_task();
        let emb = self.params.get("emb")?;
        let (rows, cols) = emb.dims2();
        let mut data = emb.data().to_vec();
        data.extend(gaussian(rng, classes, cols, 1.0).into_data());
        self.params
            .insert("emb", Tensor::matrix(rows + classes, cols, data)?);
        self.class_task.extend(std::iter::repeat_n(task, classes));
        Ok(task)
    }

    /// Differentiable forward pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        z: Var,
        classes: &[usize],
        training: Option<TrainingMask>,
    ) -> Result<GeneratorOutput> {
        let (n, zd) = g.value(z).dims2();
        if zd != self.spec.latent_dim || n != classes.len() {
            return Err(Error::shape(
                "generator input",
                format!(
                    "z is {:?}, expected [{}, {}]",
                    g.value(z).shape(),
                    classes.len(),
                    self.spec.latent_dim
                ),
            ));
        }
        let row_tasks = classes
            .iter()
            .map(|&c| self.task_of(c))
            .collect::<Result<Vec<_>>>()?;
        let mut tasks = row_tasks.clone();
        tasks.sort_unstable();
        tasks.dedup();

        let emb = g.param("emb", self.params.get("emb")?)?;
        let e = g.gather_rows(emb, classes)?;
        let mut h = g.concat_cols(z, e)?;
        let mut live = Vec::new();
        for l in 0..self.spec.hidden.len() {
            let pre = layers::dense(g, &self.params, &format!("fc.{l}"), h)?;
            let act = g.leaky_relu(pre, self.spec.slope)?;

            let live_mask = match training {
                Some(tm) => {
                    let name = embedding_name(l);
                    let ev = g.param(&name, self.masks.embeddings(tm.task)?.get(&name)?)?;
                    let scaled = g.scale(ev, tm.scale)?;
                    let m = g.sigmoid(scaled)?;
                    live.push(m);
                    Some((tm.task, m))
                }
                None => None,
            };
            let mut rows = Vec::with_capacity(tasks.len());
            for &t in &tasks {
                rows.push(match live_mask {
                    Some((lt, m)) if lt == t => m,
                    _ => g.constant(self.masks.task_mask(t, l)?),
                });
            }
            h = if rows.len() == 1 {
                g.mul_row(act, rows[0])?
            } else {
                let table = g.concat_rows(&rows)?;
                let pos: Vec<usize> = row_tasks
                    .iter()
                    .map(|t| tasks.binary_search(t).expect("task listed"))
                    .collect();
                let per_row = g.gather_rows(table, &pos)?;
                g.mul(act, per_row)?
            };
        }
        let out = layers::dense(g, &self.params, "out", h)?;
        let samples = match self.spec.output {
            OutputActivation::Linear => out,
            OutputActivation::Sigmoid => g.sigmoid(out)?,
            OutputActivation::Tanh => g.tanh(out)?,
        };
        Ok(GeneratorOutput {
            samples,
            masks: live,
        })
    }

    /// Samples for the given latent rows and classes (no gradients).
    pub fn generate(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, zv, classes, None)?;
        Ok(g.value(out.samples).clone())
    }

    /// Draws `z ~ N(0, 1)` for each class and generates.
    pub fn sample<R: Rng + ?Sized>(&self, classes: &[usize], rng: &mut R) -> Result<Tensor> {
        let z = self.latent(classes.len(), rng);
        self.generate(&z, classes)
    }

    pub fn latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        gaussian(rng, n, self.spec.latent_dim, 1.0)
    }

    /// Gradient gates while training `task`: each unit's incoming weights
    /// and bias are scaled by `1 - m_{<task}` of that unit, output rows by
    /// the mask of the last hidden layer. Embedding rows of earlier tasks'
    /// classes and, after the first task, the output bias are frozen.
    pub fn gradient_gates(&self, task: usize) -> Result<BTreeMap<String, Tensor>> {
        let mut gates = BTreeMap::new();
        if task == 0 {
            return Ok(gates);
        }
        let upto = task.min(self.masks.num_finished());
        if upto == 0 {
            return Ok(gates);
        }
        let mut last_free = Vec::new();
        for l in 0..self.spec.hidden.len() {
            let cum = self.masks.cumulative_mask(l, upto)?;
            let free: Vec<f64> = cum.data().iter().map(|m| 1.0 - m).collect();
            let w = self.params.get(&format!("fc.{l}.w"))?;
            let (rows, cols) = w.dims2();
            let data = (0..rows * cols).map(|k| free[k % cols]).collect();
            gates.insert(format!("fc.{l}.w"), Tensor::matrix(rows, cols, data)?);
            gates.insert(format!("fc.{l}.b"), Tensor::row(free.clone()));
            last_free = free;
        }
        let (rows, cols) = self.params.get("out.w")?.dims2();
        let data = (0..rows * cols).map(|k| last_free[k / cols]).collect();
        gates.insert("out.w".into(), Tensor::matrix(rows, cols, data)?);
        gates.insert("out.b".into(), Tensor::zeros(&[1, cols]));
        let (rows, cols) = self.params.get("emb")?.dims2();
        let data = (0..rows * cols)
            .map(|k| {
                if self.class_task[k / cols] < task {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        gates.insert("emb".into(), Tensor::matrix(rows, cols, data)?);
        Ok(gates)
    }
}
