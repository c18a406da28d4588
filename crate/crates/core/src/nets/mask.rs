//! Per-task hard-attention masks for the generator's hidden layers.
//!
//! A task's mask on layer `l` is `sigmoid(s * e)` for a learned embedding
//! row `e`. The cumulative mask over finished tasks is their elementwise
//! maximum; its complement gates the generator's gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Mask embeddings and frozen masks for every task seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    widths: Vec<usize>,
    /// One store per task holding `mask.{l}` rows of shape `[1, width_l]`.
    embeddings: Vec<ParamStore>,
    /// Final masks of finished tasks.
    finished: Vec<Vec<Tensor>>,
    pub s_max: f64,
    pub binarize_threshold: f64,
    /// Store finished masks as exact 0/1 values (frozen-generation mode).
    pub binarize: bool,
}

pub fn embedding_name(layer: usize) -> String {
    format!("mask.{layer}")
}

impl MaskSet {
    pub fn new(widths: Vec<usize>, s_max: f64, binarize: bool) -> Self {
        MaskSet {
            widths,
            embeddings: Vec::new(),
            finished: Vec::new(),
            s_max,
            binarize_threshold: 0.5,
            binarize,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.embeddings.len()
    }

    pub fn num_finished(&self) -> usize {
        self.finished.len()
    }

    /// Registers a new task with zero embeddings, so every mask value starts at 0.5.
    pub fn add_task(&mut self) -> usize {
        let mut store = ParamStore::new();
        for (l, &w) in self.widths.iter().enumerate() {
            store.insert(embedding_name(l), Tensor::zeros(&[1, w]));
        }
        self.embeddings.push(store);
        self.embeddings.len() - 1
    }

    pub fn embeddings(&self, task: usize) -> Result<&ParamStore> {
        self.embeddings
            .get(task)
            .ok_or_else(|| Error::InvalidArgument(format!("no mask embeddings for task {task}")))
    }

    pub fn embeddings_mut(&mut self, task: usize) -> Result<&mut ParamStore> {
        self.embeddings
            .get_mut(task)
            .ok_or_else(|| Error::InvalidArgument(format!("no mask embeddings for task {task}")))
    }

    /// `sigmoid(s * e)` for a task's embedding on one layer.
    pub fn soft_mask(&self, task: usize, layer: usize, s: f64) -> Result<Tensor> {
        let e = self.embeddings(task)?.get(&embedding_name(layer))?;
        Ok(e.map(|v| sigmoid(s * v)))
    }

    /// Mask used when generating for `task`: the frozen mask once the task
    /// is finished, otherwise the soft mask at `s_max`.
    pub fn task_mask(&self, task: usize, layer: usize) -> Result<Tensor> {
        match self.finished.get(task) {
            Some(masks) => Ok(masks[layer].clone()),
            None => self.soft_mask(task, layer, self.s_max),
        }
    }

    /// Frozen mask of a finished task on one layer.
    pub fn finished_mask(&self, task: usize, layer: usize) -> Result<&Tensor> {
        self.finished
            .get(task)
            .and_then(|m| m.get(layer))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no finished mask for task {task} layer {layer}"))
            })
    }

    /// Freezes the masks of the next unfinished task.
    pub fn finish_task(&mut self) -> Result<()> {
        let task = self.finished.len();
        let mut masks = Vec::with_capacity(self.widths.len());
        for l in 0..self.widths.len() {
            let m = self.soft_mask(task, l, self.s_max)?;
            let thr = self.binarize_threshold;
            masks.push(if self.binarize {
                m.map(|v| if v > thr { 1.0 } else { 0.0 })
            } else {
                m
            });
        }
        self.finished.push(masks);
        Ok(())
    }

    /// Elementwise running maximum of the masks of the first `upto`
    /// finished tasks on one layer.
    pub fn cumulative_mask(&self, layer: usize, upto: usize) -> Result<Tensor> {
        if upto == 0 {
            return Err(Error::InvalidArgument(
                "cumulative mask needs at least one task".into(),
            ));
        }
        if upto > self.finished.len() {
            return Err(Error::InvalidArgument(format!(
                "only {} finished tasks, asked for {upto}",
                self.finished.len()
            )));
        }
        let masks: Vec<&Tensor> = self.finished[..upto].iter().map(|m| &m[layer]).collect();
        cumulative_max(&masks)
    }

    /// Cumulative masks over all finished tasks, or zeros when none finished.
    pub fn previous_cumulative(&self) -> Vec<Tensor> {
        (0..self.widths.len())
            .map(|l| {
                self.cumulative_mask(l, self.finished.len())
                    .unwrap_or_else(|_| Tensor::zeros(&[1, self.widths[l]]))
            })
            .collect()
    }
}

/// Elementwise maximum across masks: `m_{<=t} = max(m_t, m_{<=t-1})`.
pub fn cumulative_max(masks: &[&Tensor]) -> Result<Tensor> {
    let Some((first, rest)) = masks.split_first() else {
        return Err(Error::InvalidArgument("no masks".into()));
    };
    let mut acc = (*first).clone();
    for m in rest {
        acc = acc.zip_map(m, f64::max)?;
    }
    Ok(acc)
}

/// Sparsity penalty of the current task's masks against the cumulative
/// masks of earlier tasks:
/// `sum m_t (1 - m_<t) / sum (1 - m_<t)`, or 0 when no capacity is left.
pub fn mask_sparsity_penalty(current: &[Tensor], previous: &[Tensor]) -> Result<f64> {
    if current.len() != previous.len() {
        return Err(Error::shape(
            "mask_sparsity_penalty",
            format!("{} layers vs {} layers", current.len(), previous.len()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, p) in current.iter().zip(previous) {
        if m.shape() != p.shape() {
            return Err(Error::shape(
                "mask_sparsity_penalty",
                format!("{:?} vs {:?}", m.shape(), p.shape()),
            ));
        }
        for (&a, &b) in m.data().iter().zip(p.data()) {
            num += a * (1.0 - b);
            den += 1.0 - b;
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}
