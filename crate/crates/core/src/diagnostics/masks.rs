use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::MaskSet;

/// Capacity use of one generator layer after some number of finished tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: usize,
    pub width: usize,
    /// Fraction of units whose cumulative mask exceeds the threshold.
    pub used: f64,
    /// Units claimed by exactly one task.
    pub exclusive: f64,
    /// Units claimed by two or more tasks.
    pub shared: f64,
    pub free: f64,
    /// Fraction of units claimed by task `k` alone.
    pub per_task_exclusive: Vec<f64>,
}

/// Per-layer usage over the first `tasks` finished tasks, counting a unit as
/// claimed when a task's mask exceeds the binarization threshold.
pub fn mask_usage_report(masks: &MaskSet, tasks: usize) -> Result<Vec<LayerUsage>> {
    if tasks > masks.num_finished() {
        return Err(Error::InvalidArgument(format!(
            "only {} finished tasks, asked for {tasks}",
            masks.num_finished()
        )));
    }
    let thr = masks.binarize_threshold;
    let mut out = Vec::with_capacity(masks.num_layers());
    for (layer, &width) in masks.widths().iter().enumerate() {
        let task_masks = (0..tasks)
            .map(|t| masks.finished_mask(t, layer))
            .collect::<Result<Vec<_>>>()?;
        let mut counts = vec![0usize; width];
        let mut owner = vec![usize::MAX; width];
        for (t, m) in task_masks.iter().enumerate() {
            for (u, &v) in m.data().iter().enumerate() {
                if v > thr {
                    counts[u] += 1;
                    owner[u] = t;
                }
            }
        }
        let frac = |n: usize| n as f64 / width as f64;
        let exclusive = counts.iter().filter(|&&c| c == 1).count();
        let shared = counts.iter().filter(|&&c| c > 1).count();
        let mut per_task = vec![0usize; tasks];
        for u in 0..width {
            if counts[u] == 1 {
                per_task[owner[u]] += 1;
            }
        }
        out.push(LayerUsage {
            layer,
            width,
            used: frac(exclusive + shared),
            exclusive: frac(exclusive),
            shared: frac(shared),
            free: frac(width - exclusive - shared),
            per_task_exclusive: per_task.into_iter().map(frac).collect(),
        });
    }
    Ok(out)
}
