use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Labeled samples of one task. Class ids are global across the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: usize,
    pub classes: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl TaskDataset {
    pub fn new(task: usize, classes: Vec<usize>, x: Tensor, y: Vec<usize>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyDataset(format!("task {task}")));
        }
        if x.rank() != 2 || x.dims2().0 != y.len() {
            return Err(Error::shape(
                format!("task {task} dataset"),
                format!("{} labels for inputs of shape {:?}", y.len(), x.shape()),
            ));
        }
        if let Some(bad) = y.iter().find(|c| !classes.contains(c)) {
            return Err(Error::UnknownClass(*bad));
        }
        Ok(TaskDataset {
            task,
            classes,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dims2().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Generated,
}

/// Samples produced by the generator after a task finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSet {
    pub task: usize,
    pub x: Tensor,
    pub c: Vec<usize>,
}

/// Generated sets of all finished tasks; real data is never kept here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayState {
    pub generated: Vec<GeneratedSet>,
}

impl ReplayState {
    pub fn total(&self) -> usize {
        self.generated.iter().map(|g| g.c.len()).sum()
    }
}

/// The merged set `S_t` plus the generated sets of earlier tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub origin: Vec<Origin>,
}

impl ReplayDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.origin.iter().filter(|&&o| o == origin).count()
    }
}

/// Draws `n` labels uniformly over the classes of the first `tasks` tasks.
pub fn sample_replay_labels<R: Rng + ?Sized>(
    task_classes: &[Vec<usize>],
    tasks: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if tasks == 0 {
        return Err(Error::InvalidArgument(
            "replay labels need at least one task".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "replay label count must be positive".into(),
        ));
    }
    if tasks > task_classes.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for labels of {tasks} tasks but only {} are known",
            task_classes.len()
        )));
    }
    let pool: Vec<usize> = task_classes[..tasks].iter().flatten().copied().collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no classes to sample from".into()));
    }
    Ok((0..n)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}

/// Concatenates `current` with every generated set of earlier tasks.
pub fn build_replay_dataset(state: &ReplayState, current: &TaskDataset) -> Result<ReplayDataset> {
    for tau in 0..current.task {
        if !state.generated.iter().any(|g| g.task == tau) {
            return Err(Error::InvalidArgument(format!(
                "no generated set for task {} while building replay data for task {}",
                tau + 1,
                current.task + 1
            )));
        }
    }
    let dim = current.dim();
    let mut data = current.x.data().to_vec();
    let mut y = current.y.clone();
    let mut origin = vec![Origin::Real; current.len()];
    for set in state.generated.iter().filter(|g| g.task < current.task) {
        if set.x.dims2().1 != dim {
            return Err(Error::shape(
                format!("generated set of task {}", set.task + 1),
                format!("width {} vs {}", set.x.dims2().1, dim),
            ));
        }
        data.extend_from_slice(set.x.data());
        y.extend_from_slice(&set.c);
        origin.extend(std::iter::repeat_n(Origin::Generated, set.c.len()));
    }
    let x = Tensor::matrix(y.len(), dim, data)?;
    Ok(ReplayDataset { x, y, origin })
}
