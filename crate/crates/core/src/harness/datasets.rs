use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::replay::TaskDataset;

pub const BUILTIN_DATASETS: [&str; 2] = ["gauss2d-10", "digits8x8"];

/// Which data to load and how to cut it into tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// A builtin id or a directory of per-class CSV files.
    pub id: String,
    pub classes_per_task: usize,
    /// Use only the first `num_tasks` tasks; `None` means all.
    pub num_tasks: Option<usize>,
    pub allow_ragged: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of each Gaussian component (gauss2d-10) or of the
    /// pixel noise (digits8x8).
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            id: "gauss2d-10".into(),
            classes_per_task: 2,
            num_tasks: None,
            allow_ragged: false,
            train_per_class: 100,
            test_per_class: 100,
            noise: 0.5,
        }
    }
}

/// Per-task access to training and test data. Implementations only load a
/// task's real training data when asked for it.
pub trait DataSource {
    fn num_tasks(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn classes_of(&self, task: usize) -> Vec<usize>;
    fn train(&self, task: usize) -> Result<TaskDataset>;
    fn test(&self, task: usize) -> Result<TaskDataset>;
}

fn split_classes(total: usize, cfg: &DatasetConfig) -> Result<Vec<Vec<usize>>> {
    let k = cfg.classes_per_task;
    if k == 0 {
        return Err(Error::Config {
            key: "dataset.classes_per_task".into(),
            message: "must be ≥ 1".into(),
        });
    }
    if !total.is_multiple_of(k) && !cfg.allow_ragged {
        return Err(Error::Config {
            key: "dataset.classes_per_task".into(),
            message: format!(
                "{k} does not divide the {total} classes (set allow_ragged to permit)"
            ),
        });
    }
    let mut tasks: Vec<Vec<usize>> = (0..total)
        .collect::<Vec<_>>()
        .chunks(k)
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(n) = cfg.num_tasks {
        if n == 0 || n > tasks.len() {
            return Err(Error::Config {
                key: "dataset.num_tasks".into(),
                message: format!("must be between 1 and {}", tasks.len()),
            });
        }
        tasks.truncate(n);
    }
    Ok(tasks)
}

/// A fully materialized dataset (the synthetic benchmarks).
#[derive(Debug, Clone, PartialEq)]
pub struct InMemorySource {
    dim: usize,
    tasks: Vec<Vec<usize>>,
    train: Vec<TaskDataset>,
    test: Vec<TaskDataset>,
}

impl InMemorySource {
    /// Builds a source from per-class samples, shuffling each task with `rng`.
    fn from_classes<R: Rng>(
        dim: usize,
        tasks: Vec<Vec<usize>>,
        train: &[Vec<Vec<f64>>],
        test: &[Vec<Vec<f64>>],
        rng: &mut R,
    ) -> Result<Self> {
        let build = |t: usize, per_class: &[Vec<Vec<f64>>], rng: &mut R| -> Result<TaskDataset> {
            let mut rows: Vec<(usize, &Vec<f64>)> = tasks[t]
                .iter()
                .flat_map(|&c| per_class[c].iter().map(move |x| (c, x)))
                .collect();
            rows.shuffle(rng);
            let y = rows.iter().map(|(c, _)| *c).collect();
            let data = rows.iter().flat_map(|(_, x)| x.iter().copied()).collect();
            TaskDataset::new(
                t,
                tasks[t].clone(),
                Tensor::matrix(rows.len(), dim, data)?,
                y,
            )
        };
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for t in 0..tasks.len() {
            tr.push(build(t, train, rng)?);
            te.push(build(t, test, rng)?);
        }
        Ok(InMemorySource {
            dim,
            tasks,
            train: tr,
            test: te,
        })
    }
}

impl DataSource for InMemorySource {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn classes_of(&self, task: usize) -> Vec<usize> {
        self.tasks[task].clone()
    }

    fn train(&self, task: usize) -> Result<TaskDataset> {
        self.train
            .get(task)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no task {}", task + 1)))
    }

    fn test(&self, task: usize) -> Result<TaskDataset> {
        self.test
            .get(task)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no task {}", task + 1)))
    }
}

/// Class means of the 2D mixture: two interleaved rings of five.
pub fn gauss2d_means() -> Vec<[f64; 2]> {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 2.0 } else { 3.5 };
            let a = std::f64::consts::TAU * k as f64 / 10.0;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

fn gauss2d(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let means = gauss2d_means();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        means
            .iter()
            .map(|m| {
                (0..n)
                    .map(|_| {
                        let a: f64 = StandardNormal.sample(rng);
                        let b: f64 = StandardNormal.sample(rng);
                        vec![m[0] + cfg.noise * a, m[1] + cfg.noise * b]
                    })
                    .collect()
            })
            .collect()
    };
    let train = draw(cfg.train_per_class, rng);
    let test = draw(cfg.test_per_class, rng);
    (train, test)
}

const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.",
        "..####..",
    ],
    [
        "...##...", "..###...", ".####...", "...##...", "...##...", "...##...", "...##...",
        ".######.",
    ],
    [
        "..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".##.....",
        ".######.",
    ],
    [
        "..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".....##.", ".##..##.",
        "..####..",
    ],
    [
        "....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..",
        "....##..",
    ],
    [
        ".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".....##.", ".##..##.",
        "..####..",
    ],
    [
        "..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.",
        "..####..",
    ],
    [
        ".######.", ".....##.", "....##..", "....##..", "...##...", "...##...", "..##....",
        "..##....",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", ".##..##.",
        "..####..",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", ".....##.", "....##..",
        "..###...",
    ],
];

/// The 8x8 glyph of digit `d` as 64 values in {0, 1}.
pub fn digit_template(d: usize) -> Vec<f64> {
    DIGIT_GLYPHS[d]
        .iter()
        .flat_map(|row| row.bytes().map(|b| if b == b'#' { 1.0 } else { 0.0 }))
        .collect()
}

fn digits(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        (0..10)
            .map(|d| {
                let t = digit_template(d);
                (0..n)
                    .map(|_| {
                        // Random one-pixel horizontal shift plus clipped noise.
                        let shift: i32 = rng.random_range(-1..=1);
                        (0..64)
                            .map(|i| {
                                let (r, c) = (i / 8, (i % 8) as i32 - shift);
                                let base = if (0..8).contains(&c) {
                                    t[r * 8 + c as usize]
                                } else {
                                    0.0
                                };
                                let e: f64 = StandardNormal.sample(rng);
                                (base + cfg.noise * e).clamp(0.0, 1.0)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let train = draw(cfg.train_per_class, rng);
    let test = draw(cfg.test_per_class, rng);
    (train, test)
}

/// Synthetic builtin dataset split into tasks. The same seed gives the same
/// samples and split.
pub fn builtin_source(cfg: &DatasetConfig, seed: u64) -> Result<InMemorySource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let (dim, (train, test)) = match cfg.id.as_str() {
        "gauss2d-10" => (2, gauss2d(cfg, &mut rng)),
        "digits8x8" => (64, digits(cfg, &mut rng)),
        other => {
            return Err(Error::UnknownDataset {
                id: other.to_string(),
                available: format!("{}, or a directory path", BUILTIN_DATASETS.join(", ")),
            })
        }
    };
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Config {
            key: "dataset.train_per_class".into(),
            message: "train and test sizes must be ≥ 1".into(),
        });
    }
    let tasks = split_classes(10, cfg)?;
    InMemorySource::from_classes(dim, tasks, &train, &test, &mut rng)
}

/// Labeled vectors on disk: `train/class_<k>.csv` and `test/class_<k>.csv`,
/// one headerless row of floats per sample. Files are read per task on demand.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
    dim: usize,
    tasks: Vec<Vec<usize>>,
    seed: u64,
}

impl DirectorySource {
    pub fn open(root: &Path, cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        let mut classes = 0;
        while root
            .join("train")
            .join(format!("class_{classes}.csv"))
            .exists()
        {
            classes += 1;
        }
        if classes == 0 {
            return Err(Error::EmptyDataset(format!(
                "{} has no train/class_0.csv",
                root.display()
            )));
        }
        let first = read_vectors(&root.join("train").join("class_0.csv"))?;
        let dim = first.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::EmptyDataset(format!(
                "{}/train/class_0.csv",
                root.display()
            )));
        }
        Ok(DirectorySource {
            root: root.to_path_buf(),
            dim,
            tasks: split_classes(classes, cfg)?,
            seed,
        })
    }

    fn load(&self, split: &str, task: usize) -> Result<TaskDataset> {
        let classes = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::InvalidArgument(format!("no task {}", task + 1)))?;
        let mut rows = Vec::new();
        for &c in classes {
            let path = self.root.join(split).join(format!("class_{c}.csv"));
            for v in read_vectors(&path)? {
                if v.len() != self.dim {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        message: format!("row has {} values, expected {}", v.len(), self.dim),
                    });
                }
                rows.push((c, v));
            }
        }
        let salt = if split == "train" { 1 } else { 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((task as u64) << 8) ^ salt);
        rows.shuffle(&mut rng);
        let y = rows.iter().map(|(c, _)| *c).collect();
        let data = rows.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        TaskDataset::new(
            task,
            classes.clone(),
            Tensor::matrix(rows.len(), self.dim, data)?,
            y,
        )
    }
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", line + 1),
            })?;
        out.push(row);
    }
    Ok(out)
}

impl DataSource for DirectorySource {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn classes_of(&self, task: usize) -> Vec<usize> {
        self.tasks[task].clone()
    }

    fn train(&self, task: usize) -> Result<TaskDataset> {
        self.load("train", task)
    }

    fn test(&self, task: usize) -> Result<TaskDataset> {
        self.load("test", task)
    }
}

/// Opens the configured dataset: a builtin id or a directory.
pub fn open_source(cfg: &DatasetConfig, seed: u64) -> Result<Box<dyn DataSource>> {
    if BUILTIN_DATASETS.contains(&cfg.id.as_str()) {
        return Ok(Box::new(builtin_source(cfg, seed)?));
    }
    let path = Path::new(&cfg.id);
    if path.is_dir() {
        return Ok(Box::new(DirectorySource::open(path, cfg, seed)?));
    }
    Err(Error::UnknownDataset {
        id: cfg.id.clone(),
        available: format!("{}, or a directory path", BUILTIN_DATASETS.join(", ")),
    })
}

/// Every task's training data, for callers that want the whole sequence.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    let src = open_source(cfg, seed)?;
    (0..src.num_tasks()).map(|t| src.train(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_tasks_with_disjoint_classes() {
        let tasks = load_dataset(&DatasetConfig::default(), 3).unwrap();
        assert_eq!(tasks.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            assert_eq!(t.classes.len(), 2);
            for c in &t.classes {
                assert!(seen.insert(*c));
            }
            assert!(t.y.iter().all(|c| t.classes.contains(c)));
        }
    }

    #[test]
    fn same_seed_same_split() {
        for id in BUILTIN_DATASETS {
            let cfg = DatasetConfig {
                id: id.into(),
                ..DatasetConfig::default()
            };
            assert_eq!(
                load_dataset(&cfg, 5).unwrap(),
                load_dataset(&cfg, 5).unwrap()
            );
            assert_ne!(
                load_dataset(&cfg, 5).unwrap(),
                load_dataset(&cfg, 6).unwrap()
            );
        }
    }

    #[test]
    fn ragged_split_needs_opt_in() {
        let mut cfg = DatasetConfig {
            classes_per_task: 3,
            ..DatasetConfig::default()
        };
        assert!(matches!(load_dataset(&cfg, 0), Err(Error::Config { .. })));
        cfg.allow_ragged = true;
        let tasks = load_dataset(&cfg, 0).unwrap();
        assert_eq!(tasks.len(), 4);
        assert_eq!(tasks[3].classes, vec![9]);
    }

    #[test]
    fn unknown_id_lists_builtins() {
        let cfg = DatasetConfig {
            id: "mnist".into(),
            ..DatasetConfig::default()
        };
        let err = load_dataset(&cfg, 0).unwrap_err().to_string();
        assert!(
            err.contains("gauss2d-10") && err.contains("digits8x8"),
            "{err}"
        );
    }

    #[test]
    fn digit_templates_are_distinct() {
        for a in 0..10 {
            assert_eq!(digit_template(a).len(), 64);
            for b in 0..a {
                assert_ne!(digit_template(a), digit_template(b));
            }
        }
    }
}
