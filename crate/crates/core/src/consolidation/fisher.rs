use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tensor};
use crate::error::{Error, Result};

/// Which loss an importance map was measured on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceSource {
    /// Cross-entropy of the auxiliary classifier on real training data.
    AuxCrossEntropy,
    /// Cross-entropy on labels plus distillation from the auxiliary head.
    ClassifierCombined,
    /// Plain label cross-entropy of the classifier.
    ClassifierCrossEntropy,
    /// Critic score (used by the interference diagnostic).
    CriticScore,
    /// Path integral of gradient times parameter change.
    PathIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Elementwise sum with the stored map.
    Sum,
    /// Keep only the newest map.
    Replace,
}

/// Diagonal importance per parameter plus the names that are never penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMap {
    pub importance: BTreeMap<String, Tensor>,
    pub excluded: BTreeSet<String>,
    pub source: ImportanceSource,
}

impl FisherMap {
    pub fn new(source: ImportanceSource) -> Self {
        FisherMap {
            importance: BTreeMap::new(),
            excluded: BTreeSet::new(),
            source,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.importance.get(name)
    }

    /// Penalized parameter names.
    pub fn penalized(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.importance
            .iter()
            .filter(|(k, _)| !self.excluded.contains(*k))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.importance
            .values()
            .all(|t| t.data().iter().all(|&v| v >= 0.0))
    }

    /// Mean importance over all penalized entries.
    pub fn mean(&self) -> f64 {
        let (s, n) = self
            .penalized()
            .fold((0.0, 0usize), |(s, n), (_, t)| (s + t.sum(), n + t.len()));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Merges a newer map into this one.
    pub fn combine(&mut self, newer: FisherMap, mode: CombineMode) -> Result<()> {
        match mode {
            CombineMode::Replace => *self = newer,
            CombineMode::Sum => {
                for (name, t) in newer.importance {
                    let merged = match self.importance.get(&name) {
                        Some(old)
                            if old.shape() == t.shape() && !newer.excluded.contains(&name) =>
                        {
                            old.zip_map(&t, |a, b| a + b)?
                        }
                        _ => t,
                    };
                    self.importance.insert(name, merged);
                }
                self.excluded = newer.excluded;
                self.source = newer.source;
            }
        }
        Ok(())
    }
}

/// Empirical Fisher: the mean over `n` datapoints of squared per-sample
/// gradients. `per_sample(i)` returns the gradient of the loss at point `i`.
/// Names in `excluded` are recorded with zero importance.
pub fn estimate_fisher<F>(
    names: &[String],
    excluded: &[String],
    n: usize,
    source: ImportanceSource,
    mut per_sample: F,
) -> Result<FisherMap>
where
    F: FnMut(usize) -> Result<GradMap>,
{
    if n == 0 {
        return Err(Error::EmptyDataset("fisher estimation".into()));
    }
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let grads = per_sample(i)?;
        for name in names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let slot = acc
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            shapes
                .entry(name.clone())
                .or_insert_with(|| g.shape().to_vec());
            for (a, v) in slot.iter_mut().zip(g.data()) {
                *a += v * v;
            }
        }
    }
    let mut map = FisherMap::new(source);
    let inv = 1.0 / n as f64;
    for (name, sum) in acc {
        let shape = shapes.remove(&name).expect("shape recorded");
        let t = if excluded.contains(&name) {
            Tensor::zeros(&shape)
        } else {
            Tensor::new(shape, sum.into_iter().map(|v| v * inv).collect())?
        };
        map.importance.insert(name, t);
    }
    map.excluded = excluded.iter().cloned().collect();
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    /// loss = (theta * x - y)^2 for a scalar model.
    fn scalar_grad(theta: f64, x: f64, y: f64) -> GradMap {
        let mut g = Graph::new();
        let t = g.param("theta", &Tensor::scalar(theta)).unwrap();
        let xv = g.constant(Tensor::scalar(x));
        let yv = g.constant(Tensor::scalar(y));
        let p = g.mul(t, xv).unwrap();
        let r = g.sub(p, yv).unwrap();
        let l = g.square(r).unwrap();
        g.param_grads(l).unwrap()
    }

    #[test]
    fn scalar_model_matches_analytic_gradient() {
        let names = vec!["theta".to_string()];
        let f = estimate_fisher(&names, &[], 1, ImportanceSource::AuxCrossEntropy, |_| {
            Ok(scalar_grad(1.0, 2.0, 0.0))
        })
        .unwrap();
        // d/dθ (θx - y)^2 = 2x(θx - y) = 8, squared = 64
        assert_eq!(f.get("theta").unwrap().item(), 64.0);
    }

    #[test]
    fn duplicated_dataset_gives_same_map() {
        let pts = [(1.0, 0.5), (-0.3, 2.0), (0.7, -1.0)];
        let names = vec!["theta".to_string()];
        let once = estimate_fisher(&names, &[], 3, ImportanceSource::AuxCrossEntropy, |i| {
            Ok(scalar_grad(0.4, pts[i].0, pts[i].1))
        })
        .unwrap();
        let twice = estimate_fisher(&names, &[], 6, ImportanceSource::AuxCrossEntropy, |i| {
            Ok(scalar_grad(0.4, pts[i % 3].0, pts[i % 3].1))
        })
        .unwrap();
        let (a, b) = (
            once.get("theta").unwrap().item(),
            twice.get("theta").unwrap().item(),
        );
        assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn independent_parameter_has_zero_importance() {
        let names = vec!["theta".to_string(), "unused".to_string()];
        let f = estimate_fisher(&names, &[], 2, ImportanceSource::AuxCrossEntropy, |_| {
            let mut g = scalar_grad(1.0, 1.0, 0.0);
            g.insert("unused", Tensor::zeros(&[2]));
            Ok(g)
        })
        .unwrap();
        assert!(f.get("unused").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_errors_and_excluded_is_zero() {
        let names = vec!["theta".to_string()];
        assert!(matches!(
            estimate_fisher(&names, &[], 0, ImportanceSource::AuxCrossEntropy, |_| Ok(
                scalar_grad(1.0, 1.0, 1.0)
            )),
            Err(Error::EmptyDataset(_))
        ));
        let f = estimate_fisher(&names, &names, 1, ImportanceSource::AuxCrossEntropy, |_| {
            Ok(scalar_grad(1.0, 2.0, 0.0))
        })
        .unwrap();
        assert_eq!(f.get("theta").unwrap().item(), 0.0);
        assert!(f.excluded.contains("theta"));
    }

    #[test]
    fn combine_sum_and_replace() {
        let mut a = FisherMap::new(ImportanceSource::AuxCrossEntropy);
        a.importance
            .insert("w".into(), Tensor::vector(vec![1.0, 2.0]));
        let mut b = FisherMap::new(ImportanceSource::AuxCrossEntropy);
        b.importance
            .insert("w".into(), Tensor::vector(vec![0.5, 0.5]));
        let mut s = a.clone();
        s.combine(b.clone(), CombineMode::Sum).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5, 2.5]);
        let mut r = a;
        r.combine(b, CombineMode::Replace).unwrap();
        assert_eq!(r.get("w").unwrap().data(), &[0.5, 0.5]);
    }
}
