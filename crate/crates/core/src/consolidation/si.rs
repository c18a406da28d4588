use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fisher::{FisherMap, ImportanceSource};
use crate::autodiff::{GradMap, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_XI: f64 = 0.1;

/// Running path integral of `-g * delta_theta` for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SIState {
    pub xi: f64,
    pub path: BTreeMap<String, Vec<f64>>,
    pub start: BTreeMap<String, Tensor>,
}

/// Single-step path contribution `-g * (after - before)`.
pub fn step_contribution(g: f64, before: f64, after: f64) -> f64 {
    -g * (after - before)
}

impl SIState {
    pub fn new(xi: f64) -> Self {
        SIState {
            xi,
            path: BTreeMap::new(),
            start: BTreeMap::new(),
        }
    }

    /// Resets the integral and records the parameters at task start.
    pub fn begin_task(&mut self, params: &ParamStore, names: &[String]) -> Result<()> {
        self.path.clear();
        self.start.clear();
        for n in names {
            let p = params.get(n)?;
            self.start.insert(n.clone(), p.clone());
            self.path.insert(n.clone(), vec![0.0; p.len()]);
        }
        Ok(())
    }

    /// Adds one optimizer step. `before` holds the tracked parameters before
    /// the step, `params` the values after it.
    pub fn accumulate(
        &mut self,
        grads: &GradMap,
        before: &BTreeMap<String, Tensor>,
        params: &ParamStore,
    ) -> Result<()> {
        for (name, acc) in self.path.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let b = before
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let a = params.get(name)?;
            if g.len() != acc.len() || b.len() != acc.len() || a.len() != acc.len() {
                return Err(Error::shape(name, "path integral shape changed mid-task"));
            }
            for (i, w) in acc.iter_mut().enumerate() {
                *w += step_contribution(g.data()[i], b.data()[i], a.data()[i]);
            }
        }
        Ok(())
    }

    /// `relu(w) / (delta_task^2 + xi)` for every tracked parameter.
    pub fn finalize(&self, params: &ParamStore, excluded: &[String]) -> Result<FisherMap> {
        let mut map = FisherMap::new(ImportanceSource::PathIntegral);
        for (name, w) in &self.path {
            let start = &self.start[name];
            let now = params.get(name)?;
            let omega = if excluded.contains(name) {
                Tensor::zeros(start.shape())
            } else {
                let data = w
                    .iter()
                    .zip(start.data().iter().zip(now.data()))
                    .map(|(&w, (&s, &n))| w.max(0.0) / ((n - s) * (n - s) + self.xi))
                    .collect();
                Tensor::new(start.shape().to_vec(), data)?
            };
            map.importance.insert(name.clone(), omega);
        }
        map.excluded = excluded.iter().cloned().collect();
        Ok(map)
    }
}
