use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter name, optionally carrying the gate that
/// was applied to them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
    gates: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.grads.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn gate(&self, name: &str) -> Option<&Tensor> {
        self.gates.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.gates.remove(name);
        self.grads.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
        self.gates.retain(|k, _| keep(k));
    }

    /// Elementwise sum with another map over the union of names.
    pub fn add(&mut self, other: &GradMap) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    *acc = acc.zip_map(g, |a, b| a + b)?;
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Multiplies each gradient by its gate (values in `[0, 1]`). Entries
/// without a gate pass through unchanged. Gated-out entries (gate exactly
/// 0) are also skipped by [`Optimizer::step`], so the parameter stays
/// bit-identical even when moment buffers are nonzero.
pub fn apply_gate(mut grads: GradMap, gates: &BTreeMap<String, Tensor>) -> Result<GradMap> {
    for (name, gate) in gates {
        let Some(g) = grads.grads.get_mut(name) else {
            continue;
        };
        if g.shape() != gate.shape() {
            return Err(Error::shape(
                format!("gate for {name}"),
                format!("gradient {:?} vs gate {:?}", g.shape(), gate.shape()),
            ));
        }
        for (v, &m) in g.data_mut().iter_mut().zip(gate.data()) {
            *v *= m;
        }
        grads.gates.insert(name.clone(), gate.clone());
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// SGD or Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerSettings {
            kind: OptimizerKind::Sgd,
            lr,
            ..OptimizerSettings::default()
        })
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerSettings {
            lr,
            ..OptimizerSettings::default()
        })
    }

    /// Drops all moment buffers.
    pub fn reset(&mut self) {
        self.moments.clear();
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    format!("optimizer step for {name}"),
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        let s = self.settings;
        for (name, g) in grads.iter() {
            let gate = grads.gate(name).map(Tensor::data);
            let frozen = |i: usize| gate.is_some_and(|gt| gt[i] == 0.0);
            let p = params.get_mut(name)?;
            match s.kind {
                OptimizerKind::Sgd => {
                    for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if !frozen(i) {
                            *pv -= s.lr * gv;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let mo = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| Moments {
                            m: vec![0.0; g.len()],
                            v: vec![0.0; g.len()],
                            steps: 0,
                        });
                    if mo.m.len() != g.len() {
                        return Err(Error::shape(
                            format!("adam moments for {name}"),
                            format!("{} buffered vs {} values", mo.m.len(), g.len()),
                        ));
                    }
                    mo.steps += 1;
                    let bc1 = 1.0 - s.beta1.powi(mo.steps as i32);
                    let bc2 = 1.0 - s.beta2.powi(mo.steps as i32);
                    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if frozen(i) {
                            continue;
                        }
                        mo.m[i] = s.beta1 * mo.m[i] + (1.0 - s.beta1) * gv;
                        mo.v[i] = s.beta2 * mo.v[i] + (1.0 - s.beta2) * gv * gv;
                        let mh = mo.m[i] / bc1;
                        let vh = mo.v[i] / bc2;
                        *pv -= s.lr * mh / (vh.sqrt() + s.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
