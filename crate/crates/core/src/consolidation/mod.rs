//! Importance estimation, anchors and quadratic consolidation penalties.

mod fisher;
mod penalty;
mod si;

pub use fisher::{estimate_fisher, CombineMode, FisherMap, ImportanceSource};
pub use penalty::{consolidation_penalty, penalty_term, snapshot, Anchor};
pub use si::{step_contribution, SIState, DEFAULT_XI};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsolidationKind {
    Ewc,
    Si,
    None,
}

/// Everything one network needs to be consolidated across tasks. EWC and SI
/// differ only in how the importance map is produced at task end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationState {
    pub kind: ConsolidationKind,
    pub lambda: f64,
    pub combine: CombineMode,
    pub importance: Option<FisherMap>,
    pub anchor: Option<Anchor>,
    pub si: SIState,
}

impl ConsolidationState {
    pub fn new(kind: ConsolidationKind, lambda: f64, combine: CombineMode, xi: f64) -> Self {
        ConsolidationState {
            kind,
            lambda,
            combine,
            importance: None,
            anchor: None,
            si: SIState::new(xi),
        }
    }

    /// True once a penalty would contribute to the loss.
    pub fn is_active(&self) -> bool {
        self.kind != ConsolidationKind::None
            && self.lambda != 0.0
            && self.importance.is_some()
            && self.anchor.is_some()
    }

    pub fn penalty_term(&self, g: &mut Graph, params: &ParamStore) -> Result<Option<Var>> {
        match (&self.importance, &self.anchor) {
            (Some(f), Some(a)) if self.is_active() => {
                Ok(Some(penalty_term(g, params, a, f, self.lambda)?))
            }
            _ => Ok(None),
        }
    }

    pub fn penalty_value(&self, params: &ParamStore) -> Result<f64> {
        match (&self.importance, &self.anchor) {
            (Some(f), Some(a)) if self.is_active() => {
                consolidation_penalty(params, a, f, self.lambda)
            }
            _ => Ok(0.0),
        }
    }

    pub fn tracks_steps(&self) -> bool {
        self.kind == ConsolidationKind::Si
    }

    pub fn begin_task(&mut self, params: &ParamStore, names: &[String]) -> Result<()> {
        if self.tracks_steps() {
            self.si.begin_task(params, names)?;
        }
        Ok(())
    }

    /// Values of the tracked parameters, taken just before an optimizer
    /// step. `None` when steps are not tracked.
    pub fn pre_step(&self, params: &ParamStore) -> Result<Option<BTreeMap<String, Tensor>>> {
        if !self.tracks_steps() {
            return Ok(None);
        }
        self.si
            .start
            .keys()
            .map(|n| Ok((n.clone(), params.get(n)?.clone())))
            .collect::<Result<_>>()
            .map(Some)
    }

    pub fn record_step(
        &mut self,
        grads: &GradMap,
        before: &BTreeMap<String, Tensor>,
        params: &ParamStore,
    ) -> Result<()> {
        if self.tracks_steps() {
            self.si.accumulate(grads, before, params)?;
        }
        Ok(())
    }

    /// Closes a task: measures importance (the Fisher closure is only called
    /// for EWC), merges it with the stored map and re-anchors.
    pub fn end_task<F>(
        &mut self,
        params: &ParamStore,
        names: &[String],
        excluded: &[String],
        task: usize,
        fisher: F,
    ) -> Result<()>
    where
        F: FnOnce() -> Result<FisherMap>,
    {
        let fresh = match self.kind {
            ConsolidationKind::None => return Ok(()),
            ConsolidationKind::Ewc => fisher()?,
            ConsolidationKind::Si => self.si.finalize(params, excluded)?,
        };
        match &mut self.importance {
            Some(map) => map.combine(fresh, self.combine)?,
            None => self.importance = Some(fresh),
        }
        let penalized: Vec<String> = names
            .iter()
            .filter(|n| !excluded.contains(n))
            .cloned()
            .collect();
        self.anchor = Some(snapshot(params, &penalized, task)?);
        Ok(())
    }
}
