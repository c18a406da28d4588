use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fisher::FisherMap;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter values captured at a task boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub values: BTreeMap<String, Tensor>,
    pub task: usize,
}

impl Anchor {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::MissingAnchor(name.to_string()))
    }
}

/// Deep copy of the named parameters.
pub fn snapshot(params: &ParamStore, names: &[String], task: usize) -> Result<Anchor> {
    let mut values = BTreeMap::new();
    for n in names {
        values.insert(n.clone(), params.get(n)?.clone());
    }
    Ok(Anchor { values, task })
}

fn penalized_pairs<'a>(
    anchor: &'a Anchor,
    fisher: &'a FisherMap,
) -> Result<Vec<(&'a str, &'a Tensor, &'a Tensor)>> {
    fisher
        .penalized()
        .map(|(name, f)| {
            let a = anchor.get(name)?;
            if a.shape() != f.shape() {
                return Err(Error::shape(
                    name,
                    format!("anchor {:?} vs importance {:?}", a.shape(), f.shape()),
                ));
            }
            Ok((name, f, a))
        })
        .collect()
}

/// `lambda * sum_i F_i (theta_i - anchor_i)^2` over non-excluded parameters.
pub fn consolidation_penalty(
    params: &ParamStore,
    anchor: &Anchor,
    fisher: &FisherMap,
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (name, f, a) in penalized_pairs(anchor, fisher)? {
        let p = params.get(name)?;
        if p.shape() != a.shape() {
            return Err(Error::shape(
                name,
                format!("param {:?} vs anchor {:?}", p.shape(), a.shape()),
            ));
        }
        total += p
            .data()
            .iter()
            .zip(a.data())
            .zip(f.data())
            .map(|((&t, &s), &w)| w * (t - s) * (t - s))
            .sum::<f64>();
    }
    Ok(lambda * total)
}

/// The same penalty as a differentiable graph term. Parameters are bound by
/// name, so they share leaves with any forward pass already on `g`.
pub fn penalty_term(
    g: &mut Graph,
    params: &ParamStore,
    anchor: &Anchor,
    fisher: &FisherMap,
    lambda: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, f, a) in penalized_pairs(anchor, fisher)? {
        let p = g.param(name, params.get(name)?)?;
        let av = g.constant(a.clone());
        let fv = g.constant(f.clone());
        let d = g.sub(p, av)?;
        let sq = g.square(d)?;
        let w = g.mul(sq, fv)?;
        let s = g.sum(w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => g.scale(t, lambda),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}
