//! The four training objectives as differentiable graph terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::nets::{ClassHead, ClassifierNet, CriticNet, GeneratorNet, TrainingMask};

/// Where the gradient penalty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMode {
    /// At the replay-set points themselves.
    Literal,
    /// At random interpolates between replay and generated points.
    Interpolate,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::UnknownClass(c));
        }
        data[i * classes + c] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// `-mean_i sum_k targets[i,k] * log softmax(logits)[i,k]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let n = targets.dims2().0 as f64;
    let lp = g.log_softmax(logits)?;
    let t = g.constant(targets.clone());
    let picked = g.mul(lp, t)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / n)
}

fn with_penalty(
    g: &mut Graph,
    data: Var,
    cons: &ConsolidationState,
    params: &crate::autodiff::ParamStore,
) -> Result<(Var, Option<Var>)> {
    match cons.penalty_term(g, params)? {
        Some(p) => Ok((g.add(data, p)?, Some(p))),
        None => Ok((data, None)),
    }
}

pub struct CriticLoss {
    pub total: Var,
    pub wasserstein: Var,
    pub penalty: Var,
}

/// `-E[D(real)] + E[D(fake)] + lambda_gp * E[(|grad_x D(x)| - 1)^2]` with the
/// penalty taken at `gp_points`, or at the real points when `None`.
pub fn critic_loss(
    g: &mut Graph,
    critic: &CriticNet,
    real: &Tensor,
    fake: &Tensor,
    gp_points: Option<&Tensor>,
    lambda_gp: f64,
) -> Result<CriticLoss> {
    let rv = g.leaf(real.clone(), gp_points.is_none())?;
    let fv = g.constant(fake.clone());
    let sr = critic.score(g, rv)?;
    let sf = critic.score(g, fv)?;
    let mr = g.mean(sr)?;
    let mf = g.mean(sf)?;
    let wasserstein = g.sub(mf, mr)?;

    let (xv, sx) = match gp_points {
        None => (rv, sr),
        Some(p) => {
            let xv = g.leaf(p.clone(), true)?;
            (xv, critic.score(g, xv)?)
        }
    };
    let norms = g.grad_norm(sx, xv)?;
    let shifted = g.add_scalar(norms, -1.0)?;
    let sq = g.square(shifted)?;
    let penalty = g.mean(sq)?;
    let weighted = g.scale(penalty, lambda_gp)?;
    let total = g.add(wasserstein, weighted)?;
    Ok(CriticLoss {
        total,
        wasserstein,
        penalty,
    })
}

pub struct HeadLoss {
    pub total: Var,
    pub data: Var,
    pub penalty: Option<Var>,
}

/// Auxiliary head: cross-entropy on replay labels plus its consolidation term.
pub fn aux_loss(
    g: &mut Graph,
    critic: &CriticNet,
    x: &Tensor,
    y: &[usize],
    cons: &ConsolidationState,
) -> Result<HeadLoss> {
    let xv = g.constant(x.clone());
    let logits = critic.logits(g, xv)?;
    let data = cross_entropy(g, logits, &one_hot(y, critic.num_classes())?)?;
    let (total, penalty) = with_penalty(g, data, cons, &critic.params)?;
    Ok(HeadLoss {
        total,
        data,
        penalty,
    })
}

/// Classifier: cross-entropy against the auxiliary head's soft targets
/// (held constant) plus its consolidation term.
pub fn classifier_loss(
    g: &mut Graph,
    classifier: &ClassifierNet,
    x: &Tensor,
    soft_targets: &Tensor,
    cons: &ConsolidationState,
) -> Result<HeadLoss> {
    let xv = g.constant(x.clone());
    let logits = classifier.logits(g, xv)?;
    let data = cross_entropy(g, logits, soft_targets)?;
    let (total, penalty) = with_penalty(g, data, cons, &classifier.params)?;
    Ok(HeadLoss {
        total,
        data,
        penalty,
    })
}

/// The classifier objective used for importance estimation: label
/// cross-entropy plus distillation from the auxiliary head.
pub fn classifier_importance_loss(
    g: &mut Graph,
    classifier: &ClassifierNet,
    x: &Tensor,
    y: &[usize],
    soft_targets: &Tensor,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let logits = classifier.logits(g, xv)?;
    let ce = cross_entropy(g, logits, &one_hot(y, classifier.num_classes())?)?;
    let distill = cross_entropy(g, logits, soft_targets)?;
    g.add(ce, distill)
}

/// `sum m (1 - prev) / sum (1 - prev)` over layers, or a zero constant when
/// no free capacity remains.
pub fn mask_sparsity_term(g: &mut Graph, masks: &[Var], previous: &[Tensor]) -> Result<Var> {
    if masks.len() != previous.len() {
        return Err(Error::shape(
            "mask sparsity",
            format!(
                "{} masks vs {} cumulative masks",
                masks.len(),
                previous.len()
            ),
        ));
    }
    let mut denom = 0.0;
    let mut num: Option<Var> = None;
    for (&m, prev) in masks.iter().zip(previous) {
        let free = prev.map(|v| 1.0 - v);
        denom += free.sum();
        let fv = g.constant(free);
        let prod = g.mul(m, fv)?;
        let s = g.sum(prod)?;
        num = Some(match num {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    match num {
        Some(n) if denom > 0.0 => g.scale(n, 1.0 / denom),
        _ => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub sparsity: Var,
    pub aux_ce: Var,
}

/// `-E[D(G(z,c))] + R_M + lambda_g * CE(D'(G(z,c)), c)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    g: &mut Graph,
    generator: &GeneratorNet,
    critic: &CriticNet,
    z: &Tensor,
    classes: &[usize],
    training: TrainingMask,
    previous: &[Tensor],
    lambda_g: f64,
) -> Result<GeneratorLoss> {
    let zv = g.constant(z.clone());
    let out = generator.forward(g, zv, classes, Some(training))?;
    let features = critic.trunk(g, out.samples)?;
    let scores = critic.critic_head(g, features)?;
    let ms = g.mean(scores)?;
    let adversarial = g.neg(ms)?;
    let sparsity = mask_sparsity_term(g, &out.masks, previous)?;
    let logits = critic.aux_logits(g, features)?;
    let aux_ce = cross_entropy(g, logits, &one_hot(classes, critic.num_classes())?)?;
    let weighted = g.scale(aux_ce, lambda_g)?;
    let a = g.add(adversarial, sparsity)?;
    let total = g.add(a, weighted)?;
    Ok(GeneratorLoss {
        total,
        adversarial,
        sparsity,
        aux_ce,
    })
}
