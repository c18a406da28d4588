//! Overlap of the critic's and the auxiliary head's importance on the
//! trunk they share.

use serde::{Deserialize, Serialize};

use super::similarity::SimilarityReport;
use crate::autodiff::{Graph, Tensor};
use crate::consolidation::{estimate_fisher, FisherMap, ImportanceSource};
use crate::error::{Error, Result};
use crate::harness::datasets::DataSource;
use crate::nets::{ClassHead, CriticNet};
use crate::replay::losses::{cross_entropy, one_hot};
use crate::replay::{Trainer, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterferenceSettings {
    pub fisher_samples: usize,
}

impl Default for InterferenceSettings {
    fn default() -> Self {
        InterferenceSettings {
            fisher_samples: 256,
        }
    }
}

/// Importance of the trunk under the critic score and under the auxiliary
/// cross-entropy, both measured on the rows `idx`.
pub fn head_importances(
    critic: &CriticNet,
    x: &Tensor,
    y: &[usize],
    idx: &[usize],
) -> Result<(FisherMap, FisherMap)> {
    let trunk = critic.trunk_names();
    let score = estimate_fisher(&trunk, &[], idx.len(), ImportanceSource::CriticScore, |k| {
        let mut g = Graph::new();
        let xv = g.constant(x.select_rows(&[idx[k]]));
        let s = critic.score(&mut g, xv)?;
        let s = g.sum(s)?;
        let mut grads = g.param_grads(s)?;
        grads.retain(|n| trunk.iter().any(|t| t == n));
        Ok(grads)
    })?;
    let aux = estimate_fisher(
        &trunk,
        &[],
        idx.len(),
        ImportanceSource::AuxCrossEntropy,
        |k| {
            let i = idx[k];
            let mut g = Graph::new();
            let xv = g.constant(x.select_rows(&[i]));
            let logits = critic.logits(&mut g, xv)?;
            let ce = cross_entropy(&mut g, logits, &one_hot(&y[i..=i], critic.num_classes())?)?;
            let mut grads = g.param_grads(ce)?;
            grads.retain(|n| trunk.iter().any(|t| t == n));
            Ok(grads)
        },
    )?;
    Ok((score, aux))
}

/// Trains the full model through every task of `source`, then compares the
/// two heads' trunk importance on the last task's replay set (its real data
/// plus the generated sets of earlier tasks). One row per trunk group.
pub fn joint_head_interference_experiment(
    config: &TrainerConfig,
    source: &dyn DataSource,
    settings: &InterferenceSettings,
    seed: u64,
) -> Result<SimilarityReport> {
    if source.num_tasks() == 0 {
        return Err(Error::EmptyDataset("task sequence".into()));
    }
    let mut trainer = Trainer::new(
        config.clone(),
        source.data_dim(),
        source.classes_of(0).len(),
        seed,
    )?;
    for t in 0..source.num_tasks() {
        trainer.train_task(source.train(t)?, source.test(t)?)?;
    }
    let last = source.num_tasks() - 1;
    let real = source.train(last)?;
    let mut data = real.x.data().to_vec();
    let mut y = real.y.clone();
    for set in trainer.replay.generated.iter().filter(|s| s.task < last) {
        data.extend_from_slice(set.x.data());
        y.extend_from_slice(&set.c);
    }
    let x = Tensor::matrix(y.len(), source.data_dim(), data)?;
    let m = settings.fisher_samples.min(y.len());
    let idx = rand::seq::index::sample(trainer.rng_mut(), y.len(), m).into_vec();
    let (score, aux) = head_importances(&trainer.critic, &x, &y, &idx)?;
    let mut report = SimilarityReport::default();
    report.push_groups(
        &score,
        &aux,
        &trainer.critic.trunk_names(),
        config.lambda_dprime,
        seed,
    )?;
    Ok(report)
}

/// Whether some deeper trunk weight group has a lower cosine than the
/// first trunk layer's weights.
pub fn deeper_group_less_similar(report: &SimilarityReport) -> bool {
    let weights: Vec<f64> = (0..)
        .map_while(|l| {
            report
                .rows
                .iter()
                .find(|r| r.group == format!("trunk.{l}.w"))
        })
        .map(|r| r.cosine)
        .collect();
    match weights.split_first() {
        Some((first, rest)) => rest.iter().any(|c| c < first),
        None => false,
    }
}
