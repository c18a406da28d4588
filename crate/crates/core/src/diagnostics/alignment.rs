//! How closely a classifier's importance on generated data follows its
//! importance on real data, after it has been trained on real data first
//! and then continued on generated data under consolidation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::similarity::SimilarityReport;
use crate::autodiff::{Graph, Optimizer, OptimizerSettings, Tensor};
use crate::consolidation::{estimate_fisher, penalty_term, snapshot, FisherMap, ImportanceSource};
use crate::error::{Error, Result};
use crate::harness::datasets::DataSource;
use crate::nets::{ClassHead, ClassifierNet, GeneratorNet};
use crate::replay::losses::{cross_entropy, one_hot};
use crate::replay::{TaskDataset, Trainer, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSettings {
    /// Consolidation strengths of the continuation phase.
    pub lambdas: Vec<f64>,
    /// Epochs for the generator that supplies the replay data.
    pub gan_epochs: usize,
    /// Classifier epochs on real data.
    pub real_epochs: usize,
    /// Classifier epochs on generated data.
    pub generated_epochs: usize,
    pub fisher_samples: usize,
    /// Leading tasks of the sequence merged into the probed task; all when unset.
    pub tasks: Option<usize>,
}

impl Default for AlignmentSettings {
    fn default() -> Self {
        AlignmentSettings {
            lambdas: vec![0.0, 10.0, 100.0],
            gan_epochs: 30,
            real_epochs: 20,
            generated_epochs: 20,
            fisher_samples: 256,
            tasks: None,
        }
    }
}

/// Minibatch training on label cross-entropy, plus an optional quadratic
/// consolidation term.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut ClassifierNet,
    x: &Tensor,
    y: &[usize],
    epochs: usize,
    batch: usize,
    opt: &mut Optimizer,
    penalty: Option<(&crate::consolidation::Anchor, &FisherMap, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch.max(1)) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let logits = net.logits(&mut g, xv)?;
            let mut loss = cross_entropy(&mut g, logits, &one_hot(&yb, net.num_classes())?)?;
            if let Some((anchor, fisher, lambda)) = penalty {
                let p = penalty_term(&mut g, &net.params, anchor, fisher, lambda)?;
                loss = g.add(loss, p)?;
            }
            let grads = g.param_grads(loss)?;
            opt.step(&mut net.params, &grads)?;
        }
    }
    Ok(())
}

/// Empirical Fisher of label cross-entropy over the rows `idx`.
pub fn cross_entropy_fisher(
    net: &ClassifierNet,
    x: &Tensor,
    y: &[usize],
    idx: &[usize],
    excluded: &[String],
) -> Result<FisherMap> {
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    estimate_fisher(
        &names,
        excluded,
        idx.len(),
        ImportanceSource::ClassifierCrossEntropy,
        |k| {
            let i = idx[k];
            let mut g = Graph::new();
            let xv = g.constant(x.select_rows(&[i]));
            let logits = net.logits(&mut g, xv)?;
            let ce = cross_entropy(&mut g, logits, &one_hot(&y[i..=i], net.num_classes())?)?;
            g.param_grads(ce)
        },
    )
}

/// Runs the real-then-generated protocol once per strength in
/// `settings.lambdas`, starting every sweep point from the same classifier
/// trained on `real`. Rows cover every classifier parameter group.
pub fn replay_alignment(
    generator: &GeneratorNet,
    real: &TaskDataset,
    classifier: &ClassifierNet,
    settings: &AlignmentSettings,
    optimizer: OptimizerSettings,
    batch: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    for &c in &real.classes {
        if generator.task_of(c).is_err() {
            return Err(Error::InvalidArgument(format!(
                "no trained generator covers class {c}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Same labels as the real set, so both sides are equally balanced.
    let gen_x = generator.sample(&real.y, &mut rng)?;
    real_then_generated(
        real, &gen_x, classifier, settings, optimizer, batch, seed, &mut rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn real_then_generated(
    real: &TaskDataset,
    gen_x: &Tensor,
    classifier: &ClassifierNet,
    settings: &AlignmentSettings,
    optimizer: OptimizerSettings,
    batch: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<SimilarityReport> {
    let n = real.len();
    let m = settings.fisher_samples.min(n);
    let idx = rand::seq::index::sample(rng, n, m).into_vec();
    let groups: Vec<String> = classifier.params.names().map(str::to_string).collect();

    let mut base = classifier.clone();
    let mut opt = Optimizer::new(optimizer);
    fit(
        &mut base,
        &real.x,
        &real.y,
        settings.real_epochs,
        batch,
        &mut opt,
        None,
        rng,
    )?;
    let excluded = base.output_names();
    let protect = cross_entropy_fisher(&base, &real.x, &real.y, &idx, &excluded)?;
    let kept: Vec<String> = groups
        .iter()
        .filter(|g| !excluded.contains(g))
        .cloned()
        .collect();
    let anchor = snapshot(&base.params, &kept, 0)?;

    let mut report = SimilarityReport::default();
    for &lambda in &settings.lambdas {
        let mut net = base.clone();
        let mut opt = Optimizer::new(optimizer);
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ lambda.to_bits());
        fit(
            &mut net,
            gen_x,
            &real.y,
            settings.generated_epochs,
            batch,
            &mut opt,
            Some((&anchor, &protect, lambda)),
            &mut prng,
        )?;
        let on_real = cross_entropy_fisher(&net, &real.x, &real.y, &idx, &[])?;
        let on_gen = cross_entropy_fisher(&net, gen_x, &real.y, &idx, &[])?;
        report.push_groups(&on_real, &on_gen, &groups, lambda, seed)?;
    }
    Ok(report)
}

/// Trains a generator on the merged leading tasks of `source`, then runs
/// [`replay_alignment`] on that merged task.
pub fn replay_alignment_experiment(
    config: &TrainerConfig,
    source: &dyn DataSource,
    settings: &AlignmentSettings,
    seed: u64,
) -> Result<SimilarityReport> {
    let tasks = settings.tasks.unwrap_or(source.num_tasks());
    if tasks == 0 || tasks > source.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "cannot merge {tasks} of {} tasks",
            source.num_tasks()
        )));
    }
    let train = merge_tasks(source, tasks, |t| source.train(t))?;
    let test = merge_tasks(source, tasks, |t| source.test(t))?;
    let classes = train.classes.len();
    let cfg = TrainerConfig {
        epochs: settings.gan_epochs,
        ..config.clone()
    };
    let mut trainer = Trainer::new(cfg, source.data_dim(), classes, seed)?;
    trainer.train_task(train.clone(), test)?;
    let a = &config.architecture;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let classifier = ClassifierNet::new(
        source.data_dim(),
        a.classifier_hidden.clone(),
        classes,
        a.slope,
        &mut rng,
    )?;
    replay_alignment(
        &trainer.generator,
        &train,
        &classifier,
        settings,
        config.optimizer,
        config.batch_size,
        seed,
    )
}

/// One task holding the data of the first `tasks` tasks.
pub fn merge_tasks(
    source: &dyn DataSource,
    tasks: usize,
    load: impl Fn(usize) -> Result<TaskDataset>,
) -> Result<TaskDataset> {
    let mut classes = Vec::new();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for t in 0..tasks {
        let d = load(t)?;
        classes.extend(source.classes_of(t));
        data.extend_from_slice(d.x.data());
        y.extend_from_slice(&d.y);
    }
    let x = Tensor::matrix(y.len(), source.data_dim(), data)?;
    TaskDataset::new(0, classes, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::datasets::{builtin_source, DatasetConfig};

    #[test]
    fn identical_inputs_give_unit_similarity() {
        let cfg = DatasetConfig {
            train_per_class: 20,
            ..DatasetConfig::default()
        };
        let src = builtin_source(&cfg, 3).unwrap();
        let real = merge_tasks(&src, 2, |t| src.train(t)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ClassifierNet::new(2, vec![8], 4, 0.2, &mut rng).unwrap();
        let settings = AlignmentSettings {
            lambdas: vec![0.0, 100.0],
            real_epochs: 2,
            generated_epochs: 2,
            fisher_samples: 16,
            ..AlignmentSettings::default()
        };
        let r = real_then_generated(
            &real,
            &real.x,
            &c,
            &settings,
            OptimizerSettings::default(),
            16,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 2 * c.params.len());
        for row in &r.rows {
            assert!((row.cosine - 1.0).abs() < 1e-12, "{row:?}");
        }
    }
}
