//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order and share the training sweep. Deterministic criteria always decide
//! the exit status; the seeded statistical ones (5 to 9) only do so when
//! `TRINET_ACCEPTANCE_STRICT=1`, otherwise their FAIL lines are reported
//! without failing the build. Set `TRINET_ACCEPTANCE_ONLY=1,4,10` to run a
//! subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trinet_core::autodiff::{GradMap, Graph, ParamStore, Tensor};
use trinet_core::consolidation::{
    snapshot, CombineMode, ConsolidationKind, ConsolidationState, FisherMap, ImportanceSource,
};
use trinet_core::diagnostics::{
    deeper_group_less_similar, joint_head_interference_experiment, replay_alignment_experiment,
};
use trinet_core::harness::datasets::{builtin_source, DirectorySource};
use trinet_core::harness::{
    run_experiment, Checkpoint, DataSource, DatasetConfig, ExperimentConfig, RunOptions, RunStatus,
};
use trinet_core::nets::mask::embedding_name;
use trinet_core::nets::{
    cumulative_max, mask_sparsity_penalty, ClassHead, ClassifierNet, CriticNet, GeneratorNet,
    GeneratorSpec, OutputActivation, TrainingMask,
};
use trinet_core::replay::losses::{
    aux_loss, classifier_importance_loss, classifier_loss, critic_loss, generator_loss,
    mask_sparsity_term,
};
use trinet_core::replay::{predict, AccuracyReport, Trainer, TrainerConfig};

type Outcome = Result<String, String>;

// ----- criterion 1: gradients against central differences ---------------

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::matrix(r, c, out).unwrap()
}

/// A randomly sized set of the three networks plus inputs for every loss.
#[derive(Clone)]
struct World {
    critic: CriticNet,
    classifier: ClassifierNet,
    generator: GeneratorNet,
    x: Tensor,
    fake: Tensor,
    interp: Tensor,
    y: Vec<usize>,
    soft: Tensor,
    z: Tensor,
    gen_classes: Vec<usize>,
    scale: f64,
    lambda_gp: f64,
    lambda_g: f64,
    cons_aux: ConsolidationState,
    cons_cls: ConsolidationState,
}

fn random_penalty(
    rng: &mut ChaCha8Rng,
    params: &ParamStore,
    names: &[String],
    excluded: &[String],
    kind: ConsolidationKind,
) -> ConsolidationState {
    let mut cons = ConsolidationState::new(kind, rng.random_range(0.5..5.0), CombineMode::Sum, 0.1);
    let mut fisher = FisherMap::new(ImportanceSource::AuxCrossEntropy);
    let mut moved = params.clone();
    for n in names {
        let p = params.get(n).unwrap();
        let (r, c) = p.dims2();
        let f = rand_matrix(rng, r, c, 1.0).map(f64::abs);
        if excluded.contains(n) {
            fisher.excluded.insert(n.clone());
        }
        fisher.importance.insert(n.clone(), f);
        let shift = rand_matrix(rng, r, c, 0.3);
        *moved.get_mut(n).unwrap() = p.zip_map(&shift, |a, b| a + b).unwrap();
    }
    cons.importance = Some(fisher);
    cons.anchor = Some(snapshot(&moved, names, 0).unwrap());
    cons
}

/// Adds uniform noise to every entry so no bias sits at its zero init.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

fn random_world(rng: &mut ChaCha8Rng) -> World {
    let dim = rng.random_range(1..=3);
    let k0 = rng.random_range(1..=2);
    let k1 = rng.random_range(1..=2);
    let classes = k0 + k1;
    let n = rng.random_range(2..=4);
    let slope = rng.random_range(0.05..0.3);
    let widths = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<usize> {
        (0..rng.random_range(lo..=hi))
            .map(|_| rng.random_range(2..=4))
            .collect()
    };
    let mut critic = CriticNet::new(dim, widths(rng, 1, 3), classes, slope, rng).unwrap();
    let mut classifier = ClassifierNet::new(dim, widths(rng, 0, 2), classes, slope, rng).unwrap();
    jitter(&mut critic.params, rng);
    jitter(&mut classifier.params, rng);
    let spec = GeneratorSpec {
        latent_dim: rng.random_range(1..=3),
        embedding_dim: rng.random_range(1..=2),
        hidden: widths(rng, 1, 2),
        data_dim: dim,
        output: [
            OutputActivation::Linear,
            OutputActivation::Sigmoid,
            OutputActivation::Tanh,
        ][rng.random_range(0..3)],
        slope,
        s_max: 400.0,
        binarize_masks: false,
    };
    let mut generator = GeneratorNet::new(spec.clone(), k0, rng).unwrap();
    jitter(&mut generator.params, rng);
    // Task 0 finishes with random masks; task 1 trains.
    for l in 0..spec.hidden.len() {
        let e = rand_matrix(rng, 1, spec.hidden[l], 0.02);
        *generator
            .masks
            .embeddings_mut(0)
            .unwrap()
            .get_mut(&embedding_name(l))
            .unwrap() = e;
    }
    generator.masks.finish_task().unwrap();
    generator.add_task(k1, rng).unwrap();
    jitter(&mut generator.params, rng);
    for l in 0..spec.hidden.len() {
        let e = rand_matrix(rng, 1, spec.hidden[l], 1.0);
        *generator
            .masks
            .embeddings_mut(1)
            .unwrap()
            .get_mut(&embedding_name(l))
            .unwrap() = e;
    }

    let aux_names = critic.aux_names();
    let aux_out = critic.output_names();
    let cls_names: Vec<String> = classifier.params.names().map(str::to_string).collect();
    let cls_out = classifier.output_names();
    let kinds = [ConsolidationKind::Ewc, ConsolidationKind::Si];
    let (ka, kc) = (kinds[rng.random_range(0..2)], kinds[rng.random_range(0..2)]);
    let cons_aux = random_penalty(rng, &critic.params, &aux_names, &aux_out, ka);
    let cons_cls = random_penalty(rng, &classifier.params, &cls_names, &cls_out, kc);
    let x = rand_matrix(rng, n, dim, 2.0);
    let fake = rand_matrix(rng, n, dim, 2.0);
    let interp = rand_matrix(rng, n, dim, 2.0);
    let soft = softmax_rows(&rand_matrix(rng, n, classes, 2.0));
    let z = rand_matrix(rng, n, spec.latent_dim, 1.5);
    World {
        y: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        gen_classes: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        scale: rng.random_range(1.0..6.0),
        lambda_gp: rng.random_range(0.5..10.0),
        lambda_g: rng.random_range(0.1..2.0),
        critic,
        classifier,
        generator,
        x,
        fake,
        interp,
        soft,
        z,
        cons_aux,
        cons_cls,
    }
}

/// Smallest |pre-activation| of the leaky-relu layers `{prefix}.{l}` on `x`.
fn kink_margin(store: &ParamStore, prefix: &str, x: &Tensor) -> f64 {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    let mut l = 0;
    while let Ok(w) = store.get(&format!("{prefix}.{l}.w")) {
        let b = store.get(&format!("{prefix}.{l}.b")).unwrap();
        let ((n, k), m) = (h.dims2(), w.dims2().1);
        let mut next = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let pre = b.data()[j] + (0..k).map(|q| h.get2(i, q) * w.get2(q, j)).sum::<f64>();
                margin = margin.min(pre.abs());
                // The slope does not matter for the sign pattern downstream.
                next.push(if pre > 0.0 { pre } else { 0.1 * pre });
            }
        }
        h = Tensor::matrix(n, m, next).unwrap();
        l += 1;
    }
    margin
}

/// Distance of every leaky-relu input, over all data the losses see, from
/// the kink. Finite differences are meaningless within a step of it.
fn world_margin(w: &World) -> f64 {
    let mut g = Graph::new();
    let zv = g.constant(w.z.clone());
    let tm = TrainingMask {
        task: 1,
        scale: w.scale,
    };
    let out = w
        .generator
        .forward(&mut g, zv, &w.gen_classes, Some(tm))
        .unwrap();
    let generated = g.value(out.samples).clone();
    let mut m = f64::INFINITY;
    for x in [&w.x, &w.fake, &w.interp, &generated] {
        m = m.min(kink_margin(&w.critic.params, "trunk", x));
    }
    m = m.min(kink_margin(&w.classifier.params, "feat", &w.x));
    m.min(generator_margin(w))
}

/// Same for the generator's hidden layers, whose outputs are gated by the
/// mask of each row's task: the live mask for task 1, the frozen one for 0.
fn generator_margin(w: &World) -> f64 {
    let gen = &w.generator;
    let emb = gen.params.get("emb").unwrap();
    let mut margin = f64::INFINITY;
    for (i, &c) in w.gen_classes.iter().enumerate() {
        let mut h = w.z.row_slice(i).to_vec();
        h.extend_from_slice(emb.row_slice(c));
        let task = gen.task_of(c).unwrap();
        for l in 0..gen.spec.hidden.len() {
            let wt = gen.params.get(&format!("fc.{l}.w")).unwrap();
            let b = gen.params.get(&format!("fc.{l}.b")).unwrap();
            let mask = if task == 1 {
                let e = gen
                    .masks
                    .embeddings(1)
                    .unwrap()
                    .get(&embedding_name(l))
                    .unwrap();
                e.map(|v| 1.0 / (1.0 + (-w.scale * v).exp()))
            } else {
                gen.masks.finished_mask(0, l).unwrap().clone()
            };
            h = (0..wt.dims2().1)
                .map(|j| {
                    let pre = b.data()[j]
                        + h.iter()
                            .enumerate()
                            .map(|(q, v)| v * wt.get2(q, j))
                            .sum::<f64>();
                    margin = margin.min(pre.abs());
                    let act = if pre > 0.0 { pre } else { gen.spec.slope * pre };
                    act * mask.data()[j]
                })
                .collect();
        }
    }
    margin
}

#[derive(Clone, Copy, Debug)]
enum LossCase {
    CriticAtReal,
    CriticAtInterpolates,
    Aux,
    Classifier,
    ClassifierImportance,
    Generator,
}

const CASES: [LossCase; 6] = [
    LossCase::CriticAtReal,
    LossCase::CriticAtInterpolates,
    LossCase::Aux,
    LossCase::Classifier,
    LossCase::ClassifierImportance,
    LossCase::Generator,
];

/// Loss value and, when `with_grads`, its parameter gradients.
fn evaluate(w: &World, case: LossCase, with_grads: bool) -> (f64, Option<GradMap>) {
    // The gradient penalty differentiates through the critic, so even the
    // value-only passes need a recording graph.
    let mut g = Graph::new();
    let loss = match case {
        LossCase::CriticAtReal => {
            critic_loss(&mut g, &w.critic, &w.x, &w.fake, None, w.lambda_gp)
                .unwrap()
                .total
        }
        LossCase::CriticAtInterpolates => {
            critic_loss(
                &mut g,
                &w.critic,
                &w.x,
                &w.fake,
                Some(&w.interp),
                w.lambda_gp,
            )
            .unwrap()
            .total
        }
        LossCase::Aux => {
            aux_loss(&mut g, &w.critic, &w.x, &w.y, &w.cons_aux)
                .unwrap()
                .total
        }
        LossCase::Classifier => {
            classifier_loss(&mut g, &w.classifier, &w.x, &w.soft, &w.cons_cls)
                .unwrap()
                .total
        }
        LossCase::ClassifierImportance => {
            classifier_importance_loss(&mut g, &w.classifier, &w.x, &w.y, &w.soft).unwrap()
        }
        LossCase::Generator => {
            let prev = w.generator.masks.previous_cumulative();
            let tm = TrainingMask {
                task: 1,
                scale: w.scale,
            };
            generator_loss(
                &mut g,
                &w.generator,
                &w.critic,
                &w.z,
                &w.gen_classes,
                tm,
                &prev,
                w.lambda_g,
            )
            .unwrap()
            .total
        }
    };
    let v = g.value(loss).item();
    (v, with_grads.then(|| g.param_grads(loss).unwrap()))
}

/// The parameter stores a loss depends on, as (label, store accessor).
fn stores(case: LossCase) -> &'static [&'static str] {
    match case {
        LossCase::CriticAtReal | LossCase::CriticAtInterpolates | LossCase::Aux => &["critic"],
        LossCase::Classifier | LossCase::ClassifierImportance => &["classifier"],
        LossCase::Generator => &["critic", "generator", "mask"],
    }
}

fn store_mut<'a>(w: &'a mut World, which: &str) -> &'a mut ParamStore {
    match which {
        "critic" => &mut w.critic.params,
        "classifier" => &mut w.classifier.params,
        "generator" => &mut w.generator.params,
        _ => w.generator.masks.embeddings_mut(1).unwrap(),
    }
}

/// Largest norm-wise relative error over the loss's parameter tensors.
fn gradient_error(w: &World, case: LossCase) -> f64 {
    let (_, grads) = evaluate(w, case, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for which in stores(case) {
        let mut probe = w.clone();
        let names: Vec<String> = store_mut(&mut probe, which)
            .names()
            .map(str::to_string)
            .collect();
        for name in names {
            let len = store_mut(&mut probe, which).get(&name).unwrap().len();
            let mut fd = Vec::with_capacity(len);
            for i in 0..len {
                let orig = store_mut(&mut probe, which).get(&name).unwrap().data()[i];
                store_mut(&mut probe, which)
                    .get_mut(&name)
                    .unwrap()
                    .data_mut()[i] = orig + h;
                let plus = evaluate(&probe, case, false).0;
                store_mut(&mut probe, which)
                    .get_mut(&name)
                    .unwrap()
                    .data_mut()[i] = orig - h;
                let minus = evaluate(&probe, case, false).0;
                store_mut(&mut probe, which)
                    .get_mut(&name)
                    .unwrap()
                    .data_mut()[i] = orig;
                fd.push((plus - minus) / (2.0 * h));
            }
            let analytic: Vec<f64> = match grads.get(&name) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; len],
            };
            let diff = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = na.max(nf);
            let err = if scale < 1e-9 { diff } else { diff / scale };
            worst = worst.max(err);
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = (0.0, 0, LossCase::Aux);
    let mut rejected = 0;
    for net in 0..100 {
        let w = loop {
            let w = random_world(&mut rng);
            if world_margin(&w) > 1e-3 {
                break w;
            }
            rejected += 1;
        };
        for case in CASES {
            let e = gradient_error(&w, case);
            if e > worst.0 {
                worst = (e, net, case);
            }
        }
    }
    let msg = format!(
        "100 nets x {} losses, worst rel err {:.2e} ({:?}, net {}); {rejected} draws rejected for a pre-activation within 1e-3 of the kink",
        CASES.len(),
        worst.0,
        worst.2,
        worst.1
    );
    if worst.0 < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ----- criterion 2: zero weights reduce to the unregularized losses ------

/// `-mean log p[y]` from a probability table.
fn nll(p: &Tensor, y: &[usize]) -> f64 {
    -y.iter()
        .enumerate()
        .map(|(i, &c)| p.get2(i, c).ln())
        .sum::<f64>()
        / y.len() as f64
}

/// `-mean sum_k t[k] log p[k]`.
fn soft_nll(p: &Tensor, t: &Tensor) -> f64 {
    let n = t.dims2().0;
    -(0..n)
        .map(|i| {
            p.row_slice(i)
                .iter()
                .zip(t.row_slice(i))
                .map(|(p, t)| t * p.ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut w = random_world(&mut rng);
        w.cons_aux.lambda = 0.0;
        w.cons_cls.lambda = 0.0;
        w.lambda_gp = 0.0;
        w.lambda_g = 0.0;

        let mut g = Graph::new();
        let l = aux_loss(&mut g, &w.critic, &w.x, &w.y, &w.cons_aux).map_err(|e| e.to_string())?;
        let oracle = nll(&w.critic.aux_classifier_forward(&w.x).unwrap(), &w.y);
        worst = worst.max((g.value(l.total).item() - oracle).abs());

        let mut g = Graph::new();
        let l = classifier_loss(&mut g, &w.classifier, &w.x, &w.soft, &w.cons_cls)
            .map_err(|e| e.to_string())?;
        let oracle = soft_nll(&w.classifier.classifier_forward(&w.x).unwrap(), &w.soft);
        worst = worst.max((g.value(l.total).item() - oracle).abs());

        let mut g = Graph::new();
        let l =
            critic_loss(&mut g, &w.critic, &w.x, &w.fake, None, 0.0).map_err(|e| e.to_string())?;
        let mean = |t: Tensor| t.sum() / t.len() as f64;
        let oracle = mean(w.critic.discriminator_forward(&w.fake).unwrap())
            - mean(w.critic.discriminator_forward(&w.x).unwrap());
        worst = worst.max((g.value(l.total).item() - oracle).abs());

        let mut g = Graph::new();
        let prev = w.generator.masks.previous_cumulative();
        let tm = TrainingMask {
            task: 1,
            scale: w.scale,
        };
        let l = generator_loss(
            &mut g,
            &w.generator,
            &w.critic,
            &w.z,
            &w.gen_classes,
            tm,
            &prev,
            0.0,
        )
        .map_err(|e| e.to_string())?;
        let unreg = g.value(l.adversarial).item() + g.value(l.sparsity).item();
        worst = worst.max((g.value(l.total).item() - unreg).abs());
    }
    let msg = format!("max |total - unregularized| = {worst:.1e} over 50 nets x 4 losses");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ----- criterion 3: mask algebra ------------------------------------------

fn tiny_data(num_tasks: usize) -> DatasetConfig {
    DatasetConfig {
        num_tasks: Some(num_tasks),
        train_per_class: 40,
        test_per_class: 10,
        ..DatasetConfig::default()
    }
}

fn criterion_3() -> Outcome {
    // Sparsity regularizer hand cases.
    let row = |v: &[f64]| Tensor::row(v.to_vec());
    let cases = [
        (vec![row(&[0.5, 1.0])], vec![row(&[0.0, 1.0])], 0.5),
        (vec![row(&[0.0, 0.0])], vec![row(&[0.3, 0.6])], 0.0),
        (vec![row(&[1.0, 1.0])], vec![row(&[0.0, 0.0])], 1.0),
        (vec![row(&[0.4, 0.9])], vec![row(&[1.0, 1.0])], 0.0),
    ];
    for (m, prev, want) in &cases {
        let got = mask_sparsity_penalty(m, prev).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let vars: Vec<_> = m.iter().map(|t| g.constant(t.clone())).collect();
        let term = mask_sparsity_term(&mut g, &vars, prev).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-15 || (g.value(term).item() - want).abs() > 1e-15 {
            return Err(format!("R_M({m:?}, {prev:?}) = {got}, expected {want}"));
        }
    }
    let c = cumulative_max(&[&row(&[0.3, 0.9]), &row(&[0.7, 0.2])]).map_err(|e| e.to_string())?;
    if c.data() != [0.7, 0.9] {
        return Err(format!("cumulative max gave {:?}", c.data()));
    }

    // Binarized masks: train two tasks, then a third, and check freezing.
    let data = tiny_data(3);
    let source = builtin_source(&data, 7).map_err(|e| e.to_string())?;
    let config = TrainerConfig {
        epochs: 4,
        binarize_masks: true,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(config, 2, 2, 7).map_err(|e| e.to_string())?;
    let mut cums: Vec<Vec<Tensor>> = Vec::new();
    let mut frozen_units = 0;
    let mut checked_params = 0;
    for t in 0..3 {
        let before = trainer.generator.clone();
        let old_classes: Vec<usize> = (0..2 * t).collect();
        let mut zr = ChaCha8Rng::seed_from_u64(t as u64);
        let z = before.latent(old_classes.len().max(1), &mut zr);
        trainer
            .train_task(source.train(t).unwrap(), source.test(t).unwrap())
            .map_err(|e| e.to_string())?;
        let masks = &trainer.generator.masks;
        let layers = masks.num_layers();

        // Cumulative mask is the elementwise max of finished masks and grows.
        let cum: Vec<Tensor> = (0..layers)
            .map(|l| masks.cumulative_mask(l, t + 1).unwrap())
            .collect();
        for l in 0..layers {
            let oracle: Vec<f64> = (0..masks.widths()[l])
                .map(|i| {
                    (0..=t)
                        .map(|k| masks.finished_mask(k, l).unwrap().data()[i])
                        .fold(0.0, f64::max)
                })
                .collect();
            if cum[l].data() != oracle.as_slice() {
                return Err(format!(
                    "cumulative mask of layer {l} after task {} is not the running max",
                    t + 1
                ));
            }
            if let Some(prev) = cums.last() {
                if cum[l].data().iter().zip(prev[l].data()).any(|(a, b)| a < b) {
                    return Err(format!("cumulative mask shrank on layer {l}"));
                }
            }
            if masks
                .finished_mask(t, l)
                .unwrap()
                .data()
                .iter()
                .any(|&v| v != 0.0 && v != 1.0)
            {
                return Err("binarized mask holds a non-binary value".into());
            }
        }

        if t > 0 {
            // Parameters behind units the earlier tasks claimed must not move.
            let prev = &cums[t - 1];
            let (old, new) = (&before.params, &trainer.generator.params);
            for (l, cum_l) in prev.iter().enumerate() {
                for name in [format!("fc.{l}.w"), format!("fc.{l}.b")] {
                    let (a, b) = (old.get(&name).unwrap(), new.get(&name).unwrap());
                    let cols = a.dims2().1;
                    for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                        if cum_l.data()[k % cols] == 1.0 {
                            checked_params += 1;
                            if x.to_bits() != y.to_bits() {
                                return Err(format!(
                                    "{name}[{k}] moved although its unit is claimed"
                                ));
                            }
                        }
                    }
                }
                frozen_units += cum_l.data().iter().filter(|&&v| v == 1.0).count();
            }
            let last = prev.last().unwrap();
            let (a, b) = (old.get("out.w").unwrap(), new.get("out.w").unwrap());
            let cols = a.dims2().1;
            for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if last.data()[k / cols] == 1.0 && x.to_bits() != y.to_bits() {
                    return Err(format!(
                        "out.w[{k}] moved although its input unit is claimed"
                    ));
                }
            }
            // Generation isolation: earlier classes produce identical samples.
            let was = before.generate(&z, &old_classes).unwrap();
            let now = trainer.generator.generate(&z, &old_classes).unwrap();
            if was.max_abs_diff(&now) != 0.0 {
                return Err(format!(
                    "samples of earlier classes changed by {}",
                    was.max_abs_diff(&now)
                ));
            }
        }
        cums.push(cum);
    }
    if frozen_units == 0 {
        return Err("no unit was claimed, so the freeze check is vacuous".into());
    }
    Ok(format!(
        "R_M cases exact; running max monotone; {checked_params} gated values across {frozen_units} claimed units bit-identical"
    ))
}

// ----- criterion 4: decision rule against brute force -------------------

fn brute_force(pa: &[f64], pb: &[f64]) -> usize {
    let combined: Vec<f64> = pa
        .iter()
        .zip(pb)
        .map(|(a, b)| if a >= b { *a } else { *b })
        .collect();
    let best = combined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    combined.iter().position(|&v| v == best).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut rows = 0;
    for table in 0..1000 {
        let n = rng.random_range(1..=16);
        let k = rng.random_range(1..=10);
        // Coarse values on half the tables so ties are common.
        let coarse = table % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Tensor {
            let mut data = Vec::with_capacity(n * k);
            for _ in 0..n {
                let raw: Vec<f64> = (0..k)
                    .map(|_| {
                        if coarse {
                            rng.random_range(0..4) as f64
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    })
                    .collect();
                let s: f64 = raw.iter().sum();
                data.extend(
                    raw.iter()
                        .map(|v| if s > 0.0 { v / s } else { 1.0 / k as f64 }),
                );
            }
            Tensor::matrix(n, k, data).unwrap()
        };
        let pa = draw(&mut rng);
        let pb = draw(&mut rng);
        let got = predict(&pa, &pb).map_err(|e| e.to_string())?;
        for r in 0..n {
            let want = brute_force(pa.row_slice(r), pb.row_slice(r));
            if got[r] != want {
                return Err(format!(
                    "table {table} row {r}: predicted {}, oracle {want}",
                    got[r]
                ));
            }
        }
        rows += n;
    }
    Ok(format!("1000 tables ({rows} rows) agree exactly"))
}

// ----- criteria 5, 8, 9: the consolidation sweep -------------------------

const SEEDS: u64 = 10;
const VARIANTS: [(&str, ConsolidationKind, ConsolidationKind); 5] = [
    ("both", ConsolidationKind::Ewc, ConsolidationKind::Ewc),
    ("dprime", ConsolidationKind::Ewc, ConsolidationKind::None),
    ("c", ConsolidationKind::None, ConsolidationKind::Ewc),
    ("none", ConsolidationKind::None, ConsolidationKind::None),
    ("si", ConsolidationKind::Si, ConsolidationKind::Si),
];

/// Final accuracy of every (variant, seed) run on the default sequence.
struct Sweep {
    runs: BTreeMap<(&'static str, u64), AccuracyReport>,
}

impl Sweep {
    fn run() -> Result<Sweep, String> {
        let base = ExperimentConfig::default();
        let mut runs = BTreeMap::new();
        for seed in 0..SEEDS {
            let source = builtin_source(&base.dataset, seed).map_err(|e| e.to_string())?;
            for (name, kd, kc) in VARIANTS {
                let config = TrainerConfig {
                    consolidation_dprime: kd,
                    consolidation_c: kc,
                    ..base.trainer.clone()
                };
                let mut trainer =
                    Trainer::new(config, source.data_dim(), source.classes_of(0).len(), seed)
                        .map_err(|e| e.to_string())?;
                for t in 0..source.num_tasks() {
                    trainer
                        .train_task(source.train(t).unwrap(), source.test(t).unwrap())
                        .map_err(|e| e.to_string())?;
                }
                runs.insert((name, seed), trainer.evaluate().map_err(|e| e.to_string())?);
            }
        }
        Ok(Sweep { runs })
    }

    fn a(&self, name: &str, seed: u64) -> f64 {
        self.runs
            .iter()
            .find(|((n, s), _)| *n == name && *s == seed)
            .unwrap()
            .1
            .a_t
    }

    fn mean(&self, name: &str) -> f64 {
        (0..SEEDS).map(|s| self.a(name, s)).sum::<f64>() / SEEDS as f64
    }
}

fn criterion_5(sweep: &Sweep) -> Outcome {
    let mut ordered = 0;
    for s in 0..SEEDS {
        let single = (sweep.a("dprime", s) + sweep.a("c", s)) / 2.0;
        if sweep.a("both", s) > single && single > sweep.a("none", s) {
            ordered += 1;
        }
    }
    let gap = sweep.mean("both") - sweep.mean("none");
    let msg = format!(
        "ordered in {ordered}/{SEEDS} seeds; mean A_5 both {:.2}, dprime {:.2}, c {:.2}, none {:.2}; gap {gap:.2}",
        sweep.mean("both"),
        sweep.mean("dprime"),
        sweep.mean("c"),
        sweep.mean("none")
    );
    if ordered >= 7 && gap >= 2.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_8(sweep: &Sweep) -> Outcome {
    let mut worst: (f64, String) = (f64::INFINITY, String::new());
    let mut beats_both = 0;
    let mut per_variant = Vec::new();
    for (variant, ..) in VARIANTS {
        let mut v_worst = f64::INFINITY;
        let mut v_beats = 0;
        for seed in 0..SEEDS {
            let r = &sweep.runs[&(variant, seed)];
            let margin = r.acc_ensemble - r.acc_dprime.max(r.acc_c);
            v_worst = v_worst.min(margin);
            if margin < worst.0 {
                worst = (margin, format!("{variant} seed {seed}"));
            }
            if r.acc_ensemble >= r.acc_dprime && r.acc_ensemble >= r.acc_c {
                v_beats += 1;
            }
        }
        beats_both += v_beats;
        per_variant.push(format!("{variant} {v_beats}/{SEEDS} worst {v_worst:+.1}"));
    }
    let total = sweep.runs.len();
    let msg = format!(
        "worst ensemble - max(head) = {:.2} ({}); ensemble >= both heads in {beats_both}/{total} runs [{}]",
        worst.0,
        worst.1,
        per_variant.join(", ")
    );
    if worst.0 >= -0.5 && 2 * beats_both > total {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_9(sweep: &Sweep) -> Outcome {
    let (ewc, si) = (sweep.mean("both"), sweep.mean("si"));
    let msg = format!(
        "mean A_5 EWC {ewc:.2}, SI {si:.2}, difference {:.2}",
        (ewc - si).abs()
    );
    if (ewc - si).abs() <= 3.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ----- criteria 6, 7: diagnostics ----------------------------------------

fn criterion_6() -> Outcome {
    let base = ExperimentConfig::default();
    let mut hits = 0;
    let mut deltas = Vec::new();
    for seed in 0..SEEDS {
        let source = builtin_source(&base.dataset, seed).map_err(|e| e.to_string())?;
        let report = replay_alignment_experiment(&base.trainer, &source, &base.alignment, seed)
            .map_err(|e| e.to_string())?;
        let at = |l: f64| {
            report
                .mean_cosine(l)
                .ok_or(format!("no rows at lambda {l}"))
        };
        let d = at(100.0)? - at(0.0)?;
        if d >= 0.05 {
            hits += 1;
        }
        deltas.push(format!("{d:+.3}"));
    }
    let msg = format!(
        "cosine(100) - cosine(0) >= 0.05 in {hits}/{SEEDS} seeds [{}]",
        deltas.join(" ")
    );
    if hits >= 7 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Outcome {
    let base = ExperimentConfig::default();
    let mut hits = 0;
    for seed in 0..SEEDS {
        let source = builtin_source(&base.dataset, seed).map_err(|e| e.to_string())?;
        let report =
            joint_head_interference_experiment(&base.trainer, &source, &base.interference, seed)
                .map_err(|e| e.to_string())?;
        if deeper_group_less_similar(&report) {
            hits += 1;
        }
    }
    let msg =
        format!("a deeper trunk group is less similar than the first in {hits}/{SEEDS} seeds");
    if hits >= 6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ----- criterion 10: determinism and resume ------------------------------

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        dataset: tiny_data(3),
        ..ExperimentConfig::default()
    };
    cfg.trainer.epochs = 3;
    cfg
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_experiment();
    let opts = |name: &str| RunOptions {
        out_dir: dir.path().join(name),
        ..RunOptions::default()
    };
    let read = |name: &str, file: &str| std::fs::read(dir.path().join(name).join(file)).unwrap();

    run_experiment(&cfg, &opts("a")).map_err(|e| e.to_string())?;
    run_experiment(&cfg, &opts("b")).map_err(|e| e.to_string())?;
    if read("a", "metrics.csv") != read("b", "metrics.csv") {
        return Err("two identical runs wrote different metrics".into());
    }

    // Interrupt mid-task, then resume from the latest checkpoint.
    let stopped = run_experiment(
        &cfg,
        &RunOptions {
            stop_after_epochs: Some(4),
            ..opts("c")
        },
    )
    .map_err(|e| e.to_string())?;
    if stopped.status != RunStatus::Stopped {
        return Err("run did not stop".into());
    }
    let resumed = RunOptions {
        resume: Some(stopped.latest_checkpoint.clone()),
        ..opts("c")
    };
    run_experiment(&cfg, &resumed).map_err(|e| e.to_string())?;
    for file in [
        "metrics.csv",
        "checkpoints/latest.ckpt",
        "checkpoints/task3.ckpt",
    ] {
        if read("a", file) != read("c", file) {
            return Err(format!("resumed run differs in {file}"));
        }
    }
    Ok(
        "identical runs byte-identical; stop after 4 epochs + resume matches the continuous run"
            .into(),
    )
}

// ----- criterion 11: finished tasks' real data is deleted ----------------

fn write_dataset(root: &Path, source: &dyn DataSource) {
    for split in ["train", "test"] {
        std::fs::create_dir_all(root.join(split)).unwrap();
        let mut per_class: BTreeMap<usize, String> = BTreeMap::new();
        for t in 0..source.num_tasks() {
            let d = if split == "train" {
                source.train(t)
            } else {
                source.test(t)
            }
            .unwrap();
            for (i, &c) in d.y.iter().enumerate() {
                let row: Vec<String> = d.x.row_slice(i).iter().map(|v| v.to_string()).collect();
                let text = per_class.entry(c).or_default();
                text.push_str(&row.join(","));
                text.push('\n');
            }
        }
        for (c, text) in per_class {
            std::fs::write(root.join(split).join(format!("class_{c}.csv")), text).unwrap();
        }
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_experiment();
    let builtin = builtin_source(&cfg.dataset, 1).map_err(|e| e.to_string())?;
    let (kept, pruned) = (dir.path().join("kept"), dir.path().join("pruned"));
    write_dataset(&kept, &builtin);
    write_dataset(&pruned, &builtin);

    let run = |root: &Path, delete: bool| -> Result<Trainer, String> {
        let src = DirectorySource::open(root, &cfg.dataset, cfg.seed).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(cfg.trainer.clone(), src.data_dim(), 2, cfg.seed)
            .map_err(|e| e.to_string())?;
        for t in 0..src.num_tasks() {
            trainer
                .train_task(src.train(t).unwrap(), src.test(t).unwrap())
                .map_err(|e| e.to_string())?;
            if trainer.holds_real_data() {
                return Err(format!(
                    "trainer still holds real data after task {}",
                    t + 1
                ));
            }
            if delete {
                let first = src.train(t).unwrap().x.row_slice(0).to_vec();
                for c in src.classes_of(t) {
                    std::fs::remove_file(root.join("train").join(format!("class_{c}.csv")))
                        .unwrap();
                }
                if src.train(t).is_ok() {
                    return Err("deleted task data is still readable".into());
                }
                // No trace of a real training row in the serialized state.
                let bytes = Checkpoint::new(&cfg, &trainer)
                    .and_then(|c| c.to_bytes())
                    .map_err(|e| e.to_string())?;
                let needle: Vec<u8> = first.iter().flat_map(|v| v.to_le_bytes()).collect();
                if contains(&bytes, &needle) {
                    return Err(format!(
                        "checkpoint after task {} contains a real training row",
                        t + 1
                    ));
                }
            }
        }
        Ok(trainer)
    };
    let a = run(&kept, false)?;
    let b = run(&pruned, true)?;
    if a != b || a.history != b.history {
        return Err("training with deleted data diverged from training with it kept".into());
    }
    Ok(format!(
        "{} tasks trained with finished tasks' files deleted; state bit-identical to the undeleted run",
        a.tasks_seen()
    ))
}

// ----- driver --------------------------------------------------------------

fn main() {
    let strict = std::env::var("TRINET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("TRINET_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let statistical = [5, 6, 7, 8, 9];

    let mut sweep: Option<Result<Sweep, String>> = None;
    let mut failed = Vec::new();
    for n in 1..=11 {
        if !wanted(n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            6 => criterion_6(),
            7 => criterion_7(),
            10 => criterion_10(),
            11 => criterion_11(),
            _ => match sweep.get_or_insert_with(Sweep::run) {
                Err(e) => Err(format!("sweep failed: {e}")),
                Ok(s) => match n {
                    5 => criterion_5(s),
                    8 => criterion_8(s),
                    _ => criterion_9(s),
                },
            },
        };
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n:>2}: PASS  {msg} ({secs:.1}s)"),
            Err(msg) => {
                println!("criterion {n:>2}: FAIL  {msg} ({secs:.1}s)");
                failed.push(n);
            }
        }
    }
    let blocking: Vec<usize> = failed
        .iter()
        .copied()
        .filter(|n| strict || !statistical.contains(n))
        .collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if !blocking.is_empty() {
        std::process::exit(1);
    }
}
