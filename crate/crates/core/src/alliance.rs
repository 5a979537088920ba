//! Plain and alliance training.
//!
//! Alliance training descends
//! `L_t + (λ/K)·Σ_k adv_loss(d_k(grl(z')), v_k, T)` where `z'` is the alliance
//! representation, `grl` the gradient-reversal primitive, `d_k` a trainable
//! projection and `v_k` the representation of frozen model `k`. One optimizer
//! updates the alliance model and the projections together; the reversal
//! makes the projections minimize the KL while the alliance model maximizes it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, TrialList};
use crate::error::{Error, Result};
use crate::losses::{adv_loss, aam_softmax, cross_entropy, AamParams};
use crate::metrics::{eer, top1_accuracy, trial_scores};
use crate::nn::{dense, glorot, Head, Mlp, ModelSpec, OptimizerKind, OptimizerState};
use crate::rng::{subseed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub aam: AamParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerKind::default(),
            aam: AamParams::default(),
        }
    }
}

/// Projection MLP shape: `depth` dense layers, all hidden ones `hidden` wide
/// (default: the larger of the two representation widths).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "two")]
    pub depth: usize,
}

fn two() -> usize {
    2
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        ProjectionSpec { hidden: None, depth: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcorlConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub projection: ProjectionSpec,
}

fn one() -> f64 {
    1.0
}

impl Default for AcorlConfig {
    fn default() -> Self {
        AcorlConfig {
            lambda: 1.0,
            temperature: 1.0,
            projection: ProjectionSpec::default(),
        }
    }
}

impl AcorlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.projection.depth == 0 || self.projection.hidden == Some(0) {
            return Err(Error::config("projection needs depth >= 1 and a positive hidden width"));
        }
        Ok(())
    }
}

/// Trainable map from the alliance representation to a frozen model's
/// representation space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(weight, bias)` per layer.
    params: Vec<Tensor>,
}

impl Projection {
    pub fn init(input: usize, output: usize, spec: ProjectionSpec, seed: u64) -> Self {
        let hidden = spec.hidden.unwrap_or(input.max(output));
        let mut rng = Rng::new(seed);
        let mut params = Vec::with_capacity(2 * spec.depth);
        let mut fan_in = input;
        for layer in 0..spec.depth {
            let fan_out = if layer + 1 == spec.depth { output } else { hidden };
            params.push(glorot(&mut rng, fan_in, fan_out));
            params.push(Tensor::zeros(&[fan_out]));
            fan_in = fan_out;
        }
        Projection { params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn output_dim(&self) -> usize {
        self.params.last().map_or(0, Tensor::numel)
    }

    pub fn input_dim(&self) -> usize {
        self.params.first().map_or(0, |w| w.shape()[0])
    }

    /// Relu between layers, linear output.
    pub fn forward(&self, tape: &mut Tape, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let layers = params.len() / 2;
        let mut h = x.clone();
        for layer in 0..layers {
            h = dense(tape, &h, &params[2 * layer], &params[2 * layer + 1], layer + 1 < layers)?;
        }
        Ok(h)
    }
}

/// Task loss of `model` on a batch: cross-entropy for classifiers,
/// AAM-softmax for embedding heads.
pub fn task_loss(
    tape: &mut Tape,
    model: &Mlp,
    params: &[Tensor],
    batch: &Tensor,
    labels: &[usize],
    aam: AamParams,
) -> Result<(Tensor, Tensor)> {
    let out = model.forward(tape, params, batch)?;
    let loss = match model.spec().head {
        Head::Classifier { .. } => cross_entropy(tape, &out.task_out, labels)?,
        Head::Embedding { .. } => {
            let w = model.class_weights(params).expect("embedding head has class weights");
            aam_softmax(tape, &out.representation, w, labels, aam)?
        }
    };
    Ok((loss, out.representation))
}

#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: Tensor,
    pub task: f64,
    pub adv: Vec<f64>,
}

/// `L_t + (λ/K)·Σ_k adv_loss(d_k(grl(z')), v_k, T)`; the adversarial term
/// is dropped when there are no frozen models.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    model: &Mlp,
    model_params: &[Tensor],
    projections: &[(&Projection, &[Tensor])],
    frozen: &[&Mlp],
    batch: &Tensor,
    labels: &[usize],
    cfg: &AcorlConfig,
    aam: AamParams,
) -> Result<CombinedLoss> {
    if projections.len() != frozen.len() {
        return Err(Error::contract(format!(
            "{} projections for {} frozen models",
            projections.len(),
            frozen.len()
        )));
    }
    let (task, z) = task_loss(tape, model, model_params, batch, labels, aam)?;
    let task_value = task.item();
    if frozen.is_empty() {
        return Ok(CombinedLoss {
            total: task,
            task: task_value,
            adv: Vec::new(),
        });
    }
    let reversed = tape.grad_reverse(&z, 1.0)?;
    let mut adv_values = Vec::with_capacity(frozen.len());
    let mut adv_sum: Option<Tensor> = None;
    for ((projection, params), m) in projections.iter().zip(frozen) {
        let v = m.predict(batch)?.representation;
        let z_k = projection.forward(tape, params, &reversed)?;
        if z_k.shape() != v.shape() {
            return Err(Error::contract(format!(
                "projection output {:?} does not match frozen representation {:?}",
                z_k.shape(),
                v.shape()
            )));
        }
        let l = adv_loss(tape, &z_k, &v, cfg.temperature)?;
        adv_values.push(l.item());
        adv_sum = Some(match adv_sum {
            None => l,
            Some(acc) => tape.add(&acc, &l)?,
        });
    }
    let weighted = tape.scale(&adv_sum.expect("K >= 1"), cfg.lambda / frozen.len() as f64)?;
    let total = tape.add(&task, &weighted)?;
    Ok(CombinedLoss {
        total,
        task: task_value,
        adv: adv_values,
    })
}

/// Held-out rows used for the per-epoch eval metric: accuracy for
/// classifiers, EER over `trials` for embedding models.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub rows: Vec<usize>,
    /// Trial ids are positions within `rows`.
    pub trials: Option<TrialList>,
}

impl EvalSet {
    pub fn evaluate(&self, model: &Mlp, data: &Dataset) -> Result<Option<f64>> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let out = model.predict(&data.batch(&self.rows))?;
        match (&model.spec().head, &self.trials) {
            (Head::Classifier { .. }, _) => Ok(Some(top1_accuracy(&out.task_out, &data.labels_of(&self.rows))?)),
            (Head::Embedding { .. }, Some(trials)) => {
                let scores = trial_scores(&out.task_out, trials)?;
                Ok(Some(eer(&scores, &trials.genuine_mask())?.eer))
            }
            (Head::Embedding { .. }, None) => Ok(None),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L_adv_mean")]
    pub l_adv_mean: Option<f64>,
    pub eval_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Mlp,
    pub metrics: Vec<EpochMetrics>,
    /// Model state after each epoch listed in `snapshot_epochs`.
    pub snapshots: Vec<(usize, Mlp)>,
}

/// Minibatch training of `spec` on `train_rows` with the task loss only.
#[allow(clippy::too_many_arguments)]
pub fn train_plain(
    spec: &ModelSpec,
    data: &Dataset,
    train_rows: &[usize],
    eval: &EvalSet,
    opts: &TrainOptions,
    seed: u64,
    snapshot_epochs: &[usize],
) -> Result<TrainRun> {
    train_alliance(spec, data, train_rows, eval, opts, &AcorlConfig::default(), &[], seed, snapshot_epochs)
}

/// Alliance training against `frozen` models (none degenerates to plain
/// training). Randomness comes from `seed` through named components, so the
/// alliance model and batch order match [`train_plain`] under the same seed.
#[allow(clippy::too_many_arguments)]
pub fn train_alliance(
    spec: &ModelSpec,
    data: &Dataset,
    train_rows: &[usize],
    eval: &EvalSet,
    opts: &TrainOptions,
    cfg: &AcorlConfig,
    frozen: &[Mlp],
    seed: u64,
    snapshot_epochs: &[usize],
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_rows.is_empty() {
        return Err(Error::contract("training needs at least one row"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if spec.input_dim != data.dim {
        return Err(Error::contract(format!(
            "model input_dim {} does not match dataset width {}",
            spec.input_dim, data.dim
        )));
    }
    let classes = spec.head.num_classes();
    if let Some(&y) = train_rows.iter().map(|&r| &data.labels[r]).find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {y} does not fit a head with {classes} classes")));
    }
    for (k, m) in frozen.iter().enumerate() {
        if m.spec().input_dim != data.dim {
            return Err(Error::contract(format!(
                "frozen model {k} expects input_dim {} but the dataset has {}",
                m.spec().input_dim,
                data.dim
            )));
        }
    }
    let fingerprints: Vec<String> = frozen.iter().map(Mlp::fingerprint).collect();

    let mut model = Mlp::init(spec.clone(), subseed(seed, "model.init"))?;
    let mut projections: Vec<Projection> = frozen
        .iter()
        .enumerate()
        .map(|(k, m)| {
            Projection::init(
                spec.repr_dim,
                m.spec().repr_dim,
                cfg.projection,
                subseed(seed, &format!("projection.{k}")),
            )
        })
        .collect();
    let frozen_refs: Vec<&Mlp> = frozen.iter().collect();

    let mut all_params: Vec<Tensor> = model.params().to_vec();
    for p in &projections {
        all_params.extend(p.params().iter().cloned());
    }
    let mut optimizer = OptimizerState::new(opts.optimizer, &all_params);
    let mut batch_rng = Rng::for_component(seed, "batches");
    let mut order = train_rows.to_vec();
    let mut metrics = Vec::with_capacity(opts.epochs);
    let mut snapshots = Vec::new();
    if snapshot_epochs.contains(&0) {
        snapshots.push((0, model.clone()));
    }

    for epoch in 1..=opts.epochs {
        batch_rng.shuffle(&mut order);
        let mut task_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch = data.batch(chunk);
            let labels = data.labels_of(chunk);
            let mut tape = Tape::new();
            let model_params = model.bind(&mut tape);
            let proj_params: Vec<Vec<Tensor>> = projections.iter().map(|p| {
                p.params().iter().map(|t| tape.param(t)).collect()
            }).collect();
            let pairs: Vec<(&Projection, &[Tensor])> =
                projections.iter().zip(&proj_params).map(|(p, ps)| (p, ps.as_slice())).collect();
            let loss = combined_loss(
                &mut tape,
                &model,
                &model_params,
                &pairs,
                &frozen_refs,
                &batch,
                &labels,
                cfg,
                opts.aam,
            )?;
            let grads = tape.backward(&loss.total)?;
            let mut grad_refs = Vec::with_capacity(all_params.len());
            for p in model_params.iter().chain(proj_params.iter().flatten()) {
                grad_refs.push(grads.wrt(p)?);
            }
            let mut current: Vec<Tensor> = model.params().to_vec();
            for p in &projections {
                current.extend(p.params().iter().cloned());
            }
            optimizer.step(&mut current, &grad_refs)?;
            let mut it = current.into_iter();
            for slot in model.params_mut() {
                *slot = it.next().expect("parameter count");
            }
            for p in &mut projections {
                for slot in p.params.iter_mut() {
                    *slot = it.next().expect("parameter count");
                }
            }
            task_sum += loss.task;
            if !loss.adv.is_empty() {
                adv_sum += loss.adv.iter().sum::<f64>() / loss.adv.len() as f64;
            }
            batches += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            l_t: task_sum / batches as f64,
            l_adv_mean: (!frozen.is_empty()).then(|| adv_sum / batches as f64),
            eval_metric: eval.evaluate(&model, data)?,
        });
        if snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, model.clone()));
        }
    }

    for (k, (m, before)) in frozen.iter().zip(&fingerprints).enumerate() {
        if &m.fingerprint() != before {
            return Err(Error::contract(format!("frozen model {k} changed during training")));
        }
    }
    Ok(TrainRun {
        model,
        metrics,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_complementary_classes, ComplementaryCueSpec, CueGroup};

    fn blobs() -> Dataset {
        let spec = ComplementaryCueSpec {
            num_classes: 2,
            samples_per_class: 100,
            groups: vec![CueGroup { dims: 3, separation: 8.0 }],
            noise_dims: 1,
            noise_sigma: 1.0,
            seed: 5,
        };
        gen_complementary_classes(&spec).unwrap().0
    }

    fn opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: 16,
            optimizer: OptimizerKind::Adam {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            aam: AamParams::default(),
        }
    }

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs();
        let rows: Vec<usize> = (0..data.len()).collect();
        let spec = ModelSpec::classifier(4, vec![8], 2);
        let eval = EvalSet { rows: rows.clone(), trials: None };
        let run = train_plain(&spec, &data, &rows, &eval, &opts(30), 1, &[]).unwrap();
        assert!(run.metrics.last().unwrap().eval_metric.unwrap() >= 0.99);
        let again = train_plain(&spec, &data, &rows, &eval, &opts(30), 1, &[]).unwrap();
        assert_eq!(run.model, again.model);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = blobs();
        let rows: Vec<usize> = (0..data.len()).collect();
        let spec = ModelSpec::classifier(4, vec![8], 2);
        let run = train_plain(&spec, &data, &rows, &EvalSet::default(), &opts(0), 3, &[]).unwrap();
        assert_eq!(run.model, Mlp::init(spec, subseed(3, "model.init")).unwrap());
        assert!(train_plain(&ModelSpec::classifier(4, vec![8], 2), &data, &[], &EvalSet::default(), &opts(1), 3, &[]).is_err());
    }

    #[test]
    fn lambda_zero_matches_plain_training_bitwise() {
        let data = blobs();
        let rows: Vec<usize> = (0..data.len()).collect();
        let spec = ModelSpec::classifier(4, vec![8, 6], 2);
        let frozen = train_plain(&spec, &data, &rows, &EvalSet::default(), &opts(2), 10, &[]).unwrap().model;
        let cfg = AcorlConfig { lambda: 0.0, ..AcorlConfig::default() };
        let plain = train_plain(&spec, &data, &rows, &EvalSet::default(), &opts(5), 4, &[1, 5]).unwrap();
        let ally = train_alliance(&spec, &data, &rows, &EvalSet::default(), &opts(5), &cfg, &[frozen], 4, &[1, 5]).unwrap();
        assert_eq!(plain.snapshots, ally.snapshots);
        let bits = |m: &Mlp| m.params().iter().flat_map(|p| p.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&plain.model), bits(&ally.model));
        assert!(ally.metrics[0].l_adv_mean.unwrap() >= 0.0);
    }

    fn setup(seed: u64) -> (Mlp, Projection, Mlp, Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let model = Mlp::init(ModelSpec::classifier(4, vec![5], 3), seed).unwrap();
        let frozen = Mlp::init(ModelSpec::classifier(4, vec![6], 3), seed + 1).unwrap();
        let projection = Projection::init(5, 6, ProjectionSpec::default(), seed + 2);
        let batch = random(&mut rng, 7, 4);
        let labels = (0..7).map(|i| i % 3).collect();
        (model, projection, frozen, batch, labels)
    }

    #[test]
    fn total_recomposes_from_components() {
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let (model, projection, frozen, batch, labels) = setup(1);
            let cfg = AcorlConfig { lambda, temperature: 0.7, ..AcorlConfig::default() };
            let mut tape = Tape::new();
            let mp = model.bind(&mut tape);
            let pp: Vec<Tensor> = projection.params().iter().map(|t| tape.param(t)).collect();
            let out = combined_loss(&mut tape, &model, &mp, &[(&projection, &pp)], &[&frozen, &frozen][..1], &batch, &labels, &cfg, AamParams::default()).unwrap();
            let expected = out.task + lambda * out.adv[0];
            assert!((out.total.item() - expected).abs() < 1e-10);
            if lambda == 0.0 {
                assert!((out.total.item() - out.task).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matched_projection_gives_zero_adversarial_term() {
        // identity projection onto a frozen copy of the alliance model
        let (model, _, _, batch, labels) = setup(2);
        let frozen = model.clone();
        let eye: Vec<f64> = (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect();
        let projection = Projection {
            params: vec![Tensor::matrix(5, 5, eye).unwrap(), Tensor::zeros(&[5])],
        };
        let mut tape = Tape::new();
        let mp = model.bind(&mut tape);
        let pp: Vec<Tensor> = projection.params().iter().map(|t| tape.param(t)).collect();
        let out = combined_loss(&mut tape, &model, &mp, &[(&projection, &pp)], &[&frozen], &batch, &labels, &AcorlConfig::default(), AamParams::default()).unwrap();
        assert!(out.adv[0].abs() < 1e-12);
        assert!((out.total.item() - out.task).abs() < 1e-12);
    }

    #[test]
    fn gradients_route_through_the_reversal() {
        let lambda = 1.5;
        let (model, projection, frozen, batch, labels) = setup(3);
        let cfg = AcorlConfig { lambda, temperature: 1.0, ..AcorlConfig::default() };
        let mut tape = Tape::new();
        let mp = model.bind(&mut tape);
        let pp: Vec<Tensor> = projection.params().iter().map(|t| tape.param(t)).collect();
        let out = combined_loss(&mut tape, &model, &mp, &[(&projection, &pp)], &[&frozen], &batch, &labels, &cfg, AamParams::default()).unwrap();
        let g_total = tape.backward(&out.total).unwrap();

        // the same objective pieces without the reversal
        let mut tape = Tape::new();
        let mp2 = model.bind(&mut tape);
        let pp2: Vec<Tensor> = projection.params().iter().map(|t| tape.param(t)).collect();
        let (task, z) = task_loss(&mut tape, &model, &mp2, &batch, &labels, AamParams::default()).unwrap();
        let v = frozen.predict(&batch).unwrap().representation;
        let zk = projection.forward(&mut tape, &pp2, &z).unwrap();
        let adv = adv_loss(&mut tape, &zk, &v, 1.0).unwrap();
        let g_task = tape.backward(&task).unwrap();
        let g_adv = tape.backward(&adv).unwrap();
        for (p, p2) in mp.iter().zip(&mp2) {
            let total = g_total.wrt(p).unwrap().data();
            let t = g_task.wrt(p2).unwrap().data();
            let a = g_adv.wrt(p2).unwrap().data();
            for i in 0..total.len() {
                assert!((total[i] - (t[i] - lambda * a[i])).abs() < 1e-8);
            }
        }
        for (p, p2) in pp.iter().zip(&pp2) {
            let total = g_total.wrt(p).unwrap().data();
            let a = g_adv.wrt(p2).unwrap().data();
            for i in 0..total.len() {
                assert!((total[i] - lambda * a[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn adversarial_updates_have_the_right_sign() {
        let lr = 1e-3;
        for seed in 0..5 {
            let (model, projection, frozen, batch, _) = setup(10 + seed);
            let adv_of = |m: &Mlp, p: &Projection| -> f64 {
                let mut tape = Tape::new();
                let z = m.predict(&batch).unwrap().representation;
                let zk = p.forward(&mut tape, p.params(), &z).unwrap();
                adv_loss(&mut tape, &zk, &frozen.predict(&batch).unwrap().representation, 1.0).unwrap().item()
            };
            let before = adv_of(&model, &projection);
            // adversarial term only: reversal sits before the projection
            let mut tape = Tape::new();
            let mp = model.bind(&mut tape);
            let pp: Vec<Tensor> = projection.params().iter().map(|t| tape.param(t)).collect();
            let z = model.forward(&mut tape, &mp, &batch).unwrap().representation;
            let r = tape.grad_reverse(&z, 1.0).unwrap();
            let zk = projection.forward(&mut tape, &pp, &r).unwrap();
            let v = frozen.predict(&batch).unwrap().representation;
            let adv = adv_loss(&mut tape, &zk, &v, 1.0).unwrap();
            let grads = tape.backward(&adv).unwrap();

            let mut ally = model.clone();
            for (slot, p) in ally.params_mut().iter_mut().zip(&mp) {
                let g = grads.wrt(p).unwrap();
                slot.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x -= lr * g);
            }
            assert!(adv_of(&ally, &projection) >= before, "alliance step lowered L_adv");

            let mut proj = projection.clone();
            for (slot, p) in proj.params.iter_mut().zip(&pp) {
                let g = grads.wrt(p).unwrap();
                slot.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x -= lr * g);
            }
            assert!(adv_of(&model, &proj) <= before, "projection step raised L_adv");
        }
    }

    #[test]
    fn frozen_input_mismatch_is_a_contract_error() {
        let data = blobs();
        let rows: Vec<usize> = (0..data.len()).collect();
        let frozen = Mlp::init(ModelSpec::classifier(3, vec![4], 2), 0).unwrap();
        let r = train_alliance(&ModelSpec::classifier(4, vec![8], 2), &data, &rows, &EvalSet::default(), &opts(1), &AcorlConfig::default(), &[frozen], 0, &[]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
