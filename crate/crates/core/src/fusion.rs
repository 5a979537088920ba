//! Multi-model fusion: a trained head over concatenated member
//! representations (late fusion), or a combination of member outputs
//! (weighted class probabilities, logistic regression on verification scores).

use serde::{Deserialize, Serialize};

use crate::alliance::{train_plain, EvalSet, TrainOptions, TrainRun};
use crate::autodiff::{softmax_rows_values, Tensor};
use crate::checkpoint::{Container, FusionMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::top1_accuracy;
use crate::nn::{Head, Mlp, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateFusionOptions {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of hidden layers; 2 gives input → 512 → 512 → output.
    #[serde(default = "default_layers")]
    pub late_hidden_layers: usize,
    /// Largest accepted concatenated representation width.
    #[serde(default = "default_max_input")]
    pub max_input_dim: usize,
    #[serde(default)]
    pub train: TrainOptions,
}

fn default_hidden() -> usize {
    512
}
fn default_layers() -> usize {
    2
}
fn default_max_input() -> usize {
    4096
}

impl Default for LateFusionOptions {
    fn default() -> Self {
        LateFusionOptions {
            hidden: 512,
            late_hidden_layers: 2,
            max_input_dim: 4096,
            train: TrainOptions::default(),
        }
    }
}

fn check_members(members: &[Mlp]) -> Result<&Mlp> {
    let first = members.first().ok_or_else(|| Error::contract("fusion needs at least one member"))?;
    for (i, m) in members.iter().enumerate() {
        let (a, b) = (m.spec(), first.spec());
        if a.input_dim != b.input_dim || a.head.num_classes() != b.head.num_classes() || a.head.name() != b.head.name() {
            return Err(Error::contract(format!("member {i} is incompatible with member 0")));
        }
    }
    Ok(first)
}

/// Concatenated member representations of every dataset row, as a new
/// dataset with the same labels.
pub fn representation_dataset(members: &[Mlp], data: &Dataset) -> Result<Dataset> {
    check_members(members)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&all);
    let reprs = members
        .iter()
        .map(|m| m.predict(&batch).map(|o| o.representation))
        .collect::<Result<Vec<_>>>()?;
    let width: usize = reprs.iter().map(Tensor::cols).sum();
    let mut features = Vec::with_capacity(data.len() * width);
    for i in 0..data.len() {
        for r in &reprs {
            features.extend_from_slice(r.row(i));
        }
    }
    let mut out = Dataset::new(features, data.labels.clone(), width)?;
    out.num_classes = data.num_classes;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LateFusion {
    pub head: Mlp,
}

impl LateFusion {
    /// Head output (logits or unit embeddings) for `rows` of `data`.
    pub fn predict(&self, members: &[Mlp], data: &Dataset, rows: &[usize]) -> Result<Tensor> {
        let reprs = representation_dataset(members, &data.subset(rows))?;
        let all: Vec<usize> = (0..reprs.len()).collect();
        Ok(self.head.predict(&reprs.batch(&all))?.task_out)
    }
}

/// Train a fusion head over the concatenated representations of frozen
/// `members`. `eval` rows index into `data`.
pub fn train_late_fusion(
    members: &[Mlp],
    data: &Dataset,
    train_rows: &[usize],
    eval: &EvalSet,
    opts: &LateFusionOptions,
    seed: u64,
) -> Result<(LateFusion, TrainRun)> {
    let first = check_members(members)?;
    let width: usize = members.iter().map(|m| m.spec().repr_dim).sum();
    if width > opts.max_input_dim {
        return Err(Error::config(format!(
            "concatenated representation width {width} exceeds max_input_dim {}",
            opts.max_input_dim
        )));
    }
    if opts.hidden == 0 {
        return Err(Error::config("late fusion hidden width must be positive"));
    }
    let before: Vec<String> = members.iter().map(Mlp::fingerprint).collect();
    let reprs = representation_dataset(members, data)?;
    let hidden = vec![opts.hidden; opts.late_hidden_layers];
    let classes = first.spec().head.num_classes();
    let spec = match first.spec().head {
        Head::Classifier { .. } => ModelSpec::classifier(width, hidden, classes),
        Head::Embedding { .. } => ModelSpec::embedding(width, hidden, classes),
    };
    let run = train_plain(&spec, &reprs, train_rows, eval, &opts.train, seed, &[])?;
    if members.iter().map(Mlp::fingerprint).ne(before) {
        return Err(Error::contract("a fusion member changed during late-fusion training"));
    }
    Ok((LateFusion { head: run.model.clone() }, run))
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= -1e-9)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("fusion weights {w:?} are not on the simplex")));
    }
    Ok(())
}

/// `Σ_m w_m · softmax_rows(logits_m)`.
pub fn output_fuse_weighted(member_logits: &[Tensor], w: &[f64]) -> Result<Tensor> {
    if member_logits.is_empty() || member_logits.len() != w.len() {
        return Err(Error::contract(format!(
            "{} weights for {} members",
            w.len(),
            member_logits.len()
        )));
    }
    check_simplex(w)?;
    let shape = member_logits[0].shape().to_vec();
    if shape.len() != 2 || member_logits.iter().any(|l| l.shape() != shape.as_slice()) {
        return Err(Error::contract("member logits must share one B×C shape"));
    }
    let mut fused = vec![0.0; member_logits[0].numel()];
    for (logits, &wm) in member_logits.iter().zip(w) {
        let probs = softmax_rows_values(logits.data(), shape[1]);
        fused.iter_mut().zip(&probs).for_each(|(f, p)| *f += wm * p);
    }
    Tensor::new(shape, fused)
}

/// Every weight vector of `m` entries that are multiples of `1/steps` and sum
/// to one, in lexicographic order of the integer counts.
pub fn simplex_grid(m: usize, steps: usize) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<usize>, left: usize, slots: usize, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(prefix, left - k, slots - 1, out);
            prefix.pop();
        }
    }
    if m == 0 {
        return Vec::new();
    }
    let mut counts = Vec::new();
    fill(&mut Vec::with_capacity(m), steps, m, &mut counts);
    counts
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / steps as f64).collect())
        .collect()
}

/// Grid resolution of the weight search (0.05).
pub const WEIGHT_GRID_STEPS: usize = 20;

/// Weights on the 0.05 simplex grid maximizing top-1 accuracy on the given
/// (held-out) logits; ties go to the vector closest to uniform, then to the
/// first in grid order.
pub fn fit_output_weights(member_logits: &[Tensor], labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    let m = member_logits.len();
    let uniform = 1.0 / m.max(1) as f64;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for w in simplex_grid(m, WEIGHT_GRID_STEPS) {
        let acc = top1_accuracy(&output_fuse_weighted(member_logits, &w)?, labels)?;
        let dist: f64 = w.iter().map(|x| (x - uniform).powi(2)).sum();
        let better = match &best {
            None => true,
            Some((a, d, _)) => acc > *a || (acc == *a && dist < *d),
        };
        if better {
            best = Some((acc, dist, w));
        }
    }
    let (acc, _, w) = best.ok_or_else(|| Error::contract("fusion needs at least one member"))?;
    Ok((w, acc))
}

/// Logistic regression over per-member verification scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogReg {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogReg {
    pub fn score(&self, member_scores: &[f64]) -> f64 {
        sigmoid(self.beta.iter().zip(member_scores).map(|(b, s)| b * s).sum::<f64>() + self.intercept)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy and its gradient w.r.t. `(β, β₀)`.
fn bce(scores: &[Vec<f64>], labels: &[bool], theta: &[f64]) -> (f64, Vec<f64>) {
    let m = theta.len() - 1;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; m + 1];
    for (s, &y) in scores.iter().zip(labels) {
        let z: f64 = theta[..m].iter().zip(s).map(|(b, x)| b * x).sum::<f64>() + theta[m];
        // log(1 + e^z) - y·z, stable
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - if y { z } else { 0.0 };
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        grad[..m].iter_mut().zip(s).for_each(|(g, x)| *g += r * x);
        grad[m] += r;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

pub const LOGREG_TOLERANCE: f64 = 1e-8;
const LOGREG_MAX_ITERS: usize = 200_000;

/// Full-batch gradient descent with backtracking line search until the
/// gradient norm drops below [`LOGREG_TOLERANCE`].
pub fn fit_logreg(scores: &[Vec<f64>], labels: &[bool]) -> Result<LogReg> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::contract("logistic regression needs one label per score row"));
    }
    let m = scores[0].len();
    if m == 0 || scores.iter().any(|s| s.len() != m) {
        return Err(Error::contract("every trial needs the same number of member scores"));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::config("calibration trials contain a single class"));
    }
    let mut theta = vec![0.0; m + 1];
    let (mut loss, mut grad) = bce(scores, labels, &theta);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < LOGREG_MAX_ITERS {
        let norm2: f64 = grad.iter().map(|g| g * g).sum();
        if norm2.sqrt() < LOGREG_TOLERANCE {
            converged = true;
            break;
        }
        step *= 2.0;
        loop {
            let candidate: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (l, g) = bce(scores, labels, &candidate);
            if l <= loss - 0.5 * step * norm2 || step < 1e-12 {
                theta = candidate;
                loss = l;
                grad = g;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
    }
    Ok(LogReg {
        beta: theta[..m].to_vec(),
        intercept: theta[m],
        iterations,
        converged,
    })
}

/// Calibrated score `σ(β·s + β₀)` for every trial.
pub fn output_fuse_logreg(model: &LogReg, member_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if member_scores.iter().any(|s| s.len() != model.beta.len()) {
        return Err(Error::contract("score width does not match the fitted coefficients"));
    }
    Ok(member_scores.iter().map(|s| model.score(s)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionHead {
    Late(Mlp),
    OutputWeighted(Vec<f64>),
    OutputLogreg(LogReg),
}

impl FusionHead {
    pub fn mode(&self) -> &'static str {
        match self {
            FusionHead::Late(_) => "late",
            FusionHead::OutputWeighted(_) => "output_weighted",
            FusionHead::OutputLogreg(_) => "output_logreg",
        }
    }
}

/// Fusion head plus references (paths or ids) to its member checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBundle {
    pub members: Vec<String>,
    pub head: FusionHead,
}

impl FusionBundle {
    pub fn to_container(&self) -> Container {
        let fusion = Some(FusionMeta {
            mode: self.head.mode().into(),
            members: self.members.clone(),
        });
        let (spec, tensors) = match &self.head {
            FusionHead::Late(mlp) => (
                Some(mlp.spec().clone()),
                mlp.param_names().into_iter().zip(mlp.params().iter().cloned()).collect(),
            ),
            FusionHead::OutputWeighted(w) => (None, vec![("fusion.weights".into(), Tensor::vector(w.clone()))]),
            FusionHead::OutputLogreg(lr) => (
                None,
                vec![
                    ("fusion.beta".into(), Tensor::vector(lr.beta.clone())),
                    ("fusion.intercept".into(), Tensor::scalar(lr.intercept)),
                ],
            ),
        };
        Container {
            kind: "fusion".into(),
            spec,
            fusion,
            tensors,
        }
    }

    /// Inverse of [`FusionBundle::to_container`]. Stored weights are
    /// renormalized to sum to one after the 32-bit round trip.
    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.fusion.as_ref().ok_or_else(|| Error::Integrity {
            offset: 0,
            detail: "checkpoint carries no fusion table".into(),
        })?;
        let head = match meta.mode.as_str() {
            "late" => FusionHead::Late(c.to_model()?),
            "output_weighted" => {
                let w = c.tensor("fusion.weights")?.data();
                let sum: f64 = w.iter().sum();
                FusionHead::OutputWeighted(w.iter().map(|x| x / sum).collect())
            }
            "output_logreg" => FusionHead::OutputLogreg(LogReg {
                beta: c.tensor("fusion.beta")?.data().to_vec(),
                intercept: c.tensor("fusion.intercept")?.item(),
                iterations: 0,
                converged: true,
            }),
            other => {
                return Err(Error::Integrity {
                    offset: 0,
                    detail: format!("unknown fusion mode {other}"),
                })
            }
        };
        Ok(FusionBundle {
            members: meta.members.clone(),
            head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::eer;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    #[test]
    fn one_hot_weights_reproduce_the_member() {
        let mut rng = Rng::new(1);
        let logits = vec![random(&mut rng, 5, 3, 2.0), random(&mut rng, 5, 3, 2.0)];
        let fused = output_fuse_weighted(&logits, &[0.0, 1.0]).unwrap();
        let member = softmax_rows_values(logits[1].data(), 3);
        for (a, b) in fused.data().iter().zip(&member) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..5 {
            assert!((fused.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let same = vec![logits[0].clone(), logits[0].clone()];
        let fused = output_fuse_weighted(&same, &[0.3, 0.7]).unwrap();
        let member = softmax_rows_values(logits[0].data(), 3);
        assert!(fused.data().iter().zip(&member).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(output_fuse_weighted(&logits, &[0.5, 0.6]).is_err());
        assert!(output_fuse_weighted(&logits, &[-0.1, 1.1]).is_err());
    }

    #[test]
    fn grid_covers_the_simplex() {
        assert_eq!(simplex_grid(2, 20).len(), 21);
        assert_eq!(simplex_grid(3, 20).len(), 231);
        assert!(simplex_grid(3, 20).iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn weight_search_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let logits = vec![random(&mut rng, 30, 4, 1.5), random(&mut rng, 30, 4, 1.5)];
            let labels: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
            let (w, acc) = fit_output_weights(&logits, &labels).unwrap();
            // oracle: all 21 weightings, keep best accuracy then nearest to 0.5
            let mut best = (-1.0, f64::INFINITY, 0usize);
            for i in 0..=20usize {
                let wi = [i as f64 / 20.0, (20 - i) as f64 / 20.0];
                let mut correct = 0;
                for r in 0..30 {
                    let p0 = softmax_rows_values(logits[0].row(r), 4);
                    let p1 = softmax_rows_values(logits[1].row(r), 4);
                    let f: Vec<f64> = (0..4).map(|c| wi[0] * p0[c] + wi[1] * p1[c]).collect();
                    let mut arg = 0;
                    for c in 1..4 {
                        if f[c] > f[arg] {
                            arg = c;
                        }
                    }
                    correct += usize::from(arg == labels[r]);
                }
                let a = correct as f64 / 30.0;
                let d = (i as f64 - 10.0).abs();
                if a > best.0 || (a == best.0 && d < best.1) {
                    best = (a, d, i);
                }
            }
            assert_eq!(acc, best.0);
            assert_eq!(w[0], best.2 as f64 / 20.0, "seed {seed}");
        }
    }

    fn trials(rng: &mut Rng, n: usize, noise_member: bool) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let s1 = (if y { 0.4 } else { -0.2 } + 0.2 * rng.normal()).clamp(-1.0, 1.0);
            let mut row = vec![s1];
            if noise_member {
                row.push(rng.uniform_range(-1.0, 1.0));
            }
            scores.push(row);
            labels.push(y);
        }
        (scores, labels)
    }

    #[test]
    fn single_member_logreg_keeps_the_ranking() {
        let mut rng = Rng::new(2);
        let (scores, labels) = trials(&mut rng, 200, false);
        let lr = fit_logreg(&scores, &labels).unwrap();
        assert!(lr.converged && lr.beta[0] > 0.0);
        let raw: Vec<f64> = scores.iter().map(|s| s[0]).collect();
        let fused = output_fuse_logreg(&lr, &scores).unwrap();
        assert_eq!(eer(&raw, &labels).unwrap().eer, eer(&fused, &labels).unwrap().eer);
    }

    #[test]
    fn separated_calibration_gives_zero_eer() {
        let scores: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 0.6 + 0.005 * i as f64 } else { -0.6 + 0.005 * i as f64 }]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let lr = fit_logreg(&scores, &labels).unwrap();
        let fused = output_fuse_logreg(&lr, &scores).unwrap();
        assert_eq!(eer(&fused, &labels).unwrap().eer, 0.0);
        assert!(matches!(fit_logreg(&scores[..1], &labels[..1]), Err(Error::Config(_))));
    }

    #[test]
    fn noise_member_gets_the_smaller_coefficient() {
        let mut ratio = 0.0;
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let (scores, labels) = trials(&mut rng, 300, true);
            let lr = fit_logreg(&scores, &labels).unwrap();
            ratio += lr.beta[1].abs() / lr.beta[0].abs() / 5.0;
        }
        assert!(ratio < 1.0);
    }

    #[test]
    fn bundles_round_trip_through_the_container() {
        let bundle = FusionBundle {
            members: vec!["a.ckpt".into(), "b.ckpt".into()],
            head: FusionHead::OutputWeighted(vec![0.35, 0.65]),
        };
        let back = FusionBundle::from_container(&Container::decode(&bundle.to_container().encode()).unwrap()).unwrap();
        match back.head {
            FusionHead::OutputWeighted(w) => {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!((w[0] - 0.35).abs() < 1e-7);
            }
            other => panic!("{other:?}"),
        }
        let late = FusionBundle {
            members: vec!["a".into()],
            head: FusionHead::Late(Mlp::init(ModelSpec::classifier(6, vec![4], 3), 1).unwrap()),
        };
        let back = FusionBundle::from_container(&Container::decode(&late.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back.head.mode(), "late");
        assert_eq!(back.members, late.members);
    }
}
