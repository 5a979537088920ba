//! Accuracy, equal error rate, integrated gradients and the complementarity
//! score between attribution maps.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::TrialList;
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp};

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate over thresholds drawn from the sorted unique scores and
/// the midpoints between neighbours.
///
/// At threshold `t`, FAR is the fraction of impostor scores `>= t` and FRR the
/// fraction of genuine scores `< t`. The threshold minimizing `|FAR - FRR|`
/// is chosen (lowest threshold on ties) and the EER is `(FAR + FRR) / 2` there.
pub fn eer(scores: &[f64], genuine: &[bool]) -> Result<EerResult> {
    if scores.len() != genuine.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            genuine.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "eer",
            index: i,
            detail: "NaN score".into(),
        });
    }
    let n_gen = genuine.iter().filter(|&&g| g).count();
    let n_imp = genuine.len() - n_gen;
    if n_gen == 0 || n_imp == 0 {
        return Err(Error::contract("eer needs both genuine and impostor scores"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // counts strictly below the current candidate
    let mut gen_below = 0usize;
    let mut imp_below = 0usize;
    let mut best: Option<(f64, f64, f64)> = None; // (gap, eer, threshold)
    let mut consider = |t: f64, gen_below: usize, imp_below: usize| {
        let far = (n_imp - imp_below) as f64 / n_imp as f64;
        let frr = gen_below as f64 / n_gen as f64;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0, t));
        }
    };
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        consider(value, gen_below, imp_below);
        while i < order.len() && scores[order[i]] == value {
            if genuine[order[i]] {
                gen_below += 1;
            } else {
                imp_below += 1;
            }
            i += 1;
        }
        if i < order.len() {
            consider((value + scores[order[i]]) / 2.0, gen_below, imp_below);
        }
    }
    let (_, eer, threshold) = best.expect("at least one candidate");
    Ok(EerResult { eer, threshold })
}

/// Cosine score of every trial from row-normalized embeddings indexed by
/// dataset row.
pub fn trial_scores(embeddings: &Tensor, trials: &TrialList) -> Result<Vec<f64>> {
    trials.validate(embeddings.rows())?;
    Ok(trials
        .trials
        .iter()
        .map(|t| cosine(embeddings.row(t.enroll), embeddings.row(t.test)))
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Scalar model output that integrated gradients explains.
#[derive(Clone, Debug, PartialEq)]
pub enum Selector {
    /// Logit of a class (classifier heads).
    ClassLogit(usize),
    /// Cosine between the unit embedding and a fixed reference (embedding heads).
    CosineTo(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub model_id: String,
    pub sample_id: usize,
    pub baseline_id: String,
    pub steps: usize,
    pub values: Vec<f64>,
    /// `|Σ IG_i - (f(x) - f(x₀))|`.
    pub completeness_gap: f64,
    /// `f(x) - f(x₀)`.
    pub output_delta: f64,
}

/// Evaluate the selected scalar for each row of `batch`.
fn selected(tape: &mut Tape, model: &Mlp, batch: &Tensor, selector: &Selector) -> Result<Tensor> {
    let out = model.forward(tape, model.params(), batch)?.task_out;
    match (selector, &model.spec().head) {
        (Selector::ClassLogit(c), Head::Classifier { num_classes }) => {
            if c >= num_classes {
                return Err(Error::contract(format!("class {c} outside [0, {num_classes})")));
            }
            tape.pick(&out, &vec![*c; batch.rows()])
        }
        (Selector::CosineTo(reference), Head::Embedding { .. }) => {
            if reference.len() != out.cols() {
                return Err(Error::contract(format!(
                    "reference of width {} for embeddings of width {}",
                    reference.len(),
                    out.cols()
                )));
            }
            let norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let unit = Tensor::matrix(reference.len(), 1, reference.iter().map(|x| x / norm).collect())?;
            tape.matmul(&out, &unit)
        }
        _ => Err(Error::contract("selector does not match the model head")),
    }
}

/// Integrated gradients with a right-endpoint Riemann sum over `steps`
/// points; all interpolation points go through the model as one batch.
pub fn integrated_gradients(
    model: &Mlp,
    selector: &Selector,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    let d = model.spec().input_dim;
    if x.len() != d || baseline.len() != d {
        return Err(Error::contract(format!(
            "input of width {} and baseline of width {} for a model with input_dim {d}",
            x.len(),
            baseline.len()
        )));
    }
    if steps == 0 {
        return Err(Error::contract("integrated gradients needs at least one step"));
    }
    let mut path = Vec::with_capacity(steps * d);
    for s in 1..=steps {
        let alpha = s as f64 / steps as f64;
        path.extend(x.iter().zip(baseline).map(|(xi, bi)| bi + alpha * (xi - bi)));
    }
    let mut tape = Tape::new();
    let inputs = tape.param(&Tensor::matrix(steps, d, path)?);
    let f = selected(&mut tape, model, &inputs, selector)?;
    let total = tape.sum(&f)?;
    let grads = tape.backward(&total)?;
    let g = grads.wrt(&inputs)?;
    let mut values = vec![0.0; d];
    for row in g.data().chunks_exact(d) {
        values.iter_mut().zip(row).for_each(|(v, r)| *v += r);
    }
    for ((v, xi), bi) in values.iter_mut().zip(x).zip(baseline) {
        *v *= (xi - bi) / steps as f64;
    }

    let mut ends = Vec::with_capacity(2 * d);
    ends.extend_from_slice(x);
    ends.extend_from_slice(baseline);
    let mut tape = Tape::new();
    let f_ends = selected(&mut tape, model, &Tensor::matrix(2, d, ends)?, selector)?;
    let delta = f_ends.data()[0] - f_ends.data()[1];
    let gap = (values.iter().sum::<f64>() - delta).abs();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "integrated_gradients",
            index: values.iter().position(|v| !v.is_finite()).unwrap_or(0),
            detail: "non-finite attribution".into(),
        });
    }
    Ok((values, gap, delta))
}

/// Attribution maps for dataset rows `rows`, explaining each row's own label
/// (classifiers) or its cosine to `references[row]` (embedding models).
pub fn attribute_rows(
    model: &Mlp,
    model_id: &str,
    data: &crate::data::Dataset,
    rows: &[usize],
    baseline: &[f64],
    steps: usize,
    references: Option<&Tensor>,
) -> Result<Vec<AttributionMap>> {
    rows.iter()
        .map(|&r| {
            let selector = match (&model.spec().head, references) {
                (Head::Embedding { .. }, Some(refs)) => Selector::CosineTo(refs.row(r).to_vec()),
                (Head::Embedding { .. }, None) => {
                    return Err(Error::contract("embedding attribution needs reference embeddings"))
                }
                (Head::Classifier { .. }, _) => Selector::ClassLogit(data.labels[r]),
            };
            let (values, gap, delta) = integrated_gradients(model, &selector, data.row(r), baseline, steps)?;
            Ok(AttributionMap {
                model_id: model_id.to_string(),
                sample_id: r,
                baseline_id: "feature_mean".into(),
                steps,
                values,
                completeness_gap: gap,
                output_delta: delta,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complementarity {
    /// Mean cosine between absolute attribution vectors; lower means the
    /// models rely on different features.
    pub score: f64,
    pub compared: usize,
    pub skipped: usize,
}

pub fn complementarity_score(a: &[AttributionMap], b: &[AttributionMap]) -> Result<Complementarity> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("{} maps against {} maps", a.len(), b.len())));
    }
    let mut total = 0.0;
    let mut compared = 0;
    let mut skipped = 0;
    for (p, q) in a.iter().zip(b) {
        if p.sample_id != q.sample_id || p.baseline_id != q.baseline_id || p.values.len() != q.values.len() {
            return Err(Error::contract(format!(
                "maps for sample {} / {} are not comparable",
                p.sample_id, q.sample_id
            )));
        }
        let dot: f64 = p.values.iter().zip(&q.values).map(|(x, y)| x.abs() * y.abs()).sum();
        let np = p.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nq = q.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if np == 0.0 || nq == 0.0 {
            skipped += 1;
            continue;
        }
        total += dot / (np * nq);
        compared += 1;
    }
    if compared == 0 {
        return Err(Error::contract("every attribution pair was all-zero"));
    }
    Ok(Complementarity {
        score: total / compared as f64,
        compared,
        skipped,
    })
}

/// CSV with header `sample_id,model_id,feature_0..feature_{d-1},completeness_gap`.
pub fn encode_attributions(maps: &[AttributionMap]) -> Vec<u8> {
    let d = maps.first().map_or(0, |m| m.values.len());
    let mut out = Vec::new();
    out.extend_from_slice(b"sample_id,model_id");
    for j in 0..d {
        let _ = write!(out, ",feature_{j}");
    }
    out.extend_from_slice(b",completeness_gap\n");
    for m in maps {
        let _ = write!(out, "{},{}", m.sample_id, m.model_id);
        for v in &m.values {
            let _ = write!(out, ",{v:.16e}");
        }
        let _ = writeln!(out, ",{:.16e}", m.completeness_gap);
    }
    out
}

pub fn write_attributions(path: &Path, maps: &[AttributionMap]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_attributions(maps)).map_err(|e| Error::io(path, e))
}
