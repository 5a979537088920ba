//! Task losses and the adversarial KL objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_values, Tape, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Additive angular margin (radians) and logit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamParams {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamParams {
    fn default() -> Self {
        AamParams { margin: 0.2, scale: 32.0 }
    }
}

impl AamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::contract(format!(
                "AAM-softmax needs margin >= 0 and scale > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {} at row {i} is outside [0, {classes})",
            labels[i]
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::contract("cross_entropy expects B×C logits"));
    }
    check_labels(labels, logits.rows(), logits.cols())?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(&log_probs, labels)?;
    let mean = tape.mean(&picked)?;
    tape.neg(&mean)
}

/// AAM-softmax: cross-entropy over `s·cos(θ_y + m)` for the labelled class and
/// `s·cos θ_j` elsewhere. Embeddings and class weights are L2-normalized here.
pub fn aam_softmax(
    tape: &mut Tape,
    embeddings: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    params: AamParams,
) -> Result<Tensor> {
    params.validate()?;
    if embeddings.shape().len() != 2 || class_weights.shape().len() != 2 {
        return Err(Error::contract("aam_softmax expects matrices"));
    }
    if embeddings.cols() != class_weights.cols() {
        return Err(Error::contract(format!(
            "embedding width {} differs from class-weight width {}",
            embeddings.cols(),
            class_weights.cols()
        )));
    }
    check_labels(labels, embeddings.rows(), class_weights.rows())?;
    let cosines = cosine_logits(tape, embeddings, class_weights)?;
    let margined = tape.angular_margin(&cosines, labels, params.margin)?;
    let logits = tape.scale(&margined, params.scale)?;
    cross_entropy(tape, &logits, labels)
}

/// `B × C` matrix of cosines between embedding rows and class-weight rows.
pub fn cosine_logits(tape: &mut Tape, embeddings: &Tensor, class_weights: &Tensor) -> Result<Tensor> {
    let e = tape.row_l2_normalize(embeddings)?;
    let w = tape.row_l2_normalize(class_weights)?;
    let wt = tape.transpose(&w)?;
    tape.matmul(&e, &wt)
}

fn check_simplex(name: &str, t: &Tensor) -> Result<()> {
    if let Some(index) = t.data().iter().position(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::Domain {
            op: "kl_divergence",
            index,
            detail: format!("{name} has negative entry {}", t.data()[index]),
        });
    }
    for r in 0..t.rows() {
        let total: f64 = t.row(r).iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("{name} row {r} sums to {total}")));
        }
    }
    Ok(())
}

/// `mean_b Σ_i p_i (log p_i - log q_i)` given `log q`. `p` is a constant.
fn kl_from_log_q(tape: &mut Tape, p: &[f64], log_q: &Tensor) -> Result<Tensor> {
    let rows = log_q.rows();
    let cols = log_q.cols();
    let entropy_term: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let p = Tensor::matrix(rows, cols, p.to_vec())?;
    let weighted = tape.mul(&p, log_q)?;
    let cross = tape.sum(&weighted)?;
    let neg = tape.neg(&cross)?;
    let total = tape.add(&neg, &Tensor::scalar(entropy_term))?;
    tape.scale(&total, 1.0 / rows as f64)
}

/// `KL(p ‖ q)` averaged over rows, with `0·log 0 = 0` and `q` clamped below
/// at [`PROB_FLOOR`]. Gradient flows through `q` only.
pub fn kl_divergence(tape: &mut Tape, p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::contract(format!(
            "kl_divergence shape mismatch {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_simplex("p", p)?;
    check_simplex("q", q)?;
    let clamped = tape.clamp_min(q, PROB_FLOOR)?;
    let log_q = tape.log(&clamped)?;
    kl_from_log_q(tape, p.data(), &log_q)
}

/// Adversarial objective between a projected alliance representation `z` and
/// a frozen model's representation `v`:
/// `KL(softmax(v/T) ‖ softmax(z/T))`. `v` is treated as a constant.
pub fn adv_loss(tape: &mut Tape, z: &Tensor, v: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    if z.shape() != v.shape() || z.shape().len() != 2 {
        return Err(Error::contract(format!(
            "adv_loss shape mismatch {:?} vs {:?}",
            z.shape(),
            v.shape()
        )));
    }
    let inv_t = 1.0 / temperature;
    let teacher: Vec<f64> = v.data().iter().map(|x| x * inv_t).collect();
    let p = softmax_rows_values(&teacher, v.cols());
    let scaled = tape.scale(z, inv_t)?;
    let log_q = tape.log_softmax_rows(&scaled)?;
    let log_q = tape.clamp_min(&log_q, PROB_FLOOR.ln())?;
    kl_from_log_q(tape, &p, &log_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::rng::Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = cross_entropy(&mut t, &m(1, 2, &[0.0, 0.0]), &[0]).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
        let l = cross_entropy(&mut t, &m(1, 2, &[10.0, -10.0]), &[0]).unwrap();
        // -log σ(20) = log(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((l.item() - expected).abs() < 1e-20, "{}", l.item());
        let mut last = f64::INFINITY;
        for big in [1.0, 5.0, 10.0, 20.0] {
            let l = cross_entropy(&mut t, &m(1, 3, &[big, 0.0, 0.0]), &[0]).unwrap().item();
            assert!(l < last);
            last = l;
        }
        assert!(cross_entropy(&mut t, &m(1, 2, &[0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn aam_hand_evaluation() {
        let mut t = Tape::new();
        let e = m(1, 2, &[1.0, 0.0]);
        let w = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = aam_softmax(&mut t, &e, &w, &[0], AamParams::default()).unwrap().item();
        let target = (32.0 * 0.2f64.cos()).exp();
        let expected = -(target / (target + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn aam_without_margin_is_cosine_cross_entropy() {
        let mut rng = Rng::new(4);
        let e = random(&mut rng, 5, 3);
        let w = random(&mut rng, 4, 3);
        let labels = [0, 3, 1, 2, 2];
        let mut t = Tape::new();
        let aam = aam_softmax(&mut t, &e, &w, &labels, AamParams { margin: 0.0, scale: 1.0 }).unwrap();
        let cos = cosine_logits(&mut t, &e, &w).unwrap();
        let ce = cross_entropy(&mut t, &cos, &labels).unwrap();
        assert!((aam.item() - ce.item()).abs() < 1e-12);
    }

    #[test]
    fn aam_is_monotone_in_margin() {
        let e = m(2, 3, &[1.0, 0.2, 0.1, 0.1, 0.9, 0.3]);
        let w = m(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut last = f64::NEG_INFINITY;
        for margin in [0.0, 0.1, 0.2, 0.3] {
            let mut t = Tape::new();
            let l = aam_softmax(&mut t, &e, &w, &[0, 1], AamParams { margin, scale: 32.0 })
                .unwrap()
                .item();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn aam_rejects_width_mismatch() {
        let mut t = Tape::new();
        assert!(aam_softmax(&mut t, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 4]), &[0], AamParams::default()).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let p = m(1, 3, &[0.2, 0.5, 0.3]);
        assert_eq!(kl_divergence(&mut t, &p, &p).unwrap().item(), 0.0);
        let l = kl_divergence(&mut t, &m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.5, 0.5])).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&mut t, &m(1, 2, &[1.2, -0.2]), &m(1, 2, &[0.5, 0.5])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn adv_loss_examples() {
        let mut rng = Rng::new(2);
        let z = random(&mut rng, 3, 4);
        let mut t = Tape::new();
        assert_eq!(adv_loss(&mut t, &z, &z, 1.0).unwrap().item(), 0.0);
        assert!(adv_loss(&mut t, &z, &z, 0.0).is_err());

        // frozen branch gets no gradient
        let v = random(&mut rng, 3, 4);
        let mut t = Tape::new();
        let zp = t.param(&z);
        let vp = t.param(&v);
        let l = adv_loss(&mut t, &zp, &vp, 1.0).unwrap();
        let g = t.backward(&l).unwrap();
        assert!(g.wrt(&vp).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.wrt(&zp).unwrap().data().iter().any(|&x| x != 0.0));

        let mut last = f64::INFINITY;
        for temp in [0.5, 1.0, 2.0] {
            let mut t = Tape::new();
            let l = adv_loss(&mut t, &z, &v, temp).unwrap().item();
            assert!(l < last, "T={temp}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn loss_gradients_pass_gradcheck() {
        let mut rng = Rng::new(17);
        let logits = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 5);
        let v = random(&mut rng, 4, 3);
        let labels = [2, 0, 1, 1];
        let checks: Vec<(&str, f64)> = vec![
            ("ce", finite_difference_check(|t, x| cross_entropy(t, x, &labels), &logits, 1e-5).unwrap()),
            (
                "aam-emb",
                finite_difference_check(|t, x| aam_softmax(t, x, &w.detach(), &labels[..], AamParams { margin: 0.2, scale: 4.0 }), &random(&mut rng, 4, 5), 1e-5)
                    .unwrap(),
            ),
            ("adv", finite_difference_check(|t, x| adv_loss(t, x, &v, 0.7), &logits, 1e-5).unwrap()),
            (
                "kl",
                finite_difference_check(
                    |t, x| {
                        let q = t.softmax_rows(x)?;
                        let p = Tensor::matrix(4, 3, softmax_rows_values(v.data(), 3))?;
                        kl_divergence(t, &p, &q)
                    },
                    &logits,
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-6, "{name}: {err}");
        }
        let emb = random(&mut rng, 4, 5);
        let wt = Tensor::matrix(3, 5, w.data().to_vec()).unwrap();
        let err = finite_difference_check(
            |t, x| aam_softmax(t, &emb, x, &labels, AamParams { margin: 0.2, scale: 4.0 }),
            &wt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "aam-weights: {err}");
    }
}
