//! Finite-difference suite over every differentiable primitive plus random
//! compositions of them.

use serde::Serialize;

use crate::autodiff::{finite_difference_check, Tape, Tensor};
use crate::error::Result;
use crate::rng::Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub primitives: Vec<(String, f64)>,
    pub compositions: usize,
    pub composition_max_rel_err: f64,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Check = Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>>;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

/// Contract a tensor to a scalar with fixed weights so every entry matters.
fn weigh(t: &mut Tape, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let p = t.mul(x, w)?;
    t.sum(&p)
}

fn primitive_checks(rng: &mut Rng) -> Vec<(String, Check, Tensor)> {
    let x = random(rng, 3, 4);
    let other = random(rng, 3, 4);
    let w = random(rng, 3, 4);
    let sq = random(rng, 4, 4);
    let row = Tensor::vector((0..4).map(|_| rng.normal()).collect());
    let positive = Tensor::matrix(3, 4, (0..12).map(|_| 0.5 + rng.uniform()).collect()).expect("shape");
    let cosines = Tensor::matrix(3, 4, (0..12).map(|_| rng.uniform_range(-0.9, 0.9)).collect()).expect("shape");
    let mut checks: Vec<(String, Check, Tensor)> = Vec::new();
    let mut push = |name: &str, input: &Tensor, f: Check| {
        let w = w.clone();
        let reduce: Check = Box::new(move |t: &mut Tape, v: &Tensor| {
            let y = f(t, v)?;
            if y.numel() == 1 {
                Ok(y)
            } else if y.shape() == w.shape() {
                weigh(t, &y, &w)
            } else {
                let s = t.mul(&y, &y)?;
                t.sum(&s)
            }
        });
        checks.push((name.to_string(), reduce, input.clone()));
    };
    {
        let other = other.clone();
        push("add/lhs", &x, Box::new(move |t, v| t.add(v, &other)));
    }
    {
        let other = other.clone();
        push("add/rhs", &x, Box::new(move |t, v| t.add(&other, v)));
    }
    {
        let other = other.clone();
        push("sub/lhs", &x, Box::new(move |t, v| t.sub(v, &other)));
    }
    {
        let other = other.clone();
        push("sub/rhs", &x, Box::new(move |t, v| t.sub(&other, v)));
    }
    {
        let other = other.clone();
        push("mul/lhs", &x, Box::new(move |t, v| t.mul(v, &other)));
    }
    {
        let other = other.clone();
        push("mul/rhs", &x, Box::new(move |t, v| t.mul(&other, v)));
    }
    {
        let positive = positive.clone();
        push("div/numerator", &x, Box::new(move |t, v| t.div(v, &positive)));
    }
    {
        let other = other.clone();
        push("div/denominator", &positive, Box::new(move |t, v| t.div(&other, v)));
    }
    push("neg", &x, Box::new(move |t, v| t.neg(v)));
    push("exp", &x, Box::new(move |t, v| t.exp(v)));
    push("log", &positive, Box::new(move |t, v| t.log(v)));
    push("relu", &x, Box::new(move |t, v| t.relu(v)));
    push("scale", &x, Box::new(move |t, v| t.scale(v, -1.7)));
    push("clamp_min", &x, Box::new(move |t, v| t.clamp_min(v, 0.1)));
    {
        let row = row.clone();
        push("broadcast_add_row/matrix", &x, Box::new(move |t, v| t.broadcast_add_row(v, &row)));
    }
    {
        let other = other.clone();
        push("broadcast_add_row/row", &row, Box::new(move |t, v| t.broadcast_add_row(&other, v)));
    }
    {
        let sq = sq.clone();
        push("matmul/lhs", &x, Box::new(move |t, v| t.matmul(v, &sq)));
    }
    {
        let other = other.clone();
        push("matmul/rhs", &sq, Box::new(move |t, v| t.matmul(&other, v)));
    }
    push("transpose", &x, Box::new(move |t, v| t.transpose(v)));
    push("softmax_rows", &x, Box::new(move |t, v| t.softmax_rows(v)));
    push("log_softmax_rows", &x, Box::new(move |t, v| t.log_softmax_rows(v)));
    push("sum", &x, Box::new(move |t, v| {
        let e = t.exp(v)?;
        let s = t.sum(&e)?;
        t.mul(&s, &s)
    }));
    push("mean", &x, Box::new(move |t, v| {
        let e = t.exp(v)?;
        let s = t.mean(&e)?;
        t.mul(&s, &s)
    }));
    push("sum_rows", &x, Box::new(move |t, v| t.sum_rows(v)));
    push("row_l2_normalize", &x, Box::new(move |t, v| t.row_l2_normalize(v)));
    push("pick", &x, Box::new(move |t, v| {
        let p = t.pick(v, &[3, 0, 2])?;
        let e = t.exp(&p)?;
        t.sum(&e)
    }));
    push("angular_margin", &cosines, Box::new(move |t, v| t.angular_margin(v, &[1, 3, 0], 0.2)));
    checks
}

/// Random graph over a 3×4 input built from shape-preserving, domain-safe
/// steps; reduced to a scalar with fixed weights.
fn composition(seed: u64) -> (Check, Tensor) {
    let mut rng = Rng::new(seed);
    let input = random(&mut rng, 3, 4);
    let w = random(&mut rng, 3, 4);
    let sq = random(&mut rng, 4, 4);
    let row = Tensor::vector((0..4).map(|_| rng.normal()).collect());
    let steps: Vec<(usize, usize, usize)> = (0..rng.below(5) + 2)
        .map(|_| (rng.below(12), rng.below(8), rng.below(8)))
        .collect();
    let f: Check = Box::new(move |t: &mut Tape, x: &Tensor| {
        let mut nodes = vec![x.clone()];
        for &(op, a, b) in &steps {
            let a = nodes[a % nodes.len()].clone();
            let b = nodes[b % nodes.len()].clone();
            let next = match op {
                0 => t.add(&a, &b)?,
                1 => t.sub(&a, &b)?,
                2 => t.mul(&a, &b)?,
                3 => {
                    // a / (1 + exp(0.3 b))
                    let s = t.scale(&b, 0.3)?;
                    let e = t.exp(&s)?;
                    let d = t.add(&e, &Tensor::matrix(3, 4, vec![1.0; 12])?)?;
                    t.div(&a, &d)?
                }
                4 => {
                    // softplus
                    let e = t.exp(&a)?;
                    let p = t.add(&e, &Tensor::matrix(3, 4, vec![1.0; 12])?)?;
                    t.log(&p)?
                }
                5 => {
                    let s = t.scale(&a, 0.3)?;
                    t.exp(&s)?
                }
                6 => t.relu(&a)?,
                7 => t.matmul(&a, &sq)?,
                8 => {
                    let tr = t.transpose(&a)?;
                    let g = t.matmul(&a, &tr)?;
                    let g = t.scale(&g, 0.25)?;
                    t.matmul(&g, &b)?
                }
                9 => t.softmax_rows(&a)?,
                10 => t.row_l2_normalize(&a)?,
                _ => {
                    let n = t.neg(&a)?;
                    t.broadcast_add_row(&n, &row)?
                }
            };
            nodes.push(next);
        }
        let last = nodes.last().expect("at least the input");
        weigh(t, last, &w)
    });
    (f, input)
}

/// Every primitive and `compositions` random graphs, derived from `seed`.
pub fn run_suite(seed: u64, compositions: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::for_component(seed, "gradcheck");
    let mut primitives = Vec::new();
    for (name, f, x) in primitive_checks(&mut rng) {
        primitives.push((name, finite_difference_check(&f, &x, EPS)?));
    }
    let mut composition_max: f64 = 0.0;
    for i in 0..compositions {
        let (f, x) = composition(rng.next_u64() ^ i as u64);
        composition_max = composition_max.max(finite_difference_check(&f, &x, EPS)?);
    }
    let max = primitives.iter().map(|(_, e)| *e).fold(composition_max, f64::max);
    Ok(GradcheckReport {
        primitives,
        compositions,
        composition_max_rel_err: composition_max,
        max_rel_err: max,
    })
}
