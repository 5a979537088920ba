//! Multi-layer perceptrons and first-order optimizers.
//!
//! A model is a stack of `relu(x·W + b)` hidden layers followed by a head.
//! The *representation* is the output of the last hidden layer (or the input
//! itself for zero-depth models). A classifier head adds one affine map to
//! logits; an embedding head returns the L2-normalized representation and
//! owns a `num_classes × repr_dim` class-weight matrix used by AAM-softmax.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    /// Raw logits over `num_classes`.
    Classifier { num_classes: usize },
    /// Unit-norm representation, scored by cosine; trained against
    /// `num_classes` class weights.
    Embedding { num_classes: usize },
}

impl Head {
    pub fn num_classes(&self) -> usize {
        match *self {
            Head::Classifier { num_classes } | Head::Embedding { num_classes } => num_classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::Classifier { .. } => "classifier",
            Head::Embedding { .. } => "embedding",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    pub head: Head,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn classifier(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        let repr_dim = hidden_dims.last().copied().unwrap_or(input_dim);
        ModelSpec {
            input_dim,
            hidden_dims,
            repr_dim,
            head: Head::Classifier { num_classes },
            activation: Activation::Relu,
        }
    }

    pub fn embedding(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            head: Head::Embedding { num_classes },
            ..ModelSpec::classifier(input_dim, hidden_dims, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) || self.repr_dim == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        let last = self.hidden_dims.last().copied().unwrap_or(self.input_dim);
        if last != self.repr_dim {
            return Err(Error::contract(format!(
                "repr_dim {} does not match the last hidden width {last}",
                self.repr_dim
            )));
        }
        if self.head.num_classes() < 2 {
            return Err(Error::contract("a head needs at least two classes"));
        }
        Ok(())
    }

    /// Width of `task_out`.
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Classifier { num_classes } => num_classes,
            Head::Embedding { .. } => self.repr_dim,
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &width) in self.hidden_dims.iter().enumerate() {
            layout.push((format!("layer{i}.weight"), vec![fan_in, width]));
            layout.push((format!("layer{i}.bias"), vec![width]));
            fan_in = width;
        }
        match self.head {
            Head::Classifier { num_classes } => {
                layout.push(("head.weight".into(), vec![self.repr_dim, num_classes]));
                layout.push(("head.bias".into(), vec![num_classes]));
            }
            Head::Embedding { num_classes } => {
                layout.push(("head.class_weights".into(), vec![num_classes, self.repr_dim]));
            }
        }
        layout
    }
}

/// Glorot-uniform matrix of the given shape (`fan_in`, `fan_out` = shape).
pub(crate) fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

/// `x·w + b`, optionally followed by relu.
pub(crate) fn dense(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Result<Tensor> {
    let xw = tape.matmul(x, w)?;
    let z = tape.broadcast_add_row(&xw, b)?;
    if relu {
        tape.relu(&z)
    } else {
        Ok(z)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub representation: Tensor,
    /// Logits for a classifier head, unit-norm representation for an
    /// embedding head.
    pub task_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Deterministic initialization: Glorot-uniform weights drawn in layout
    /// order from a generator seeded with `seed`; biases zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let params = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    glorot(&mut rng, shape[0], shape[1])
                }
            })
            .collect();
        Ok(Mlp { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let params = params.iter().map(Tensor::detach).collect();
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    /// Register every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// SHA-256 over the parameter bytes; used to assert frozen models stay frozen.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            for x in p.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Forward `batch` using `params` (either [`Mlp::bind`] output or plain
    /// copies of the stored parameters).
    pub fn forward(&self, tape: &mut Tape, params: &[Tensor], batch: &Tensor) -> Result<ForwardOutput> {
        if batch.shape().len() != 2 || batch.cols() != self.spec.input_dim {
            return Err(Error::contract(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.spec.input_dim
            )));
        }
        let mut h = batch.clone();
        for layer in 0..self.spec.hidden_dims.len() {
            h = dense(tape, &h, &params[2 * layer], &params[2 * layer + 1], true)?;
        }
        let head_at = 2 * self.spec.hidden_dims.len();
        let task_out = match self.spec.head {
            Head::Classifier { .. } => dense(tape, &h, &params[head_at], &params[head_at + 1], false)?,
            Head::Embedding { .. } => tape.row_l2_normalize(&h)?,
        };
        Ok(ForwardOutput {
            representation: h,
            task_out,
        })
    }

    /// Untracked forward pass.
    pub fn predict(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        self.forward(&mut tape, &self.params, batch)
    }

    /// Class weights of an embedding head, from a bound parameter list.
    pub fn class_weights<'a>(&self, params: &'a [Tensor]) -> Option<&'a Tensor> {
        match self.spec.head {
            Head::Embedding { .. } => params.last(),
            Head::Classifier { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        OptimizerState {
            kind,
            first: zeros,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} slots but got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(Error::contract(format!(
                    "parameter {i}: shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((theta, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = momentum * *v + g;
                        *theta -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
