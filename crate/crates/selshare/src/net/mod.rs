//! Feed-forward building blocks: activations, dense layers, loss functions.
//!
//! Conventions baked into every shape in this module:
//! - activations are `[batch, features]`, weights `[in, out]`, bias `[out]`
//! - batch gradients are the MEAN over the batch (the 1/B factor lives in the
//!   loss gradient, so layer backward is the plain chain rule)
//! - all arithmetic is f64
//! - non-finite pre-activations are a hard error, never silently passed on

pub mod optim;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use optim::{OptimizerKind, OptimizerState};

/// Probabilities inside log terms are clipped to [CLIP, 1 - CLIP].
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Linear,
}

impl Activation {
    /// Apply to pre-activations `[batch, features]`. Softmax acts rowwise and
    /// subtracts the row max before exponentiating.
    pub fn apply(&self, z: &Tensor) -> Tensor {
        match self {
            Activation::Relu => {
                let mut out = z.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            Activation::Sigmoid => {
                let mut out = z.clone();
                for v in out.data_mut() {
                    *v = stable_sigmoid(*v);
                }
                out
            }
            Activation::Linear => z.clone(),
            Activation::Softmax => {
                let mut out = z.clone();
                let w = out.cols();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                    debug_assert_eq!(row.len(), w);
                }
                out
            }
        }
    }

    /// Given dL/d(activation output) and the cached output `a`, produce
    /// dL/d(pre-activation). Relu uses a > 0, which matches z > 0 exactly and
    /// assigns zero gradient at the kink.
    pub fn backprop(&self, d_out: &Tensor, a: &Tensor) -> Tensor {
        assert_eq!(d_out.shape(), a.shape());
        match self {
            Activation::Relu => {
                let mut dz = d_out.clone();
                for (d, &av) in dz.data_mut().iter_mut().zip(a.data()) {
                    if av <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz
            }
            Activation::Sigmoid => {
                let mut dz = d_out.clone();
                for (d, &av) in dz.data_mut().iter_mut().zip(a.data()) {
                    *d *= av * (1.0 - av);
                }
                dz
            }
            Activation::Linear => d_out.clone(),
            Activation::Softmax => {
                // dz_j = a_j * (d_j - sum_k d_k a_k), rowwise
                let mut dz = d_out.clone();
                for r in 0..dz.rows() {
                    let a_row = a.row(r);
                    let dot: f64 = dz
                        .row(r)
                        .iter()
                        .zip(a_row.iter())
                        .map(|(d, av)| d * av)
                        .sum();
                    for (d, &av) in dz.row_mut(r).iter_mut().zip(a_row.iter()) {
                        *d = av * (*d - dot);
                    }
                }
                dz
            }
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer: out = activation(x * W + b).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Gradients for one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrads {
            d_weights: Tensor::zeros(layer.weights.shape().to_vec()),
            d_bias: Tensor::zeros(layer.bias.shape().to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        self.d_weights.add_assign(&other.d_weights);
        self.d_bias.add_assign(&other.d_bias);
    }
}

impl DenseLayer {
    /// Seeded uniform init in +-sqrt(6 / (in + out)); bias starts at zero.
    pub fn new_seeded(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "layer dims must be positive");
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        DenseLayer {
            weights: Tensor::new(vec![in_dim, out_dim], data).unwrap(),
            bias: Tensor::zeros(vec![out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Forward pass for a batch `[batch, in]` -> `[batch, out]`. Errors if the
    /// pre-activations are non-finite.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(Error::input(format!(
                "layer forward: input shape {:?} does not feed [{}..] weights",
                x.shape(),
                self.in_dim()
            )));
        }
        let mut z = x.matmul(&self.weights);
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        z.ensure_finite("dense layer pre-activation")?;
        Ok(self.activation.apply(&z))
    }

    /// Backward pass. `x` is the forward input, `a` the forward output,
    /// `d_out` is dL/da. Returns parameter gradients and dL/dx.
    pub fn backward(&self, x: &Tensor, a: &Tensor, d_out: &Tensor) -> (LayerGrads, Tensor) {
        let dz = self.activation.backprop(d_out, a);
        let d_weights = x.matmul_t_a(&dz);
        let mut d_bias = Tensor::zeros(vec![self.out_dim()]);
        for r in 0..dz.rows() {
            for (b, &d) in d_bias.data_mut().iter_mut().zip(dz.row(r)) {
                *b += d;
            }
        }
        let d_in = dz.matmul_t_b(&self.weights);
        (LayerGrads { d_weights, d_bias }, d_in)
    }
}

/// Forward through a stack of layers, returning every intermediate activation.
/// `acts[0]` is the input, `acts[i+1]` the output of layer i.
pub fn forward_stack(layers: &[DenseLayer], input: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for layer in layers {
        let next = layer.forward(acts.last().unwrap())?;
        acts.push(next);
    }
    Ok(acts)
}

/// Backward through a stack given the activations from `forward_stack` and
/// dL/d(final output). Returns per-layer gradients (same order as `layers`)
/// and dL/d(input).
pub fn backward_stack(
    layers: &[DenseLayer],
    acts: &[Tensor],
    d_out: &Tensor,
) -> (Vec<LayerGrads>, Tensor) {
    assert_eq!(acts.len(), layers.len() + 1);
    let mut grads: Vec<Option<LayerGrads>> = (0..layers.len()).map(|_| None).collect();
    let mut d = d_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let (g, d_in) = layer.backward(&acts[i], &acts[i + 1], &d);
        grads[i] = Some(g);
        d = d_in;
    }
    (grads.into_iter().map(|g| g.unwrap()).collect(), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BinaryCrossEntropy,
    CategoricalCrossEntropy,
    PairwiseRanking,
}

fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

fn check_loss_shapes(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::input(format!(
            "loss: prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.shape().len() != 2 {
        return Err(Error::input("loss: expected [batch, width] tensors"));
    }
    match kind {
        LossKind::PairwiseRanking => {
            if pred.cols() != 1 {
                return Err(Error::input(
                    "pairwise ranking: predictions must be [batch, 1] scores",
                ));
            }
            if !pred.rows().is_multiple_of(2) {
                return Err(Error::input(
                    "pairwise ranking: batch must pair up (even row count)",
                ));
            }
        }
        LossKind::CategoricalCrossEntropy => {
            for r in 0..target.rows() {
                let row = target.row(r);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::input(format!(
                        "categorical targets: row {r} is not a probability row (sum {sum})"
                    )));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Mean loss over the batch (over pairs for ranking).
pub fn loss_value(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_loss_shapes(kind, pred, target)?;
    let b = pred.rows() as f64;
    let v = match kind {
        LossKind::Mse => {
            let mut total = 0.0;
            for (p, y) in pred.data().iter().zip(target.data()) {
                let d = p - y;
                total += 0.5 * d * d;
            }
            total / b
        }
        LossKind::BinaryCrossEntropy => {
            let mut total = 0.0;
            for (p, y) in pred.data().iter().zip(target.data()) {
                let pc = clip_prob(*p);
                total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            total / b
        }
        LossKind::CategoricalCrossEntropy => {
            let mut total = 0.0;
            for (p, y) in pred.data().iter().zip(target.data()) {
                if *y != 0.0 {
                    total -= y * clip_prob(*p).ln();
                }
            }
            total / b
        }
        LossKind::PairwiseRanking => {
            let pairs = pred.rows() / 2;
            let mut total = 0.0;
            for i in 0..pairs {
                let (hi, lo) = pair_order(target, 2 * i);
                let margin = 1.0 - (pred.data()[hi] - pred.data()[lo]);
                if margin > 0.0 {
                    total += margin * margin;
                }
            }
            total / pairs as f64
        }
    };
    if !v.is_finite() {
        return Err(Error::numeric(format!("loss value is non-finite: {v}")));
    }
    Ok(v)
}

/// dL/d(prediction), including the 1/batch (or 1/pairs) factor.
pub fn loss_grad(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_loss_shapes(kind, pred, target)?;
    let b = pred.rows() as f64;
    let mut g = Tensor::zeros(pred.shape().to_vec());
    match kind {
        LossKind::Mse => {
            for ((gv, p), y) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                *gv = (p - y) / b;
            }
        }
        LossKind::BinaryCrossEntropy => {
            for ((gv, p), y) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                let pc = clip_prob(*p);
                *gv = (-y / pc + (1.0 - y) / (1.0 - pc)) / b;
            }
        }
        LossKind::CategoricalCrossEntropy => {
            for ((gv, p), y) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                if *y != 0.0 {
                    *gv = -y / clip_prob(*p) / b;
                }
            }
        }
        LossKind::PairwiseRanking => {
            let pairs = pred.rows() / 2;
            for i in 0..pairs {
                let (hi, lo) = pair_order(target, 2 * i);
                let margin = 1.0 - (pred.data()[hi] - pred.data()[lo]);
                if margin > 0.0 {
                    let d = 2.0 * margin / pairs as f64;
                    g.data_mut()[hi] -= d;
                    g.data_mut()[lo] += d;
                }
            }
        }
    }
    Ok(g)
}

/// For the pair (row, row+1): indices of the example that should score higher
/// and the one that should score lower, by target value. Ties keep the first
/// element as the winner.
fn pair_order(target: &Tensor, row: usize) -> (usize, usize) {
    let a = target.data()[row];
    let b = target.data()[row + 1];
    if b > a {
        (row + 1, row)
    } else {
        (row, row + 1)
    }
}
