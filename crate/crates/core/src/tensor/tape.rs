//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of recording, which is a reverse topological order
//! because a node can only reference nodes recorded before it.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv3d_backward, conv3d_forward};
use super::interp::{upscale_backward, upscale_forward};
use super::ops::{self, BnForward};
use super::Tensor;
use crate::error::{contract, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Identifies a trainable parameter outside the tape: the owning store and
/// the parameter's slot in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamKey),
    Conv3d { input: usize, weight: usize, bias: usize, stride: usize },
    Upscale { input: usize, factor: usize },
    LeakyRelu { input: usize, alpha: f32, pattern: Option<Vec<bool>> },
    BatchNorm { input: usize, gamma: usize, beta: usize, x_hat: Vec<f32>, inv_std: Vec<f64>, train: bool },
    Concat { a: usize, b: usize },
    Sigmoid { input: usize },
    Bce { pred: usize, target: Tensor },
    WeightedSum { terms: Vec<(usize, f32)> },
    Dot { input: usize, coeff: Option<Vec<f32>> },
    GlobalAvgPool { input: usize },
    Dense { input: usize, weight: usize, bias: usize },
    Reshape { input: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant | Op::Leaf | Op::Param(_) => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Upscale { .. } => "upscale",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Bce { .. } => "bce",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Dot { .. } => "sum",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Leaf | Op::Param(_) => vec![],
            Op::Conv3d { input, weight, bias, .. } | Op::Dense { input, weight, bias } => {
                vec![*input, *weight, *bias]
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Concat { a, b } => vec![*a, *b],
            Op::Upscale { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Dot { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Reshape { input } => vec![*input],
            Op::Bce { pred, .. } => vec![*pred],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Unrounded value of scalar reductions.
    exact: Option<f64>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    kinks: Kinks,
}

/// Handling of leaky ReLU sign patterns. Replaying the patterns of a base
/// point makes the recorded function smooth around it, which is what a
/// finite-difference probe needs.
#[derive(Debug, Default)]
enum Kinks {
    #[default]
    Free,
    Record(Vec<Vec<bool>>),
    Replay(std::vec::IntoIter<Vec<bool>>),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), kinks: Kinks::Free }
    }

    /// Starts recording the sign pattern (`x >= 0`) of every leaky ReLU.
    pub fn record_kinks(&mut self) {
        self.kinks = Kinks::Record(Vec::new());
    }

    /// Patterns recorded since [`Tape::record_kinks`], in call order.
    pub fn take_kinks(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.kinks) {
            Kinks::Record(p) => p,
            _ => Vec::new(),
        }
    }

    /// Makes subsequent leaky ReLUs use `patterns` (one per call, in order)
    /// instead of the signs of their inputs.
    pub fn replay_kinks(&mut self, patterns: Vec<Vec<bool>>) {
        self.kinks = Kinks::Replay(patterns.into_iter());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return contract("variable does not belong to this tape");
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let needs_grad = match op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => op.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad, exact: None });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    fn push_scalar(&mut self, value: f64, op: Op) -> Result<Var> {
        let v = self.push(Tensor::scalar(value as f32), op)?;
        if !value.is_finite() {
            return Err(crate::error::Error::NonFinite(self.nodes[v.index].op.name().into()));
        }
        self.nodes[v.index].exact = Some(value);
        Ok(v)
    }

    fn scalar_at(&self, i: usize) -> Result<f64> {
        match self.nodes[i].exact {
            Some(v) => Ok(v),
            None => Ok(self.val(i).item()? as f64),
        }
    }

    /// Value of a scalar node in f64. Reductions (`bce`, `sum`, `dot`,
    /// `weighted_sum`) keep their accumulated value unrounded.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let i = self.index(v)?;
        self.scalar_at(i)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; its gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> Result<Var> {
        self.push(value, Op::Param(key))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let out = conv3d_forward(self.val(i), self.val(w), self.val(b), stride)?;
        self.push(out, Op::Conv3d { input: i, weight: w, bias: b, stride })
    }

    pub fn upscale(&mut self, input: Var, factor: usize) -> Result<Var> {
        let i = self.index(input)?;
        let out = upscale_forward(self.val(i), factor)?;
        self.push(out, Op::Upscale { input: i, factor })
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f32) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        let pattern = match &mut self.kinks {
            Kinks::Free => None,
            Kinks::Record(all) => {
                all.push(x.data().iter().map(|&v| v >= 0.0).collect());
                None
            }
            Kinks::Replay(it) => match it.next() {
                Some(p) if p.len() == x.len() => Some(p),
                _ => return contract("replayed leaky ReLU pattern does not match the graph"),
            },
        };
        let out = ops::leaky_relu_with(x, alpha, pattern.as_deref())?;
        self.push(out, Op::LeakyRelu { input: i, alpha, pattern })
    }

    /// Batch normalization. With `running = None` the batch statistics are
    /// used (train mode) and returned so the caller can update its running
    /// estimates as `(batch mean, unbiased batch variance)`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (i, g, b) = (self.index(input)?, self.index(gamma)?, self.index(beta)?);
        let train = running.is_none();
        let BnForward { out, x_hat, inv_std, batch_mean, batch_var } =
            ops::batch_norm(self.val(i), self.val(g), self.val(b), running, eps)?;
        let var = self.push(out, Op::BatchNorm { input: i, gamma: g, beta: b, x_hat, inv_std, train })?;
        Ok((var, train.then_some((batch_mean, batch_var))))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = ops::concat_channels(self.val(ia), self.val(ib))?;
        self.push(out, Op::Concat { a: ia, b: ib })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = ops::sigmoid(self.val(i))?;
        self.push(out, Op::Sigmoid { input: i })
    }

    /// Mean binary cross entropy against a constant {0,1} target.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.index(pred)?;
        let loss = ops::bce(self.val(p), target)?;
        self.push_scalar(loss, Op::Bce { pred: p, target: target.clone() })
    }

    /// `Σ weight · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        if terms.is_empty() {
            return contract("weighted sum of no terms");
        }
        let mut idx = Vec::with_capacity(terms.len());
        let mut acc = 0f64;
        for &(v, w) in terms {
            let i = self.index(v)?;
            acc += w as f64 * self.scalar_at(i)?;
            idx.push((i, w));
        }
        self.push_scalar(acc, Op::WeightedSum { terms: idx })
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let s = self.val(i).sum();
        self.push_scalar(s, Op::Dot { input: i, coeff: None })
    }

    /// `Σ coeff_i · x_i` for a constant coefficient tensor of the same shape.
    pub fn dot(&mut self, input: Var, coeff: &Tensor) -> Result<Var> {
        let i = self.index(input)?;
        if coeff.shape() != self.val(i).shape() {
            return contract("dot coefficients must match the input shape");
        }
        let s: f64 = self.val(i).data().iter().zip(coeff.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        self.push_scalar(s, Op::Dot { input: i, coeff: Some(coeff.data().to_vec()) })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = ops::global_avg_pool(self.val(i))?;
        self.push(out, Op::GlobalAvgPool { input: i })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let out = ops::dense(self.val(i), self.val(w), self.val(b))?;
        self.push(out, Op::Dense { input: i, weight: w, bias: b })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.index(input)?;
        let out = self.val(i).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { input: i })
    }

    /// Propagates d`loss`/d(node) back to every leaf and parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.index(loss)?;
        if self.val(root).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, delta: Vec<f32>| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => out.leaves.push((i, g)),
                Op::Param(key) => out.params.push((*key, g)),
                Op::Conv3d { input, weight, bias, stride } => {
                    let go = Tensor::new(node.value.shape().to_vec(), g)?;
                    let want = self.nodes[*input].needs_grad;
                    let r = conv3d_backward(self.val(*input), self.val(*weight), self.val(*bias), &go, *stride, want)?;
                    if let Some(gi) = r.input {
                        send(*input, gi.into_data());
                    }
                    send(*weight, r.weight.into_data());
                    send(*bias, r.bias.into_data());
                }
                Op::Upscale { input, factor } => {
                    let go = Tensor::new(node.value.shape().to_vec(), g)?;
                    send(*input, upscale_backward(self.val(*input).shape(), &go, *factor)?.into_data());
                }
                Op::LeakyRelu { input, alpha, pattern } => {
                    send(*input, ops::leaky_relu_backward_with(self.val(*input), &g, *alpha, pattern.as_deref()));
                }
                Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train } => {
                    let (dx, dg, db) =
                        ops::batch_norm_backward(node.value.shape(), &g, x_hat, inv_std, self.val(*gamma), *train);
                    send(*input, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Concat { a, b } => {
                    let n = node.value.shape()[0];
                    let (ea, eb) = (self.val(*a).len() / n, self.val(*b).len() / n);
                    let (ga, gb) = ops::concat_backward(&g, n, ea, eb);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Sigmoid { input } => send(*input, ops::sigmoid_backward(&node.value, &g)),
                Op::Bce { pred, target } => {
                    send(*pred, ops::bce_backward(self.val(*pred), target, g[0] as f64));
                }
                Op::WeightedSum { terms } => {
                    for &(t, w) in terms {
                        send(t, vec![g[0] * w]);
                    }
                }
                Op::Dot { input, coeff } => {
                    let delta = match coeff {
                        None => vec![g[0]; self.val(*input).len()],
                        Some(c) => c.iter().map(|&c| c * g[0]).collect(),
                    };
                    send(*input, delta);
                }
                Op::GlobalAvgPool { input } => {
                    let x = self.val(*input);
                    let s = x.len() / g.len();
                    let delta = g.iter().flat_map(|&v| std::iter::repeat(v / s as f32).take(s)).collect();
                    send(*input, delta);
                }
                Op::Dense { input, weight, bias } => {
                    let (x, w) = (self.val(*input), self.val(*weight));
                    let (n, ni) = (x.shape()[0], x.shape()[1]);
                    let no = w.shape()[0];
                    let mut dx = vec![0f64; n * ni];
                    let mut dw = vec![0f64; no * ni];
                    let mut db = vec![0f64; no];
                    for r in 0..n {
                        for k in 0..no {
                            let gv = g[r * no + k] as f64;
                            db[k] += gv;
                            for j in 0..ni {
                                dx[r * ni + j] += gv * w.data()[k * ni + j] as f64;
                                dw[k * ni + j] += gv * x.data()[r * ni + j] as f64;
                            }
                        }
                    }
                    let to32 = |v: Vec<f64>| v.into_iter().map(|v| v as f32).collect();
                    send(*input, to32(dx));
                    send(*weight, to32(dw));
                    send(*bias, to32(db));
                }
                Op::Reshape { input } => send(*input, g),
            }
        }
        Ok(out)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(usize, Vec<f32>)>,
    params: Vec<(ParamKey, Vec<f32>)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` if the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaves.iter().find(|(i, _)| *i == v.index).map(|(_, g)| g.as_slice())
    }

    /// Parameter gradients in reverse recording order.
    pub fn params(&self) -> &[(ParamKey, Vec<f32>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamKey, Vec<f32>)> {
        self.params
    }
}
