//! Static network description: an ordered list of layer nodes plus the named
//! parameters and normalization statistics they reference.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::tensor::{Gradients, ParamKey, Tape, Tensor, Var};

/// Batch-norm running-stats momentum: `running = m · running + (1 - m) · batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Whether normalization layers use batch statistics or stored estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub usize);

/// Per-channel running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Named trainable tensors and running statistics.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    stats: Vec<RunningStats>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.stats == other.stats
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape() && a.data() == b.data())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), names: Vec::new(), tensors: Vec::new(), stats: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats { name: name.into(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.id, index: id.0 }
    }

    /// Adds the parameter gradients recorded against this store; gradients
    /// belonging to other stores are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (key, g) in grads.params() {
            if key.store == self.id {
                self.tensors[key.index].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over names, parameter bits, and running
    /// statistics; used to assert that a phase left a network untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            t.data().iter().for_each(|v| feed(&v.to_bits().to_le_bytes()));
        }
        for s in &self.stats {
            s.mean.iter().chain(&s.var).for_each(|v| feed(&v.to_bits().to_le_bytes()));
        }
        h
    }
}

/// Operation performed by one node of a [`NetworkGraph`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv3d { weight: ParamId, bias: ParamId, stride: usize },
    Upscale { factor: usize },
    LeakyRelu { alpha: f32 },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: StatsId },
    /// Channel concatenation of all inputs, in order.
    Concat,
    Sigmoid,
    GlobalAvgPool,
    Dense { weight: ParamId, bias: ParamId },
    /// Drops trailing unit axes: `[N, 1] -> [N]`.
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of earlier nodes feeding this one.
    pub inputs: Vec<usize>,
}

/// Acyclic layer graph stored in topological order.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    nodes: Vec<LayerNode>,
    outputs: Vec<usize>,
    pub store: ParamStore,
}

impl NetworkGraph {
    pub fn new() -> Self {
        Self { nodes: vec![LayerNode { name: "input".into(), kind: LayerKind::Input, inputs: vec![] }], outputs: vec![], store: ParamStore::new() }
    }

    pub const INPUT: usize = 0;

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: Vec<usize>) {
        self.outputs = outputs;
    }

    /// Appends a node; inputs must reference earlier nodes, which keeps the
    /// list in topological order.
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[usize]) -> Result<usize> {
        let idx = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= idx) {
            return contract(format!("layer input {bad} does not precede node {idx}"));
        }
        self.nodes.push(LayerNode { name: name.into(), kind, inputs: inputs.to_vec() });
        Ok(idx)
    }

    /// Adds a 3×3×3 convolution with He-normal weights and zero bias.
    pub fn conv<R: Rng>(&mut self, name: &str, input: usize, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<usize> {
        let fan_in = (cin * 27) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite scale");
        let weight = Tensor::from_fn([cout, cin, 3, 3, 3], |_| normal.sample(rng) as f32);
        let weight = self.store.add(format!("{name}.weight"), weight);
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        self.push(name, LayerKind::Conv3d { weight, bias, stride }, &[input])
    }

    pub fn batch_norm(&mut self, name: &str, input: usize, channels: usize) -> Result<usize> {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        let stats = self.store.add_stats(name, channels);
        self.push(name, LayerKind::BatchNorm { gamma, beta, stats }, &[input])
    }

    pub fn dense<R: Rng>(&mut self, name: &str, input: usize, cin: usize, cout: usize, rng: &mut R) -> Result<usize> {
        let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("finite scale");
        let weight = Tensor::from_fn([cout, cin], |_| normal.sample(rng) as f32);
        let weight = self.store.add(format!("{name}.weight"), weight);
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        self.push(name, LayerKind::Dense { weight, bias }, &[input])
    }

    /// Records a forward pass on `tape` and returns the output variables.
    ///
    /// Parameters enter the tape as trainable leaves when `trainable` is set
    /// and as constants otherwise. In [`Mode::Train`] every batch-norm layer
    /// normalizes with batch statistics and updates its running estimate.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode, trainable: bool) -> Result<Vec<Var>> {
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut param_vars: Vec<Option<Var>> = vec![None; self.store.len()];
        let mut param = |tape: &mut Tape, store: &ParamStore, id: ParamId| -> Result<Var> {
            if let Some(v) = param_vars[id.0] {
                return Ok(v);
            }
            let value = store.get(id).clone();
            let v = if trainable { tape.param(store.key(id), value)? } else { tape.constant(value)? };
            param_vars[id.0] = Some(v);
            Ok(v)
        };
        for node in &self.nodes {
            let ins: Vec<Var> = node.inputs.iter().map(|&i| vars[i]).collect();
            let name_err = |e: Error| match e {
                Error::NonFinite(op) => Error::NonFinite(format!("layer '{}' ({op})", node.name)),
                Error::Contract(msg) => Error::Contract(format!("layer '{}': {msg}", node.name)),
                other => other,
            };
            let out = match &node.kind {
                LayerKind::Input => Ok(input),
                LayerKind::Conv3d { weight, bias, stride } => {
                    let w = param(tape, &self.store, *weight)?;
                    let b = param(tape, &self.store, *bias)?;
                    tape.conv3d(ins[0], w, b, *stride)
                }
                LayerKind::Upscale { factor } => tape.upscale(ins[0], *factor),
                LayerKind::LeakyRelu { alpha } => tape.leaky_relu(ins[0], *alpha),
                LayerKind::BatchNorm { gamma, beta, stats } => {
                    let g = param(tape, &self.store, *gamma)?;
                    let b = param(tape, &self.store, *beta)?;
                    let rs = &self.store.stats[stats.0];
                    let running = (mode == Mode::Infer).then_some((rs.mean.as_slice(), rs.var.as_slice()));
                    match tape.batch_norm(ins[0], g, b, running, BN_EPSILON) {
                        Ok((v, Some((mean, var)))) => {
                            let rs = &mut self.store.stats[stats.0];
                            for c in 0..rs.mean.len() {
                                rs.mean[c] = (BN_MOMENTUM * rs.mean[c] as f64 + (1.0 - BN_MOMENTUM) * mean[c]) as f32;
                                rs.var[c] = (BN_MOMENTUM * rs.var[c] as f64 + (1.0 - BN_MOMENTUM) * var[c]) as f32;
                            }
                            Ok(v)
                        }
                        Ok((v, None)) => Ok(v),
                        Err(e) => Err(e),
                    }
                }
                LayerKind::Concat => match ins.split_first() {
                    None => contract("concat without inputs"),
                    Some((&first, rest)) => rest.iter().try_fold(first, |acc, &v| tape.concat(acc, v)),
                },
                LayerKind::Sigmoid => tape.sigmoid(ins[0]),
                LayerKind::GlobalAvgPool => tape.global_avg_pool(ins[0]),
                LayerKind::Dense { weight, bias } => {
                    let w = param(tape, &self.store, *weight)?;
                    let b = param(tape, &self.store, *bias)?;
                    tape.dense(ins[0], w, b)
                }
                LayerKind::Flatten => {
                    let n = tape.value(ins[0]).shape()[0];
                    tape.reshape(ins[0], &[n])
                }
            }
            .map_err(name_err)?;
            vars.push(out);
        }
        Ok(self.outputs.iter().map(|&i| vars[i]).collect())
    }

    /// Output shapes of every node for a given input shape, computed without
    /// running any kernels.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let s = match &node.kind {
                LayerKind::Input => input.to_vec(),
                LayerKind::Conv3d { weight, stride, .. } => {
                    let x = ins[0];
                    let w = self.store.get(*weight).shape();
                    if x.len() != 5 || x[1] != w[1] {
                        return contract(format!("layer '{}': input shape {x:?} incompatible with weight {w:?}", node.name));
                    }
                    let o = |e: usize| crate::tensor::conv_output_extent(e, *stride);
                    vec![x[0], w[0], o(x[2]), o(x[3]), o(x[4])]
                }
                LayerKind::Upscale { factor } => {
                    let x = ins[0];
                    vec![x[0], x[1], x[2] * factor, x[3] * factor, x[4] * factor]
                }
                LayerKind::LeakyRelu { .. } | LayerKind::BatchNorm { .. } | LayerKind::Sigmoid => ins[0].clone(),
                LayerKind::Concat => {
                    let mut s = ins[0].clone();
                    for other in &ins[1..] {
                        if other[0] != s[0] || other[2..] != s[2..] {
                            return contract(format!("layer '{}': cannot concatenate {s:?} with {other:?}", node.name));
                        }
                        s[1] += other[1];
                    }
                    s
                }
                LayerKind::GlobalAvgPool => vec![ins[0][0], ins[0][1]],
                LayerKind::Dense { weight, .. } => vec![ins[0][0], self.store.get(*weight).shape()[0]],
                LayerKind::Flatten => vec![ins[0][0]],
            };
            shapes.push(s);
        }
        Ok(shapes)
    }
}

impl Default for NetworkGraph {
    fn default() -> Self {
        Self::new()
    }
}
