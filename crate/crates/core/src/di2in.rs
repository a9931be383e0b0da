//! The deep image-to-image generator: a 3D convolutional encoder-decoder with
//! skip concatenation and deeply supervised output branches.
//!
//! Topology for `L = encoder_levels` and widths `F_l = base_filters · 2^l`:
//!
//! * encoder level `l`: conv(stride 1) → leaky ReLU → batch norm (kept as the
//!   skip feature), then conv(stride 2) → leaky ReLU → batch norm.
//! * decoder level `l` (from `L-1` down to 0): ×2 trilinear upscale, channel
//!   concat with the level-`l` skip feature, two stride-1 conv blocks of width `F_l`.
//! * branch attached at level `a`: 1-channel conv head on the level-`a`
//!   decoder feature (level `L` is the bottleneck), ×`2^a` upscale, sigmoid.
//! * final output: concat of all branch maps → conv(`F_0`) → leaky ReLU →
//!   1-channel conv → sigmoid.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{join_list, kv_get, kv_list, RawCheckpoint, SpecText};
use crate::error::{contract, Error, Result};
use crate::graph::{LayerKind, Mode, NetworkGraph};
use crate::tensor::{Tape, Tensor, Var, SUPPORTED_UPSCALE_FACTORS};

/// Hyperparameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Di2inSpec {
    pub base_filters: usize,
    /// Number of stride-2 downsamplings.
    pub encoder_levels: usize,
    pub leaky_alpha: f32,
    /// Decoder levels feeding supervision branches; `encoder_levels` denotes the bottleneck.
    pub branch_attach_levels: Vec<usize>,
    /// Upscale factor of each branch, `2^level`.
    pub branch_upscale_factors: Vec<usize>,
    /// `w_i`, one per branch.
    pub branch_weights: Vec<f32>,
    /// `w_final`.
    pub final_weight: f32,
}

impl Default for Di2inSpec {
    fn default() -> Self {
        Self {
            base_filters: 16,
            encoder_levels: 4,
            leaky_alpha: 0.01,
            branch_attach_levels: vec![4, 2, 0],
            branch_upscale_factors: vec![16, 4, 1],
            branch_weights: vec![1.0; 3],
            final_weight: 1.0,
        }
    }
}

impl Di2inSpec {
    /// Spec with the given widths and depth; branches attach at every level
    /// whose upscale factor is supported, up to three, deepest first.
    pub fn with_depth(base_filters: usize, encoder_levels: usize) -> Self {
        let mut levels: Vec<usize> = (0..=encoder_levels)
            .rev()
            .filter(|&l| SUPPORTED_UPSCALE_FACTORS.contains(&(1usize << l.min(31))))
            .collect();
        if encoder_levels == 4 {
            levels = vec![4, 2, 0];
        } else {
            levels.truncate(3);
        }
        let n = levels.len();
        Self {
            base_filters,
            encoder_levels,
            branch_upscale_factors: levels.iter().map(|l| 1 << l).collect(),
            branch_attach_levels: levels,
            branch_weights: vec![1.0; n],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return contract("base_filters must be positive");
        }
        if self.encoder_levels == 0 {
            return contract("encoder_levels must be at least 1");
        }
        if self.encoder_levels > 8 {
            return contract("encoder_levels above 8 is not supported");
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return contract("leaky_alpha must lie in (0,1)");
        }
        let b = self.branch_attach_levels.len();
        if b == 0 {
            return contract("at least one supervision branch is required");
        }
        if self.branch_upscale_factors.len() != b || self.branch_weights.len() != b {
            return contract("branch levels, factors and weights must have equal length");
        }
        for (&level, &factor) in self.branch_attach_levels.iter().zip(&self.branch_upscale_factors) {
            if level > self.encoder_levels {
                return contract(format!("branch level {level} exceeds encoder depth {}", self.encoder_levels));
            }
            if factor != 1 << level {
                return contract(format!("branch at level {level} needs factor {}, got {factor}", 1 << level));
            }
            if !SUPPORTED_UPSCALE_FACTORS.contains(&factor) {
                return contract(format!("branch factor {factor} is not a supported upscale factor"));
            }
        }
        let weights = self.branch_weights.iter().chain(std::iter::once(&self.final_weight));
        if weights.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return contract("loss weights must be finite and non-negative");
        }
        if !weights.into_iter().any(|w| *w > 0.0) {
            return contract("at least one loss weight must be positive");
        }
        Ok(())
    }

    /// Channel width at encoder/decoder level `l`.
    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.encoder_levels
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, 1, d, h, w] if [d, h, w].iter().all(|e| *e > 0 && e % self.divisor() == 0) => Ok(()),
            &[_, 1, ..] => contract(format!(
                "spatial extents of {shape:?} must be positive multiples of {}",
                self.divisor()
            )),
            _ => contract(format!("generator input must be [N, 1, D, H, W], got {shape:?}")),
        }
    }
}

impl SpecText for Di2inSpec {
    fn to_kv(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".into(), "di2in".into()),
            ("base_filters".into(), self.base_filters.to_string()),
            ("encoder_levels".into(), self.encoder_levels.to_string()),
            ("leaky_alpha".into(), self.leaky_alpha.to_string()),
            ("branch_attach_levels".into(), join_list(&self.branch_attach_levels)),
            ("branch_upscale_factors".into(), join_list(&self.branch_upscale_factors)),
            ("branch_weights".into(), join_list(&self.branch_weights)),
            ("final_weight".into(), self.final_weight.to_string()),
        ])
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        if kv.get("kind").map(String::as_str) != Some("di2in") {
            return Err(Error::Format("checkpoint is not a DI2IN generator".into()));
        }
        let spec = Self {
            base_filters: kv_get(kv, "base_filters")?,
            encoder_levels: kv_get(kv, "encoder_levels")?,
            leaky_alpha: kv_get(kv, "leaky_alpha")?,
            branch_attach_levels: kv_list(kv, "branch_attach_levels")?,
            branch_upscale_factors: kv_list(kv, "branch_upscale_factors")?,
            branch_weights: kv_list(kv, "branch_weights")?,
            final_weight: kv_get(kv, "final_weight")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Probability maps emitted by one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub final_prob: Var,
    pub branch_probs: Vec<Var>,
}

/// A built generator: its spec and layer graph.
#[derive(Clone, Debug)]
pub struct Di2in {
    pub spec: Di2inSpec,
    pub graph: NetworkGraph,
}

/// Conv → leaky ReLU → batch norm.
fn conv_block(g: &mut NetworkGraph, name: &str, input: usize, cin: usize, cout: usize, stride: usize, alpha: f32, rng: &mut ChaCha8Rng) -> Result<usize> {
    let c = g.conv(&format!("{name}.conv"), input, cin, cout, stride, rng)?;
    let a = g.push(format!("{name}.act"), LayerKind::LeakyRelu { alpha }, &[c])?;
    g.batch_norm(&format!("{name}.bn"), a, cout)
}

/// Builds the generator graph with weights drawn from `seed`.
pub fn build_di2in(spec: &Di2inSpec, seed: u64) -> Result<Di2in> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new();
    let levels = spec.encoder_levels;
    let alpha = spec.leaky_alpha;

    let mut skips = Vec::with_capacity(levels);
    let (mut x, mut cin) = (NetworkGraph::INPUT, 1);
    for l in 0..levels {
        let f = spec.width(l);
        let skip = conv_block(&mut g, &format!("enc{l}.a"), x, cin, f, 1, alpha, &mut rng)?;
        skips.push(skip);
        x = conv_block(&mut g, &format!("enc{l}.b"), skip, f, f, 2, alpha, &mut rng)?;
        cin = f;
    }
    // Feature map and width available at each decoder level; index `levels` is the bottleneck.
    let mut decoder = vec![(0usize, 0usize); levels + 1];
    decoder[levels] = (x, cin);
    for l in (0..levels).rev() {
        let f = spec.width(l);
        let up = g.push(format!("dec{l}.up"), LayerKind::Upscale { factor: 2 }, &[x])?;
        let cat = g.push(format!("dec{l}.cat"), LayerKind::Concat, &[up, skips[l]])?;
        let a = conv_block(&mut g, &format!("dec{l}.a"), cat, cin + f, f, 1, alpha, &mut rng)?;
        x = conv_block(&mut g, &format!("dec{l}.b"), a, f, f, 1, alpha, &mut rng)?;
        cin = f;
        decoder[l] = (x, f);
    }

    let mut branches = Vec::with_capacity(spec.branch_attach_levels.len());
    for (i, (&level, &factor)) in spec.branch_attach_levels.iter().zip(&spec.branch_upscale_factors).enumerate() {
        let (src, width) = decoder[level];
        let head = g.conv(&format!("branch{i}.head"), src, width, 1, 1, &mut rng)?;
        let up = g.push(format!("branch{i}.up"), LayerKind::Upscale { factor }, &[head])?;
        branches.push(g.push(format!("branch{i}.prob"), LayerKind::Sigmoid, &[up])?);
    }
    let f0 = spec.width(0);
    let cat = g.push("fuse.cat", LayerKind::Concat, &branches)?;
    let c = g.conv("fuse.conv", cat, branches.len(), f0, 1, &mut rng)?;
    let a = g.push("fuse.act", LayerKind::LeakyRelu { alpha }, &[c])?;
    let out = g.conv("fuse.out", a, f0, 1, 1, &mut rng)?;
    let prob = g.push("final.prob", LayerKind::Sigmoid, &[out])?;

    let mut outputs = vec![prob];
    outputs.extend(branches);
    g.set_outputs(outputs);
    Ok(Di2in { spec: spec.clone(), graph: g })
}

impl Di2in {
    /// Records a generator pass over `batch` (`[N, 1, D, H, W]`).
    pub fn forward(&mut self, tape: &mut Tape, batch: Var, mode: Mode, trainable: bool) -> Result<GeneratorOutput> {
        self.spec.check_input(tape.value(batch).shape())?;
        let outs = self.graph.forward(tape, batch, mode, trainable)?;
        let (final_prob, branch_probs) = outs.split_first().expect("generator has outputs");
        Ok(GeneratorOutput { final_prob: *final_prob, branch_probs: branch_probs.to_vec() })
    }

    /// Final probability map in inference mode.
    pub fn predict(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        let out = self.forward(&mut tape, x, Mode::Infer, false)?;
        Ok(tape.value(out.final_prob).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.graph.store.scalar_count()
    }

    pub fn to_checkpoint(&self) -> RawCheckpoint {
        RawCheckpoint::from_store(self.spec.to_kv(), &self.graph.store)
    }

    pub fn from_checkpoint(ck: &RawCheckpoint) -> Result<Self> {
        let spec = Di2inSpec::from_kv(&ck.spec)?;
        let mut net = build_di2in(&spec, 0)?;
        ck.apply_to(&mut net.graph.store)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&RawCheckpoint::load(path)?)
    }
}

/// Convenience wrapper: builds a tape, runs the generator, returns the output.
pub fn forward_generator(net: &mut Di2in, tape: &mut Tape, batch: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
    let x = tape.constant(batch.clone())?;
    net.forward(tape, x, mode, true)
}

/// `Σ_i w_i · BCE(branch_i, label) + w_final · BCE(final, label)`.
pub fn total_loss(tape: &mut Tape, outputs: &GeneratorOutput, label: &Tensor, spec: &Di2inSpec) -> Result<Var> {
    if outputs.branch_probs.len() != spec.branch_weights.len() {
        return contract("branch count differs from the number of loss weights");
    }
    let mut terms = Vec::with_capacity(outputs.branch_probs.len() + 1);
    for (&b, &w) in outputs.branch_probs.iter().zip(&spec.branch_weights) {
        terms.push((tape.bce(b, label)?, w));
    }
    terms.push((tape.bce(outputs.final_prob, label)?, spec.final_weight));
    tape.weighted_sum(&terms)
}
