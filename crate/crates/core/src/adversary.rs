//! Label-map discriminator and the adversarial loss terms.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{kv_get, RawCheckpoint, SpecText};
use crate::error::{contract, Error, Result};
use crate::graph::{LayerKind, Mode, NetworkGraph};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub base_filters: usize,
    /// Number of stride-2 conv stages.
    pub conv_levels: usize,
    pub leaky_alpha: f32,
    /// Feed the image volume alongside the label map (2 input channels).
    pub condition_on_image: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { base_filters: 8, conv_levels: 4, leaky_alpha: 0.01, condition_on_image: false }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return contract("discriminator base_filters must be positive");
        }
        if !(2..=8).contains(&self.conv_levels) {
            return contract("discriminator conv_levels must be between 2 and 8");
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return contract("leaky_alpha must lie in (0,1)");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.condition_on_image {
            2
        } else {
            1
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

impl SpecText for DiscriminatorSpec {
    fn to_kv(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".into(), "discriminator".into()),
            ("base_filters".into(), self.base_filters.to_string()),
            ("conv_levels".into(), self.conv_levels.to_string()),
            ("leaky_alpha".into(), self.leaky_alpha.to_string()),
            ("condition_on_image".into(), self.condition_on_image.to_string()),
        ])
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        if kv.get("kind").map(String::as_str) != Some("discriminator") {
            return Err(Error::Format("checkpoint is not a discriminator".into()));
        }
        let spec = Self {
            base_filters: kv_get(kv, "base_filters")?,
            conv_levels: kv_get(kv, "conv_levels")?,
            leaky_alpha: kv_get(kv, "leaky_alpha")?,
            condition_on_image: kv_get(kv, "condition_on_image")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub graph: NetworkGraph,
}

/// `[conv stride 2 → leaky ReLU → batch norm] × conv_levels → global average
/// pool → dense → sigmoid`, one probability per batch item.
pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new();
    let (mut x, mut cin) = (NetworkGraph::INPUT, spec.in_channels());
    for l in 0..spec.conv_levels {
        let f = spec.width(l);
        let c = g.conv(&format!("d{l}.conv"), x, cin, f, 2, &mut rng)?;
        let a = g.push(format!("d{l}.act"), LayerKind::LeakyRelu { alpha: spec.leaky_alpha }, &[c])?;
        x = g.batch_norm(&format!("d{l}.bn"), a, f)?;
        cin = f;
    }
    let pool = g.push("pool", LayerKind::GlobalAvgPool, &[x])?;
    let logit = g.dense("logit", pool, cin, 1, &mut rng)?;
    let flat = g.push("flatten", LayerKind::Flatten, &[logit])?;
    let prob = g.push("prob", LayerKind::Sigmoid, &[flat])?;
    g.set_outputs(vec![prob]);
    Ok(Discriminator { spec: spec.clone(), graph: g })
}

impl Discriminator {
    /// Scores a batch of maps (`[N, C, D, H, W]`, C = input channels); returns `[N]`.
    pub fn forward(&mut self, tape: &mut Tape, maps: Var, mode: Mode, trainable: bool) -> Result<Var> {
        let shape = tape.value(maps).shape().to_vec();
        let min = 1usize << self.spec.conv_levels;
        match shape.as_slice() {
            &[_, c, d, h, w] if c == self.spec.in_channels() => {
                if [d, h, w].iter().any(|&e| e < min) {
                    return contract(format!("discriminator input {shape:?} smaller than {min} along some axis"));
                }
            }
            _ => return contract(format!("discriminator expects [N, {}, D, H, W], got {shape:?}", self.spec.in_channels())),
        }
        Ok(self.graph.forward(tape, maps, mode, trainable)?[0])
    }

    /// Inference-mode probabilities for a batch of maps.
    pub fn score(&mut self, maps: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(maps.clone())?;
        let d = self.forward(&mut tape, x, Mode::Infer, false)?;
        Ok(tape.value(d).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.graph.store.scalar_count()
    }

    pub fn to_checkpoint(&self) -> RawCheckpoint {
        RawCheckpoint::from_store(self.spec.to_kv(), &self.graph.store)
    }

    pub fn from_checkpoint(ck: &RawCheckpoint) -> Result<Self> {
        let spec = DiscriminatorSpec::from_kv(&ck.spec)?;
        let mut net = build_discriminator(&spec, 0)?;
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

/// `-mean(log D(y_gt)) - mean(log(1 - D(y_pred)))`, both probabilities
/// clamped as in the BCE loss.
pub fn discriminator_loss(tape: &mut Tape, d_on_gt: Var, d_on_pred: Var) -> Result<Var> {
    let ones = Tensor::full(tape.value(d_on_gt).shape().to_vec(), 1.0);
    let zeros = Tensor::zeros(tape.value(d_on_pred).shape().to_vec());
    let real = tape.bce(d_on_gt, &ones)?;
    let fake = tape.bce(d_on_pred, &zeros)?;
    tape.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}

/// Non-saturating generator objective: `seg_loss - λ · mean(log D(G(x)))`.
///
/// Minimizing it pushes `D(G(x))` toward 1. The discriminator must enter the
/// tape with frozen parameters so only the generator receives gradients.
pub fn generator_adversarial_loss(tape: &mut Tape, seg_loss: Var, d_on_pred: Var, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return contract(format!("lambda must be a finite non-negative number, got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(seg_loss);
    }
    let ones = Tensor::full(tape.value(d_on_pred).shape().to_vec(), 1.0);
    let fool = tape.bce(d_on_pred, &ones)?;
    tape.weighted_sum(&[(seg_loss, 1.0), (fool, lambda)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap() as f64
    }

    #[test]
    fn chance_level_discriminator_loss() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full([4], 0.5)).unwrap();
        let b = t.constant(Tensor::full([4], 0.5)).unwrap();
        let l = discriminator_loss(&mut t, a, b).unwrap();
        assert!((scalar(&t, l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full([3], (1.0 - 1e-7f64) as f32)).unwrap();
        let b = t.constant(Tensor::full([3], 1e-7)).unwrap();
        let l = discriminator_loss(&mut t, a, b).unwrap();
        assert!(scalar(&t, l) < 1e-6);
    }

    #[test]
    fn lambda_zero_returns_seg_loss() {
        let mut t = Tape::new();
        let seg = t.constant(Tensor::scalar(0.37)).unwrap();
        let d = t.constant(Tensor::full([2], 0.1)).unwrap();
        let l = generator_adversarial_loss(&mut t, seg, d, 0.0).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.37);
        assert!(generator_adversarial_loss(&mut t, seg, d, -0.1).is_err());
    }

    #[test]
    fn hand_computed_generator_loss() {
        let mut t = Tape::new();
        let seg = t.constant(Tensor::scalar(0.5)).unwrap();
        let d = t.constant(Tensor::full([2], 0.5)).unwrap();
        let l = generator_adversarial_loss(&mut t, seg, d, 0.01).unwrap();
        let expected = 0.5 - 0.01 * 0.5f64.ln();
        assert!((scalar(&t, l) - expected).abs() < 1e-7);
        assert!((expected - 0.50693).abs() < 1e-5);
    }

    #[test]
    fn fooled_discriminator_leaves_seg_loss() {
        let mut t = Tape::new();
        let seg = t.constant(Tensor::scalar(0.25)).unwrap();
        let d = t.constant(Tensor::full([2], (1.0 - 1e-7f64) as f32)).unwrap();
        let l = generator_adversarial_loss(&mut t, seg, d, 0.01).unwrap();
        assert!((scalar(&t, l) - 0.25).abs() < 1e-8);
    }

    #[test]
    fn output_shape_and_range() {
        let mut d = build_discriminator(&DiscriminatorSpec::default(), 3).unwrap();
        let maps = Tensor::from_fn([2, 1, 16, 16, 16], |i| ((i / 7) % 2) as f32);
        let mut t = Tape::new();
        let x = t.constant(maps).unwrap();
        let p = d.forward(&mut t, x, Mode::Train, true).unwrap();
        assert_eq!(t.value(p).shape(), &[2]);
        assert!(t.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_small_inputs() {
        let mut d = build_discriminator(&DiscriminatorSpec::default(), 3).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 1, 8, 16, 16])).unwrap();
        assert!(d.forward(&mut t, x, Mode::Train, true).is_err());
    }
}
