use std::collections::BTreeMap;
use std::path::Path;

use crate::adversary::DiscriminatorSpec;
use crate::checkpoint::{join_list, kv_list, parse_kv, render_kv};
use crate::di2in::Di2inSpec;
use crate::error::{Error, Result};

/// Training hyperparameters and network sizes. Serialized as flat
/// `key = value` text whose keys are the field names (`k_D`, `k_G` keep
/// their capitalization).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub lr_initial: f64,
    pub lr_drop_at: usize,
    pub lr_drop_factor: f64,
    pub adv_iterations: usize,
    pub lambda: f32,
    pub k_d: usize,
    pub d_batch: usize,
    pub k_g: usize,
    pub g_batch: usize,
    pub adv_lr_g: f64,
    pub adv_lr_d: f64,
    pub seed: u64,
    /// Emit an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Branch weights deepest first, then the final-output weight.
    pub loss_weights: Vec<f32>,
    pub base_filters: usize,
    pub encoder_levels: usize,
    pub leaky_alpha: f32,
    pub d_base_filters: usize,
    pub d_conv_levels: usize,
    pub d_condition_on_image: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iterations: 200,
            pretrain_batch: 4,
            lr_initial: 0.01,
            lr_drop_at: 100,
            lr_drop_factor: 10.0,
            adv_iterations: 100,
            lambda: 0.01,
            k_d: 10,
            d_batch: 8,
            k_g: 1,
            g_batch: 4,
            adv_lr_g: 0.001,
            adv_lr_d: 0.001,
            seed: 0,
            checkpoint_every: 0,
            loss_weights: vec![1.0; 4],
            base_filters: 8,
            encoder_levels: 4,
            leaky_alpha: 0.01,
            d_base_filters: 8,
            d_conv_levels: 4,
            d_condition_on_image: false,
        }
    }
}

const KEYS: &[&str] = &[
    "pretrain_iterations",
    "pretrain_batch",
    "lr_initial",
    "lr_drop_at",
    "lr_drop_factor",
    "adv_iterations",
    "lambda",
    "k_D",
    "d_batch",
    "k_G",
    "g_batch",
    "adv_lr_g",
    "adv_lr_d",
    "seed",
    "checkpoint_every",
    "loss_weights",
    "base_filters",
    "encoder_levels",
    "leaky_alpha",
    "d_base_filters",
    "d_conv_levels",
    "d_condition_on_image",
];

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pretrain_batch", self.pretrain_batch),
            ("k_D", self.k_d),
            ("d_batch", self.d_batch),
            ("k_G", self.k_g),
            ("g_batch", self.g_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.pretrain_iterations > 0 && self.lr_drop_at > self.pretrain_iterations {
            return Err(Error::Config(format!(
                "lr_drop_at ({}) exceeds pretrain_iterations ({})",
                self.lr_drop_at, self.pretrain_iterations
            )));
        }
        for (k, v) in [("lr_initial", self.lr_initial), ("adv_lr_g", self.adv_lr_g), ("adv_lr_d", self.adv_lr_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{k}` must be a finite non-negative number")));
            }
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("`lr_drop_factor` must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("`lambda` must be non-negative".into()));
        }
        self.generator_spec()?;
        self.discriminator_spec().validate()?;
        Ok(())
    }

    pub fn generator_spec(&self) -> Result<Di2inSpec> {
        let mut spec = Di2inSpec::with_depth(self.base_filters, self.encoder_levels);
        spec.leaky_alpha = self.leaky_alpha;
        let n = spec.branch_attach_levels.len();
        if self.loss_weights.len() != n + 1 {
            return Err(Error::Config(format!(
                "loss_weights needs {} entries ({n} branches and the final output), got {}",
                n + 1,
                self.loss_weights.len()
            )));
        }
        spec.branch_weights = self.loss_weights[..n].to_vec();
        spec.final_weight = self.loss_weights[n];
        spec.validate()?;
        Ok(spec)
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            base_filters: self.d_base_filters,
            conv_levels: self.d_conv_levels,
            leaky_alpha: self.leaky_alpha,
            condition_on_image: self.d_condition_on_image,
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let vals = [
            self.pretrain_iterations.to_string(),
            self.pretrain_batch.to_string(),
            self.lr_initial.to_string(),
            self.lr_drop_at.to_string(),
            self.lr_drop_factor.to_string(),
            self.adv_iterations.to_string(),
            self.lambda.to_string(),
            self.k_d.to_string(),
            self.d_batch.to_string(),
            self.k_g.to_string(),
            self.g_batch.to_string(),
            self.adv_lr_g.to_string(),
            self.adv_lr_d.to_string(),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            join_list(&self.loss_weights),
            self.base_filters.to_string(),
            self.encoder_levels.to_string(),
            self.leaky_alpha.to_string(),
            self.d_base_filters.to_string(),
            self.d_conv_levels.to_string(),
            self.d_condition_on_image.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    /// Config text with keys in declaration order.
    pub fn render(&self) -> String {
        let kv = self.to_kv();
        KEYS.iter().map(|k| format!("{k} = {}\n", kv[*k])).collect()
    }

    /// Parses config text; absent keys keep their defaults, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut c = Self::default();
        for (k, v) in &kv {
            match k.as_str() {
                "pretrain_iterations" => c.pretrain_iterations = parse(k, v)?,
                "pretrain_batch" => c.pretrain_batch = parse(k, v)?,
                "lr_initial" => c.lr_initial = parse(k, v)?,
                "lr_drop_at" => c.lr_drop_at = parse(k, v)?,
                "lr_drop_factor" => c.lr_drop_factor = parse(k, v)?,
                "adv_iterations" => c.adv_iterations = parse(k, v)?,
                "lambda" => c.lambda = parse(k, v)?,
                "k_D" => c.k_d = parse(k, v)?,
                "d_batch" => c.d_batch = parse(k, v)?,
                "k_G" => c.k_g = parse(k, v)?,
                "g_batch" => c.g_batch = parse(k, v)?,
                "adv_lr_g" => c.adv_lr_g = parse(k, v)?,
                "adv_lr_d" => c.adv_lr_d = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse(k, v)?,
                "loss_weights" => c.loss_weights = kv_list(&kv, k)?,
                "base_filters" => c.base_filters = parse(k, v)?,
                "encoder_levels" => c.encoder_levels = parse(k, v)?,
                "leaky_alpha" => c.leaky_alpha = parse(k, v)?,
                "d_base_filters" => c.d_base_filters = parse(k, v)?,
                "d_conv_levels" => c.d_conv_levels = parse(k, v)?,
                "d_condition_on_image" => c.d_condition_on_image = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, render_kv(&self.to_kv()))?;
        Ok(())
    }
}

/// Learning rate for pretraining step `iteration` (0-based).
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> f64 {
    if iteration < config.lr_drop_at {
        config.lr_initial
    } else {
        config.lr_initial / config.lr_drop_factor
    }
}
