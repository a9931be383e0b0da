//! Generator pretraining and the alternating adversarial loop.

mod adversarial;
mod config;
mod log;
mod pretrain;

pub use adversarial::{adversarial_train, discriminator_step, generator_step, AdversarialOutcome, StepStats, COLLAPSE_BAND, COLLAPSE_STREAK};
pub use config::{lr_schedule, TrainConfig};
pub use log::{parse_log, Phase, TrainLog, TrainLogRecord, LOG_HEADER};
pub use pretrain::pretrain_generator;

use std::path::Path;

use crate::di2in::Di2in;
use crate::error::{contract, Error, Result};
use crate::graph::ParamStore;
use crate::metrics::{binarize, cohort_report, evaluate_case, MetricsReport};
use crate::phantom::{Case, VolumeGrid, VolumeKind};
use crate::tensor::Tensor;

pub const PRETRAIN_CHECKPOINT: &str = "generator_pretrain.vxck";
pub const ADV_GENERATOR_CHECKPOINT: &str = "generator_adv.vxck";
pub const DISCRIMINATOR_CHECKPOINT: &str = "discriminator.vxck";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const ADV_LOG: &str = "advtrain_log.tsv";

/// Seed streams derived from the config seed.
pub(crate) mod streams {
    pub const GENERATOR_INIT: u64 = 1;
    pub const PRETRAIN_BATCHES: u64 = 2;
    pub const DISCRIMINATOR_INIT: u64 = 3;
    pub const D_BATCHES: u64 = 4;
    pub const G_BATCHES: u64 = 5;
}

/// Plain SGD: `p ← p − lr·g` for every parameter, then gradients are reset.
/// If any gradient is non-finite nothing is updated and an error is returned.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return contract(format!("learning rate must be finite and non-negative, got {lr}"));
    }
    let bad = store
        .iter()
        .find(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        .map(|(name, _)| name.to_string());
    if let Some(name) = bad {
        store.zero_grad();
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    for (_, t) in store.iter_mut() {
        let Some(g) = t.grad().map(<[f32]>::to_vec) else { continue };
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p = (*p as f64 - lr * g as f64) as f32;
        }
    }
    store.zero_grad();
    Ok(())
}

/// `[N, 1, D, H, W]` batch of one volume per selected case.
pub(crate) fn stack_volumes(cases: &[Case], ids: &[usize], pick: impl Fn(&Case) -> &VolumeGrid) -> Result<Tensor> {
    let items: Vec<Tensor> = ids.iter().map(|&i| pick(&cases[i]).to_tensor()).collect();
    Tensor::stack_batch(&items.iter().collect::<Vec<_>>())
}

pub(crate) fn check_dataset(cases: &[Case]) -> Result<()> {
    if cases.is_empty() {
        return contract("training needs a nonempty dataset");
    }
    let ext = cases[0].image.extents;
    for c in cases {
        if c.image.extents != ext || c.label.extents != ext {
            return contract(format!("case {} has extents {:?}, expected {ext:?}", c.id, c.image.extents));
        }
    }
    Ok(())
}

pub(crate) fn save_if(dir: Option<&Path>, name: &str, ck: &crate::checkpoint::RawCheckpoint) -> Result<()> {
    match dir {
        Some(d) => ck.save(&d.join(name)),
        None => Ok(()),
    }
}

/// Predicts every case in inference mode (`batch` cases per pass), binarizes
/// at `threshold`, and scores against the labels.
pub fn evaluate_generator(g: &mut Di2in, cases: &[Case], threshold: f32, batch: usize) -> Result<MetricsReport> {
    let mut entries = Vec::with_capacity(cases.len());
    let ids: Vec<usize> = (0..cases.len()).collect();
    for chunk in ids.chunks(batch.max(1)) {
        let probs = g.predict(&stack_volumes(cases, chunk, |c| &c.image)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let c = &cases[i];
            let prob = VolumeGrid::from_tensor(&probs.batch_item(k)?, VolumeKind::Image, &c.image)?;
            entries.push(evaluate_case(&c.id, &binarize(&prob, threshold)?, &c.label)?);
        }
    }
    cohort_report(&entries)
}

/// Maps numeric failures inside a step onto a divergence error.
pub(crate) fn as_divergence(e: Error, phase: Phase, iteration: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("{phase} step {iteration}: non-finite {what}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full([1], value));
        s.get_mut(id).accumulate_grad(&[grad]).unwrap();
        s
    }

    #[test]
    fn scalar_step() {
        let mut s = one_param(1.0, 2.0);
        sgd_step(&mut s, 0.1).unwrap();
        let (_, t) = s.iter().next().unwrap();
        assert!((t.data()[0] - 0.8).abs() < 1e-7);
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_lr_is_null_step() {
        let mut s = one_param(1.25, 3.0);
        sgd_step(&mut s, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0], 1.25);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = one_param(1.0, f32::NAN);
        assert!(matches!(sgd_step(&mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(s.iter().next().unwrap().1.data()[0], 1.0);
    }
}
