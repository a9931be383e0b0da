use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use super::{
    as_divergence, check_dataset, save_if, sgd_step, stack_volumes, streams, Phase, TrainConfig, TrainLog, TrainLogRecord,
    ADV_GENERATOR_CHECKPOINT, DISCRIMINATOR_CHECKPOINT,
};
use crate::adversary::{build_discriminator, generator_adversarial_loss, Discriminator};
use crate::di2in::{forward_generator, total_loss, Di2in};
use crate::error::{contract, Error, Result};
use crate::graph::Mode;
use crate::phantom::{derive_seed, BatchSampler, Case};
use crate::tensor::{Tape, Tensor};

/// Both discriminator means within this distance of 0.5 count as collapsed.
pub const COLLAPSE_BAND: f64 = 1e-3;
/// Consecutive collapsed outer iterations that trigger a warning.
pub const COLLAPSE_STREAK: usize = 10;

pub struct AdversarialOutcome {
    pub generator: Di2in,
    pub discriminator: Discriminator,
}

/// Alternating training: each outer iteration runs `k_D` discriminator steps
/// on ground-truth versus (detached) predicted maps, then `k_G` generator
/// steps on `seg_loss − λ·mean(log D(G(x)))` with the discriminator frozen.
/// The discriminator starts from fresh weights.
pub fn adversarial_train(
    config: &TrainConfig,
    generator: Di2in,
    cases: &[Case],
    out: Option<&Path>,
    log: &mut TrainLog,
) -> Result<AdversarialOutcome> {
    config.validate()?;
    check_dataset(cases)?;
    let mut g = generator;
    let mut d = build_discriminator(&config.discriminator_spec(), derive_seed(config.seed, streams::DISCRIMINATOR_INIT))?;
    let ids: Vec<usize> = (0..cases.len()).collect();
    let mut d_sampler = BatchSampler::new(ids.clone(), config.d_batch, derive_seed(config.seed, streams::D_BATCHES))?;
    let mut g_sampler = BatchSampler::new(ids, config.g_batch, derive_seed(config.seed, streams::G_BATCHES))?;

    let (mut d_steps, mut g_steps, mut streak) = (0usize, 0usize, 0usize);
    for outer in 0..config.adv_iterations {
        // The generator is fixed during the discriminator phase, so each
        // case's prediction is computed once per outer iteration.
        let mut predictions: HashMap<usize, Tensor> = HashMap::new();
        let g_sum = g.graph.store.checksum();
        let mut last = (0.5, 0.5);
        for _ in 0..config.k_d {
            let start = Instant::now();
            let batch = d_sampler.next_batch();
            let snapshot = d.graph.store.clone();
            let stats = discriminator_step(&mut g, &mut d, cases, &batch, &mut predictions, config.adv_lr_d).map_err(|e| as_divergence(e, Phase::AdvD, d_steps));
            let stats = match stats {
                Ok(s) => s,
                Err(e) => {
                    d.graph.store = snapshot;
                    return Err(abort(e, &g, &d, out));
                }
            };
            last = (stats.d_on_gt_mean, stats.d_on_pred_mean);
            log.push(TrainLogRecord {
                iteration: d_steps,
                phase: Phase::AdvD,
                loss: stats.loss,
                lr: config.adv_lr_d,
                d_on_gt_mean: Some(stats.d_on_gt_mean),
                d_on_pred_mean: Some(stats.d_on_pred_mean),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?;
            d_steps += 1;
        }
        if g.graph.store.checksum() != g_sum {
            return contract("generator changed during the discriminator phase");
        }

        let d_sum = d.graph.store.checksum();
        for _ in 0..config.k_g {
            let start = Instant::now();
            let batch = g_sampler.next_batch();
            let snapshot = g.graph.store.clone();
            let stats = generator_step(&mut g, &mut d, cases, &batch, config.lambda, config.adv_lr_g).map_err(|e| as_divergence(e, Phase::AdvG, g_steps));
            let stats = match stats {
                Ok(s) => s,
                Err(e) => {
                    g.graph.store = snapshot;
                    return Err(abort(e, &g, &d, out));
                }
            };
            log.push(TrainLogRecord {
                iteration: g_steps,
                phase: Phase::AdvG,
                loss: stats.loss,
                lr: config.adv_lr_g,
                d_on_gt_mean: None,
                d_on_pred_mean: Some(stats.d_on_pred_mean),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?;
            g_steps += 1;
        }
        if d.graph.store.checksum() != d_sum {
            return contract("discriminator changed during the generator phase");
        }

        if (last.0 - 0.5).abs() < COLLAPSE_BAND && (last.1 - 0.5).abs() < COLLAPSE_BAND {
            streak += 1;
            if streak == COLLAPSE_STREAK {
                log.warn(format!(
                    "discriminator output stuck at 0.5 for {COLLAPSE_STREAK} outer iterations (ending at {})",
                    outer + 1
                ));
                streak = 0;
            }
        } else {
            streak = 0;
        }
        // θ^G_0 ← θ^G_1: training continues from the updated weights; snapshot on schedule.
        if config.checkpoint_every > 0 && (outer + 1) % config.checkpoint_every == 0 {
            save_if(out, &format!("generator_adv_iter{}.vxck", outer + 1), &g.to_checkpoint())?;
        }
    }
    save_if(out, ADV_GENERATOR_CHECKPOINT, &g.to_checkpoint())?;
    save_if(out, DISCRIMINATOR_CHECKPOINT, &d.to_checkpoint())?;
    Ok(AdversarialOutcome { generator: g, discriminator: d })
}

fn abort(e: Error, g: &Di2in, d: &Discriminator, out: Option<&Path>) -> Error {
    if matches!(e, Error::Diverged(_)) {
        if let Err(io) = save_if(out, ADV_GENERATOR_CHECKPOINT, &g.to_checkpoint()).and_then(|_| save_if(out, DISCRIMINATOR_CHECKPOINT, &d.to_checkpoint())) {
            return io;
        }
    }
    e
}

/// Values observed during one adversarial step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub d_on_gt_mean: f64,
    pub d_on_pred_mean: f64,
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

/// Discriminator input for a batch of maps, with the image channel prepended
/// when the discriminator is conditioned on it.
fn discriminator_input(d: &Discriminator, tape: &mut Tape, images: &Tensor, maps: crate::tensor::Var) -> Result<crate::tensor::Var> {
    if d.spec.condition_on_image {
        let img = tape.constant(images.clone())?;
        tape.concat(img, maps)
    } else {
        Ok(maps)
    }
}

/// One discriminator update on `ids`: ground-truth maps (target 1) and
/// detached inference-mode predictions (target 0) share a single batch, and
/// `l_D = bce(d_gt, 1) + bce(d_pred, 0)` is evaluated as twice the BCE over
/// the joined batch. `cache` memoizes predictions per case.
pub fn discriminator_step(
    g: &mut Di2in,
    d: &mut Discriminator,
    cases: &[Case],
    ids: &[usize],
    cache: &mut HashMap<usize, Tensor>,
    lr: f64,
) -> Result<StepStats> {
    let missing: Vec<usize> = ids.iter().copied().filter(|i| !cache.contains_key(i)).collect();
    if !missing.is_empty() {
        let images = stack_volumes(cases, &missing, |c| &c.image)?;
        let probs = g.predict(&images)?;
        for (k, &i) in missing.iter().enumerate() {
            cache.insert(i, probs.batch_item(k)?);
        }
    }
    let n = ids.len();
    let gt = stack_volumes(cases, ids, |c| &c.label)?;
    let preds: Vec<&Tensor> = ids.iter().map(|i| &cache[i]).collect();
    let pred = Tensor::stack_batch(&preds)?;
    let maps = Tensor::stack_batch(&[&gt, &pred])?;
    let images = stack_volumes(cases, &[ids, ids].concat(), |c| &c.image)?;

    let mut tape = Tape::new();
    let x = tape.constant(maps)?;
    let x = discriminator_input(d, &mut tape, &images, x)?;
    let scores = d.forward(&mut tape, x, Mode::Train, true)?;
    let targets = Tensor::from_fn([2 * n], |i| if i < n { 1.0 } else { 0.0 });
    let bce = tape.bce(scores, &targets)?;
    let loss = tape.weighted_sum(&[(bce, 2.0)])?;
    let s = tape.value(scores).data();
    let stats = StepStats {
        loss: tape.scalar(loss)?,
        d_on_gt_mean: s[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64,
        d_on_pred_mean: s[n..].iter().map(|&v| v as f64).sum::<f64>() / n as f64,
    };
    let grads = tape.backward(loss)?;
    d.graph.store.accumulate(&grads)?;
    sgd_step(&mut d.graph.store, lr)?;
    Ok(stats)
}

/// One generator update on `ids` minimizing `seg_loss − λ·mean(log D(G(x)))`.
/// The discriminator runs in inference mode with its weights entered as
/// constants, so it receives no gradient and its statistics stay fixed.
pub fn generator_step(g: &mut Di2in, d: &mut Discriminator, cases: &[Case], ids: &[usize], lambda: f32, lr: f64) -> Result<StepStats> {
    let images = stack_volumes(cases, ids, |c| &c.image)?;
    let labels = stack_volumes(cases, ids, |c| &c.label)?;
    let mut tape = Tape::new();
    let out = forward_generator(g, &mut tape, &images, Mode::Train)?;
    let seg = total_loss(&mut tape, &out, &labels, &g.spec)?;
    let x = discriminator_input(d, &mut tape, &images, out.final_prob)?;
    let scores = d.forward(&mut tape, x, Mode::Infer, false)?;
    let loss = generator_adversarial_loss(&mut tape, seg, scores, lambda)?;
    let stats = StepStats {
        loss: tape.scalar(loss)?,
        d_on_gt_mean: f64::NAN,
        d_on_pred_mean: mean(tape.value(scores)),
    };
    let grads = tape.backward(loss)?;
    g.graph.store.accumulate(&grads)?;
    d.graph.store.accumulate(&grads)?;
    if d.graph.store.iter().any(|(_, t)| t.grad().is_some_and(|gr| gr.iter().any(|&v| v != 0.0))) {
        return contract("discriminator received gradient in the generator phase");
    }
    sgd_step(&mut g.graph.store, lr)?;
    Ok(stats)
}
