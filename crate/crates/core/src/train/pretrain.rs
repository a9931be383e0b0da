use std::path::Path;
use std::time::Instant;

use super::{as_divergence, check_dataset, lr_schedule, save_if, sgd_step, stack_volumes, streams, Phase, TrainConfig, TrainLog, TrainLogRecord, PRETRAIN_CHECKPOINT};
use crate::di2in::{build_di2in, forward_generator, total_loss, Di2in};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::phantom::{derive_seed, BatchSampler, Case};
use crate::tensor::Tape;

/// Trains a freshly initialized generator on the weighted multi-branch loss
/// for `pretrain_iterations` SGD steps. With `out` set, the final weights go
/// to [`PRETRAIN_CHECKPOINT`] and intermediate ones every `checkpoint_every`
/// steps. On divergence the last good weights are written and
/// [`Error::Diverged`] is returned.
pub fn pretrain_generator(config: &TrainConfig, cases: &[Case], out: Option<&Path>, log: &mut TrainLog) -> Result<Di2in> {
    config.validate()?;
    check_dataset(cases)?;
    let spec = config.generator_spec()?;
    spec.check_input(&[1, 1, cases[0].image.extents[0], cases[0].image.extents[1], cases[0].image.extents[2]])?;
    let mut net = build_di2in(&spec, derive_seed(config.seed, streams::GENERATOR_INIT))?;
    let mut sampler = BatchSampler::new((0..cases.len()).collect(), config.pretrain_batch, derive_seed(config.seed, streams::PRETRAIN_BATCHES))?;

    for it in 0..config.pretrain_iterations {
        let start = Instant::now();
        let ids = sampler.next_batch();
        let lr = lr_schedule(it, config);
        let snapshot = net.graph.store.clone();
        match step(&mut net, cases, &ids, lr) {
            Ok(loss) => log.push(TrainLogRecord {
                iteration: it,
                phase: Phase::Pretrain,
                loss,
                lr,
                d_on_gt_mean: None,
                d_on_pred_mean: None,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })?,
            Err(e) => {
                let e = as_divergence(e, Phase::Pretrain, it);
                if matches!(e, Error::Diverged(_)) {
                    net.graph.store = snapshot;
                    save_if(out, PRETRAIN_CHECKPOINT, &net.to_checkpoint())?;
                }
                return Err(e);
            }
        }
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            save_if(out, &format!("generator_pretrain_step{}.vxck", it + 1), &net.to_checkpoint())?;
        }
    }
    save_if(out, PRETRAIN_CHECKPOINT, &net.to_checkpoint())?;
    Ok(net)
}

fn step(net: &mut Di2in, cases: &[Case], ids: &[usize], lr: f64) -> Result<f64> {
    let images = stack_volumes(cases, ids, |c| &c.image)?;
    let labels = stack_volumes(cases, ids, |c| &c.label)?;
    let mut tape = Tape::new();
    let out = forward_generator(net, &mut tape, &images, Mode::Train)?;
    let loss = total_loss(&mut tape, &out, &labels, &net.spec)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    net.graph.store.accumulate(&grads)?;
    sgd_step(&mut net.graph.store, lr)?;
    Ok(value)
}
