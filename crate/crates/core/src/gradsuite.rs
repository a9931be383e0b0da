//! Finite-difference audit of every differentiable primitive and of a tiny
//! composed generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::di2in::{build_di2in, total_loss, Di2inSpec};
use crate::error::Result;
use crate::graph::{Mode, ParamId};
use crate::tensor::gradcheck::{check_gradients, FdOptions, FdReport};
use crate::tensor::{Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
pub const COMPOSED_TOLERANCE: f64 = 1e-2;

/// Names of the checks, primitives first.
pub const CHECK_NAMES: &[&str] = &[
    "conv3d_stride1",
    "conv3d_stride2",
    "upscale_x2",
    "upscale_x4",
    "leaky_relu",
    "batch_norm_train",
    "batch_norm_infer",
    "concat",
    "sigmoid",
    "bce",
    "weighted_sum",
    "global_avg_pool",
    "dense",
    "reshape",
    "di2in_tiny",
];

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Overrides both default tolerances.
    pub tolerance: Option<f64>,
    /// Scales the analytic gradient of the named check by 1.05. Test fixture
    /// for demonstrating that a wrong backward rule is caught.
    pub inject_fault: Option<String>,
    /// Skip the composed network check.
    pub primitives_only: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f32 = StandardNormal.sample(rng);
        v * scale
    })
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.2f32..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Checks `build` (mapping leaves to an output) through the objective
/// `Σ c·out` with fixed random coefficients.
fn check_op<F>(
    name: &str,
    mut inputs: Vec<Tensor>,
    build: F,
    opts: &FdOptions,
    fault: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut coeff: Option<Tensor> = None;
    let mut coeff_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let objective = |ts: &[Tensor], want: bool| -> Result<(f64, Vec<Option<Vec<f32>>>)> {
        let mut tape = Tape::new();
        let vars = ts.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let c = coeff.get_or_insert_with(|| normal(&mut coeff_rng, tape.value(out).shape(), 1.0));
        let loss = tape.dot(out, c)?;
        let value = tape.scalar(loss)?;
        if !want {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let scale = if fault { 1.05 } else { 1.0 };
        let g = vars.iter().map(|&v| grads.wrt(v).map(|g| g.iter().map(|x| x * scale).collect())).collect();
        Ok((value, g))
    };
    check_gradients(name, &mut inputs, objective, opts, rng)
}

fn composed(opts: &FdOptions, fault: bool, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let spec = Di2inSpec::with_depth(2, 2);
    let mut net = build_di2in(&spec, rng.gen())?;
    let ids: Vec<ParamId> = net.graph.store.ids().collect();
    let input = normal(rng, &[1, 1, 16, 16, 16], 1.0);
    let label = Tensor::from_fn([1, 1, 16, 16, 16], |_| rng.gen_bool(0.3) as u8 as f32);
    let mut tensors = vec![input];
    tensors.extend(ids.iter().map(|&id| net.graph.store.get(id).clone()));
    // Leaky ReLU signs are frozen at the base point while probing; otherwise
    // nearly every probe straddles some kink and the difference quotient
    // mixes the slopes of neighbouring linear pieces.
    let mut kinks: Vec<Vec<bool>> = Vec::new();
    let objective = |ts: &[Tensor], want: bool| -> Result<(f64, Vec<Option<Vec<f32>>>)> {
        for (k, &id) in ids.iter().enumerate() {
            net.graph.store.get_mut(id).data_mut().copy_from_slice(ts[k + 1].data());
        }
        let mut tape = Tape::new();
        if want {
            tape.record_kinks();
        } else {
            tape.replay_kinks(kinks.clone());
        }
        let x = tape.leaf(ts[0].clone())?;
        let out = net.forward(&mut tape, x, Mode::Train, true)?;
        let loss = total_loss(&mut tape, &out, &label, &spec)?;
        let value = tape.scalar(loss)?;
        if !want {
            return Ok((value, Vec::new()));
        }
        kinks = tape.take_kinks();
        let grads = tape.backward(loss)?;
        let scale = if fault { 1.05 } else { 1.0 };
        let mut g: Vec<Option<Vec<f32>>> = vec![None; ts.len()];
        g[0] = grads.wrt(x).map(|v| v.to_vec());
        for (key, v) in grads.params() {
            g[key.index + 1] = Some(v.clone());
        }
        for v in g.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        Ok((value, g))
    };
    check_gradients("di2in_tiny", &mut tensors, objective, opts, rng)
}

/// Runs the suite; reports come back in [`CHECK_NAMES`] order.
pub fn run_suite(options: &SuiteOptions) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let prim = FdOptions {
        step: 5e-2,
        samples: 12,
        tolerance: options.tolerance.unwrap_or(PRIMITIVE_TOLERANCE),
        abs_floor: 1e-2,
    };
    let comp = FdOptions {
        step: 1e-2,
        samples: 10,
        tolerance: options.tolerance.unwrap_or(COMPOSED_TOLERANCE),
        abs_floor: 1e-3,
    };
    let fault = |name: &str| options.inject_fault.as_deref() == Some(name);
    let r = &mut rng;
    let mut out = Vec::new();

    let ins = vec![normal(r, &[2, 2, 5, 5, 5], 1.0), normal(r, &[3, 2, 3, 3, 3], 0.3), normal(r, &[3], 0.3)];
    out.push(check_op("conv3d_stride1", ins, |t, v| t.conv3d(v[0], v[1], v[2], 1), &prim, fault("conv3d_stride1"), r)?);
    let ins = vec![normal(r, &[1, 2, 6, 6, 6], 1.0), normal(r, &[2, 2, 3, 3, 3], 0.3), normal(r, &[2], 0.3)];
    out.push(check_op("conv3d_stride2", ins, |t, v| t.conv3d(v[0], v[1], v[2], 2), &prim, fault("conv3d_stride2"), r)?);
    let ins = vec![normal(r, &[1, 2, 3, 3, 3], 1.0)];
    out.push(check_op("upscale_x2", ins, |t, v| t.upscale(v[0], 2), &prim, fault("upscale_x2"), r)?);
    let ins = vec![normal(r, &[1, 1, 2, 3, 2], 1.0)];
    out.push(check_op("upscale_x4", ins, |t, v| t.upscale(v[0], 4), &prim, fault("upscale_x4"), r)?);
    let ins = vec![away_from_zero(r, &[2, 3, 2, 2, 2])];
    out.push(check_op("leaky_relu", ins, |t, v| t.leaky_relu(v[0], 0.01), &prim, fault("leaky_relu"), r)?);
    let ins = vec![normal(r, &[3, 2, 2, 2, 2], 1.0), normal(r, &[2], 1.0), normal(r, &[2], 1.0)];
    out.push(check_op(
        "batch_norm_train",
        ins,
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        &prim,
        fault("batch_norm_train"),
        r,
    )?);
    let (mean, var) = ([0.3f32, -0.2], [1.5f32, 0.7]);
    let ins = vec![normal(r, &[2, 2, 2, 2, 2], 1.0), normal(r, &[2], 1.0), normal(r, &[2], 1.0)];
    out.push(check_op(
        "batch_norm_infer",
        ins,
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0),
        &prim,
        fault("batch_norm_infer"),
        r,
    )?);
    let ins = vec![normal(r, &[2, 1, 2, 2, 2], 1.0), normal(r, &[2, 2, 2, 2, 2], 1.0)];
    out.push(check_op("concat", ins, |t, v| t.concat(v[0], v[1]), &prim, fault("concat"), r)?);
    let ins = vec![normal(r, &[2, 1, 2, 3, 2], 1.5)];
    out.push(check_op("sigmoid", ins, |t, v| t.sigmoid(v[0]), &prim, fault("sigmoid"), r)?);
    let target = Tensor::from_fn([2, 1, 2, 2, 2], |i| (i % 3 == 0) as u8 as f32);
    let ins = vec![Tensor::from_fn([2, 1, 2, 2, 2], |_| r.gen_range(0.15f32..0.85))];
    out.push(check_op("bce", ins, |t, v| t.bce(v[0], &target), &prim, fault("bce"), r)?);
    let ins = vec![normal(r, &[3], 1.0), normal(r, &[2, 2], 1.0)];
    out.push(check_op(
        "weighted_sum",
        ins,
        |t, v| {
            let a = t.sum(v[0])?;
            let b = t.sum(v[1])?;
            t.weighted_sum(&[(a, 0.7), (b, -1.3)])
        },
        &prim,
        fault("weighted_sum"),
        r,
    )?);
    let ins = vec![normal(r, &[2, 3, 2, 3, 2], 1.0)];
    out.push(check_op("global_avg_pool", ins, |t, v| t.global_avg_pool(v[0]), &prim, fault("global_avg_pool"), r)?);
    let ins = vec![normal(r, &[3, 4], 1.0), normal(r, &[2, 4], 0.5), normal(r, &[2], 0.5)];
    out.push(check_op("dense", ins, |t, v| t.dense(v[0], v[1], v[2]), &prim, fault("dense"), r)?);
    let ins = vec![normal(r, &[2, 1], 1.0)];
    out.push(check_op("reshape", ins, |t, v| t.reshape(v[0], &[2]), &prim, fault("reshape"), r)?);

    if !options.primitives_only {
        out.push(composed(&comp, fault("di2in_tiny"), r)?);
    }
    Ok(out)
}
