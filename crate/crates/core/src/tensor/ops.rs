//! Forward and backward kernels for the non-convolutional layers.

use super::Tensor;
use crate::error::{contract, Result};

/// Probability clamp applied before every logarithm in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

#[cfg(test)]
pub(crate) fn leaky_relu(x: &Tensor, alpha: f32) -> Result<Tensor> {
    leaky_relu_with(x, alpha, None)
}

/// Leaky ReLU; `pattern`, when given, selects the identity branch per element
/// in place of `x >= 0`.
pub(crate) fn leaky_relu_with(x: &Tensor, alpha: f32, pattern: Option<&[bool]>) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return contract(format!("leaky ReLU slope must lie in (0,1), got {alpha}"));
    }
    let data = x.data().iter().enumerate().map(|(i, &v)| if positive(v, i, pattern) { v } else { alpha * v }).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn positive(v: f32, i: usize, pattern: Option<&[bool]>) -> bool {
    pattern.map_or(v >= 0.0, |p| p[i])
}

#[cfg(test)]
pub(crate) fn leaky_relu_backward(x: &Tensor, g: &[f32], alpha: f32) -> Vec<f32> {
    leaky_relu_backward_with(x, g, alpha, None)
}

pub(crate) fn leaky_relu_backward_with(x: &Tensor, g: &[f32], alpha: f32, pattern: Option<&[bool]>) -> Vec<f32> {
    x.data().iter().zip(g).enumerate().map(|(i, (&v, &g))| if positive(v, i, pattern) { g } else { alpha * g }).collect()
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            let s = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) };
            s as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn sigmoid_backward(y: &Tensor, g: &[f32]) -> Vec<f32> {
    y.data()
        .iter()
        .zip(g)
        .map(|(&y, &g)| (g as f64 * y as f64 * (1.0 - y as f64)) as f32)
        .collect()
}

fn check_binary(target: &Tensor) -> Result<()> {
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return contract(format!("BCE target must be 0 or 1, found {v}"));
    }
    Ok(())
}

/// Mean voxel-wise binary cross entropy with probabilities clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub(crate) fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return contract(format!(
            "BCE prediction shape {:?} differs from target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    if pred.is_empty() {
        return contract("BCE of an empty tensor");
    }
    check_binary(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            if t == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`bce`]; zero where the clamp is active.
pub(crate) fn bce_backward(pred: &Tensor, target: &Tensor, upstream: f64) -> Vec<f32> {
    let scale = upstream / pred.len() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p as f64;
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else if t == 1.0 {
                (-scale / p) as f32
            } else {
                (scale / (1.0 - p)) as f32
            }
        })
        .collect()
}

/// Per-channel layout of a `[N, C, ...]` tensor.
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return contract(format!("batch norm needs [N, C, ...], got {:?}", x.shape()));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    Ok((n, c, x.shape()[2..].iter().product()))
}

/// Saved state of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnForward {
    pub out: Tensor,
    pub x_hat: Vec<f32>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<f64>,
}

/// Normalizes with either batch statistics (`stats = None`) or the given
/// per-channel `(mean, var)`.
pub(crate) fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: Option<(&[f32], &[f32])>,
    eps: f64,
) -> Result<BnForward> {
    let (n, c, s) = channel_layout(x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return contract(format!("batch norm affine parameters must have shape [{c}]"));
    }
    let count = n * s;
    if stats.is_none() && count < 2 {
        return contract(format!(
            "batch norm in train mode needs at least 2 values per channel, got {count}"
        ));
    }
    let mut out = vec![0f32; x.len()];
    let mut x_hat = vec![0f32; x.len()];
    let mut inv_std = vec![0f64; c];
    let mut batch_mean = vec![0f64; c];
    let mut batch_var = vec![0f64; c];
    let xd = x.data();
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch] as f64, v[ch] as f64),
            None => {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += xd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xd[(b * c + ch) * s..(b * c + ch + 1) * s]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                batch_var[ch] = sq / (count - 1) as f64;
                (mean, sq / count as f64)
            }
        };
        batch_mean[ch] = mean;
        let istd = 1.0 / (var.max(0.0) + eps).sqrt();
        inv_std[ch] = istd;
        let (gm, bt) = (gamma.data()[ch] as f64, beta.data()[ch] as f64);
        for b in 0..n {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for i in range {
                let xh = (xd[i] as f64 - mean) * istd;
                x_hat[i] = xh as f32;
                out[i] = (gm * xh + bt) as f32;
            }
        }
    }
    Ok(BnForward { out: Tensor::new(x.shape().to_vec(), out)?, x_hat, inv_std, batch_mean, batch_var })
}

/// Returns `(d_input, d_gamma, d_beta)`. In train mode the input gradient
/// includes the dependence of the batch statistics on the input.
pub(crate) fn batch_norm_backward(
    shape: &[usize],
    g: &[f32],
    x_hat: &[f32],
    inv_std: &[f64],
    gamma: &Tensor,
    train: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let m = (n * s) as f64;
    let mut dx = vec![0f32; g.len()];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0f64, 0f64);
        for b in 0..n {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                sg += g[i] as f64;
                sgx += g[i] as f64 * x_hat[i] as f64;
            }
        }
        dgamma[ch] = sgx as f32;
        dbeta[ch] = sg as f32;
        let k = gamma.data()[ch] as f64 * inv_std[ch];
        for b in 0..n {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                let v = if train {
                    k * (g[i] as f64 - sg / m - x_hat[i] as f64 * sgx / m)
                } else {
                    k * g[i] as f64
                };
                dx[i] = v as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel concatenation of two `[N, C, ...]` tensors.
pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || a.rank() != b.rank() || a.shape()[0] != b.shape()[0] || a.shape()[2..] != b.shape()[2..] {
        return contract(format!(
            "cannot concatenate channels of {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let n = a.shape()[0];
    let (ea, eb) = (a.len() / n, b.len() / n);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ea..(i + 1) * ea]);
        data.extend_from_slice(&b.data()[i * eb..(i + 1) * eb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    Tensor::new(shape, data)
}

pub(crate) fn concat_backward(g: &[f32], n: usize, ea: usize, eb: usize) -> (Vec<f32>, Vec<f32>) {
    let mut ga = Vec::with_capacity(n * ea);
    let mut gb = Vec::with_capacity(n * eb);
    for i in 0..n {
        let row = &g[i * (ea + eb)..(i + 1) * (ea + eb)];
        ga.extend_from_slice(&row[..ea]);
        gb.extend_from_slice(&row[ea..]);
    }
    (ga, gb)
}

/// Mean over all axes after the first two: `[N, C, ...] -> [N, C]`.
pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return contract(format!("global pooling needs spatial axes, got {:?}", x.shape()));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let data = x
        .data()
        .chunks(s)
        .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / s as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// `[N, I] · Wᵀ + b` with `W: [O, I]`.
pub(crate) fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, i, o) = match (x.shape(), w.shape(), b.shape()) {
        (&[n, i], &[o, wi], &[bo]) if wi == i && bo == o => (n, i, o),
        _ => {
            return contract(format!(
                "dense shapes incompatible: x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ))
        }
    };
    let mut out = vec![0f32; n * o];
    for r in 0..n {
        let xr = &x.data()[r * i..(r + 1) * i];
        for k in 0..o {
            let wr = &w.data()[k * i..(k + 1) * i];
            let acc: f64 = xr.iter().zip(wr).map(|(&a, &b)| a as f64 * b as f64).sum();
            out[r * o + k] = (acc + b.data()[k] as f64) as f32;
        }
    }
    Tensor::new(vec![n, o], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new([3], vec![0.0, 5.0, -2.0]).unwrap();
        let y = leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 5.0);
        assert!((y.data()[2] + 0.2).abs() < 1e-7);
        assert_eq!(leaky_relu_backward(&x, &[1.0; 3], 0.1), vec![1.0, 1.0, 0.1]);
        assert!(leaky_relu(&x, 0.0).is_err());
        assert!(leaky_relu(&x, 1.0).is_err());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let p = Tensor::full([2, 1, 2, 2, 2], 0.5);
        let t = Tensor::from_fn([2, 1, 2, 2, 2], |i| (i % 3 == 0) as u8 as f32);
        assert!((bce(&p, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_clamped_zero() {
        let t = Tensor::from_fn([8], |i| (i % 2) as f32);
        let loss = bce(&t, &t).unwrap();
        assert!(loss <= -(1.0 - 1e-7f64).ln() + 1e-15);
        assert!(loss < 1e-6);
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let p = Tensor::full([2], 0.5);
        let t = Tensor::new([2], vec![0.0, 0.3]).unwrap();
        assert!(bce(&p, &t).is_err());
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = Tensor::from_fn([2, 3, 4, 4, 4], |i| ((i * 7919) % 101) as f32 * 0.13 - 3.0);
        let bn = batch_norm(&x, &Tensor::full([3], 1.0), &Tensor::zeros([3]), None, 1e-5).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| bn.out.data()[(b * 3 + ch) * 64..(b * 3 + ch + 1) * 64].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let x = Tensor::from_fn([2, 2, 3], |i| i as f32);
        let beta = Tensor::new([2], vec![0.7, -0.2]).unwrap();
        let bn = batch_norm(&x, &Tensor::zeros([2]), &beta, None, 1e-5).unwrap();
        for (i, v) in bn.out.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 3) % 2]);
        }
    }

    #[test]
    fn batch_norm_constant_channel_uses_epsilon_floor() {
        let x = Tensor::full([1, 1, 4], 3.0);
        let bn = batch_norm(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1]), None, 1e-5).unwrap();
        assert!(bn.out.is_finite());
        assert!(bn.out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let x = Tensor::full([1, 2, 1, 1, 1], 1.0);
        assert!(batch_norm(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), None, 1e-5).is_err());
    }

    #[test]
    fn concat_splits_back() {
        let a = Tensor::from_fn([2, 2, 3], |i| i as f32);
        let b = Tensor::from_fn([2, 3, 3], |i| 100.0 + i as f32);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3]);
        let (ga, gb) = concat_backward(c.data(), 2, 6, 9);
        assert_eq!(ga, a.data());
        assert_eq!(gb, b.data());
        assert!(concat_channels(&a, &Tensor::zeros([2, 3, 4])).is_err());
    }
}
