//! Separable linear interpolation along the three spatial axes.

use super::Tensor;
use crate::error::{contract, Result};

/// Upscale factors accepted by [`upscale_forward`].
pub const SUPPORTED_UPSCALE_FACTORS: [usize; 4] = [1, 2, 4, 16];

/// Per-output-sample linear interpolation weights along one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTable {
    pub(crate) src_len: usize,
    pub(crate) lo: Vec<usize>,
    pub(crate) hi: Vec<usize>,
    pub(crate) frac: Vec<f64>,
}

impl AxisTable {
    /// Maps continuous source coordinates (in source-index units) to weights,
    /// clamping to the valid range.
    pub(crate) fn from_positions(src_len: usize, positions: impl Iterator<Item = f64>) -> Self {
        let mut t = Self { src_len, lo: Vec::new(), hi: Vec::new(), frac: Vec::new() };
        let last = src_len.saturating_sub(1);
        for p in positions {
            let p = p.clamp(0.0, last as f64);
            let lo = (p.floor() as usize).min(last.saturating_sub(1));
            let hi = (lo + 1).min(last);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(if hi == lo { 0.0 } else { p - lo as f64 });
        }
        t
    }

    /// Align-corners mapping of `src_len` samples onto `dst_len` samples:
    /// the first and last samples coincide.
    pub(crate) fn align_corners(src_len: usize, dst_len: usize) -> Self {
        let scale = if dst_len > 1 { (src_len - 1) as f64 / (dst_len - 1) as f64 } else { 0.0 };
        Self::from_positions(src_len, (0..dst_len).map(|i| i as f64 * scale))
    }

    pub(crate) fn dst_len(&self) -> usize {
        self.lo.len()
    }
}

/// Interpolates a buffer viewed as `[outer, src_len, inner]` along its middle axis.
pub(crate) fn interp_axis(x: &[f64], outer: usize, inner: usize, t: &AxisTable) -> Vec<f64> {
    let (n, m) = (t.src_len, t.dst_len());
    let mut out = vec![0f64; outer * m * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * m * inner..(o + 1) * m * inner];
        for i in 0..m {
            let (a, b, w) = (t.lo[i] * inner, t.hi[i] * inner, t.frac[i]);
            for r in 0..inner {
                let (va, vb) = (src[a + r], src[b + r]);
                dst[i * inner + r] = va + w * (vb - va);
            }
        }
    }
    out
}

/// Adjoint of [`interp_axis`].
pub(crate) fn interp_axis_adjoint(g: &[f64], outer: usize, inner: usize, t: &AxisTable) -> Vec<f64> {
    let (n, m) = (t.src_len, t.dst_len());
    let mut out = vec![0f64; outer * n * inner];
    for o in 0..outer {
        let src = &g[o * m * inner..(o + 1) * m * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..m {
            let (a, b, w) = (t.lo[i] * inner, t.hi[i] * inner, t.frac[i]);
            for r in 0..inner {
                let v = src[i * inner + r];
                dst[a + r] += (1.0 - w) * v;
                dst[b + r] += w * v;
            }
        }
    }
    out
}

/// Applies one table per spatial axis (depth, height, width) to a buffer
/// shaped `[lead, d, h, w]`.
pub(crate) fn interp_volume(x: &[f64], lead: usize, tables: &[AxisTable; 3]) -> Vec<f64> {
    let [td, th, tw] = tables;
    let (d, h) = (td.src_len, th.src_len);
    let (md, mh, mw) = (td.dst_len(), th.dst_len(), tw.dst_len());
    let a = interp_axis(x, lead * d * h, 1, tw);
    let b = interp_axis(&a, lead * d, mw, th);
    let out = interp_axis(&b, lead, mh * mw, td);
    debug_assert_eq!(out.len(), lead * md * mh * mw);
    out
}

fn check_upscale(input: &Tensor, factor: usize) -> Result<[usize; 5]> {
    let dims = input.dims5()?;
    if !SUPPORTED_UPSCALE_FACTORS.contains(&factor) {
        return contract(format!(
            "upscale factor {factor} not in supported set {SUPPORTED_UPSCALE_FACTORS:?}"
        ));
    }
    Ok(dims)
}

fn upscale_tables(d: usize, h: usize, w: usize, factor: usize) -> [AxisTable; 3] {
    [d, h, w].map(|e| AxisTable::align_corners(e, e * factor))
}

/// Trilinear upscale by an integer factor with align-corners semantics.
pub fn upscale_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, d, h, w] = check_upscale(input, factor)?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let y = interp_volume(&x, n * c, &upscale_tables(d, h, w, factor));
    Tensor::new(
        vec![n, c, d * factor, h * factor, w * factor],
        y.into_iter().map(|v| v as f32).collect(),
    )
}

/// Gradient of [`upscale_forward`] with respect to its input.
pub fn upscale_backward(input_shape: &[usize], grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape.to_vec());
    let [n, c, d, h, w] = check_upscale(&probe, factor)?;
    if grad_out.shape() != [n, c, d * factor, h * factor, w * factor] {
        return contract("upscale upstream gradient has the wrong shape");
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let [td, th, tw] = upscale_tables(d, h, w, factor);
    let (mh, mw) = (h * factor, w * factor);
    let g: Vec<f64> = grad_out.data().iter().map(|&v| v as f64).collect();
    let a = interp_axis_adjoint(&g, n * c, mh * mw, &td);
    let b = interp_axis_adjoint(&a, n * c * d, mw, &th);
    let x = interp_axis_adjoint(&b, n * c * d * h, 1, &tw);
    Tensor::new(input_shape.to_vec(), x.into_iter().map(|v| v as f32).collect())
}
