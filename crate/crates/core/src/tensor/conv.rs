//! Direct 3×3×3 convolution with padding 1, lowered per chunk of output
//! voxels onto a double-precision GEMM. All reductions accumulate in f64 and
//! round to f32 once, on store.

use super::Tensor;
use crate::error::{contract, Result};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;
const PADDING: usize = 1;
/// Upper bound on f64 elements held by one im2col chunk in the backward pass,
/// where the chunking fixes the summation order of the weight gradient.
const CHUNK_ELEMS: usize = 1 << 20;
/// Forward chunk bound, sized to stay cache-resident. Forward sums run over
/// the kernel axis only, so the chunking does not affect the result.
const FORWARD_CHUNK_ELEMS: usize = 1 << 16;

/// Output extent along one axis for a 3-wide kernel with padding 1.
pub fn conv_output_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 * PADDING - KERNEL) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    f: usize,
    inp: [usize; 3],
    out: [usize; 3],
    stride: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Self> {
        let [n, c, d, h, w] = input.dims5()?;
        let [f, wc, kd, kh, kw] = weight.dims5()?;
        if (kd, kh, kw) != (KERNEL, KERNEL, KERNEL) {
            return contract(format!("conv3d kernel must be 3x3x3, got {kd}x{kh}x{kw}"));
        }
        if wc != c {
            return contract(format!("conv3d input has {c} channels but weight expects {wc}"));
        }
        if bias.shape() != [f] {
            return contract(format!("conv3d bias shape {:?}, expected [{f}]", bias.shape()));
        }
        if !(1..=2).contains(&stride) {
            return contract(format!("conv3d stride must be 1 or 2, got {stride}"));
        }
        if d == 0 || h == 0 || w == 0 {
            return contract("conv3d input has an empty spatial axis");
        }
        let out = [d, h, w].map(|e| conv_output_extent(e, stride));
        Ok(Self { n, c, f, inp: [d, h, w], out, stride })
    }

    fn k(&self) -> usize {
        self.c * TAPS
    }

    fn in_vox(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.out.iter().product()
    }

    /// Largest number of output voxels any row chunk holds.
    fn chunk(&self, limit: usize) -> usize {
        row_chunks(self, limit).map(|c| c.voxels(self)).max().unwrap_or(0)
    }
}

/// A run of whole output rows `(oz, oy)` processed together.
#[derive(Clone, Copy)]
struct RowChunk {
    r0: usize,
    r1: usize,
}

impl RowChunk {
    fn voxels(&self, g: &Geometry) -> usize {
        (self.r1 - self.r0) * g.out[2]
    }
}

/// Valid output x range `[lo, hi)` for kernel column `kx`: the input column
/// `ox * stride + kx - 1` must lie inside the volume.
fn x_span(g: &Geometry, kx: usize) -> (usize, usize) {
    let (w, s, wo) = (g.inp[2] as isize, g.stride as isize, g.out[2] as isize);
    let kx = kx as isize;
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if w - kx < 0 { 0 } else { ((w - kx) / s + 1).min(wo) };
    (lo.min(hi) as usize, hi.max(0) as usize)
}

/// Input row `(iz, iy)` feeding output row `r` at kernel offset `(kz, ky)`.
fn source_row(g: &Geometry, r: usize, kz: usize, ky: usize) -> Option<usize> {
    let (oz, oy) = (r / g.out[1], r % g.out[1]);
    let iz = (oz * g.stride + kz) as isize - PADDING as isize;
    let iy = (oy * g.stride + ky) as isize - PADDING as isize;
    let (d, h) = (g.inp[0] as isize, g.inp[1] as isize);
    (iz >= 0 && iz < d && iy >= 0 && iy < h).then(|| (iz * h + iy) as usize)
}

/// Fills `cols` (row-major, `k × voxels`) with the receptive fields of one
/// sample's chunk of output rows.
fn im2col(g: &Geometry, x: &[f32], chunk: RowChunk, cols: &mut [f64]) {
    let len = chunk.voxels(g);
    let (w, wo, s) = (g.inp[2], g.out[2], g.stride);
    for c in 0..g.c {
        let xc = &x[c * g.in_vox()..(c + 1) * g.in_vox()];
        for tap in 0..TAPS {
            let (kz, ky, kx) = (tap / 9, (tap / 3) % 3, tap % 3);
            let (lo, hi) = x_span(g, kx);
            let row = &mut cols[(c * TAPS + tap) * len..(c * TAPS + tap + 1) * len];
            for r in chunk.r0..chunk.r1 {
                let dst = &mut row[(r - chunk.r0) * wo..(r - chunk.r0 + 1) * wo];
                match source_row(g, r, kz, ky) {
                    None => dst.fill(0.0),
                    Some(src_row) => {
                        let src = &xc[src_row * w..(src_row + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if s == 1 {
                            let off = lo + kx - PADDING;
                            for (d, v) in dst[lo..hi].iter_mut().zip(&src[off..off + hi - lo]) {
                                *d = *v as f64;
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[ox * s + kx - PADDING] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `dcols` back onto the f64 input-gradient buffer of one sample.
fn col2im(g: &Geometry, dcols: &[f64], chunk: RowChunk, dx: &mut [f64]) {
    let len = chunk.voxels(g);
    let (w, wo, s) = (g.inp[2], g.out[2], g.stride);
    for c in 0..g.c {
        let dxc = &mut dx[c * g.in_vox()..(c + 1) * g.in_vox()];
        for tap in 0..TAPS {
            let (kz, ky, kx) = (tap / 9, (tap / 3) % 3, tap % 3);
            let (lo, hi) = x_span(g, kx);
            let row = &dcols[(c * TAPS + tap) * len..(c * TAPS + tap + 1) * len];
            for r in chunk.r0..chunk.r1 {
                let Some(src_row) = source_row(g, r, kz, ky) else { continue };
                let src = &row[(r - chunk.r0) * wo..(r - chunk.r0 + 1) * wo];
                let dst = &mut dxc[src_row * w..(src_row + 1) * w];
                if s == 1 {
                    let off = lo + kx - PADDING;
                    for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                        *d += v;
                    }
                } else {
                    for ox in lo..hi {
                        dst[ox * s + kx - PADDING] += src[ox];
                    }
                }
            }
        }
    }
}

fn row_chunks(g: &Geometry, limit: usize) -> impl Iterator<Item = RowChunk> {
    let rows = g.out[0] * g.out[1];
    let per = (limit / (g.k() * g.out[2])).clamp(1, rows);
    (0..rows).step_by(per).map(move |r0| RowChunk { r0, r1: (r0 + per).min(rows) })
}

/// `c = a · b + beta · c` for row-major operands given by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover every index addressed by the
    // given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3×3×3 convolution, padding 1, stride 1 or 2.
pub fn conv3d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = Geometry::new(input, weight, bias, stride)?;
    let wmat: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
    let bvec: Vec<f64> = bias.data().iter().map(|&v| v as f64).collect();
    let mut out = vec![0f32; g.n * g.f * g.out_vox()];
    if stride == 1 {
        forward_padded(&g, input.data(), &wmat, &bvec, &mut out);
    } else {
        forward_im2col(&g, input.data(), &wmat, &bvec, &mut out);
    }
    let [d, h, w] = g.out;
    Tensor::new(vec![g.n, g.f, d, h, w], out)
}

/// General forward: im2col per chunk of output rows, then one GEMM.
fn forward_im2col(g: &Geometry, x: &[f32], wmat: &[f64], bvec: &[f64], out: &mut [f32]) {
    let (k, vout) = (g.k(), g.out_vox());
    let chunk = g.chunk(FORWARD_CHUNK_ELEMS);
    let mut cols = vec![0f64; k * chunk];
    let mut acc = vec![0f64; g.f * chunk];
    for s in 0..g.n {
        let xs = &x[s * g.c * g.in_vox()..(s + 1) * g.c * g.in_vox()];
        let y = &mut out[s * g.f * vout..(s + 1) * g.f * vout];
        for ch in row_chunks(g, FORWARD_CHUNK_ELEMS) {
            let (v0, len) = (ch.r0 * g.out[2], ch.voxels(g));
            let v1 = v0 + len;
            im2col(g, xs, ch, &mut cols[..k * len]);
            gemm(g.f, k, len, wmat, (k, 1), &cols[..k * len], (len, 1), 0.0, &mut acc[..g.f * len]);
            for f in 0..g.f {
                let dst = &mut y[f * vout + v0..f * vout + v1];
                for (d, a) in dst.iter_mut().zip(&acc[f * len..(f + 1) * len]) {
                    *d = (a + bvec[f]) as f32;
                }
            }
        }
    }
}

/// Stride-1 forward over a zero-padded f64 copy of each sample. Each im2col
/// row is then one contiguous slice of the padded input, offset by its tap.
/// The GEMM runs over padded positions and halo results are dropped; interior
/// sums see the same operands in the same order as the general path.
fn forward_padded(g: &Geometry, x: &[f32], wmat: &[f64], bvec: &[f64], out: &mut [f32]) {
    let [d, h, w] = g.inp;
    let (hp, wp) = (h + 2, w + 2);
    let plane = hp * wp;
    let vp = (d + 2) * plane;
    let (vin, vout, k) = (g.in_vox(), g.out_vox(), g.k());
    let offsets: Vec<isize> = (0..TAPS)
        .map(|t| (t / 9) as isize * plane as isize + ((t / 3) % 3) as isize * wp as isize + (t % 3) as isize)
        .collect();
    // Centre tap of the first and one past the last interior position.
    let (first, end) = (plane + wp + 1, vp - plane - wp - 1);
    let per = (FORWARD_CHUNK_ELEMS / k).clamp(1, end - first);
    let mut xp = vec![0f64; g.c * vp];
    let mut cols = vec![0f64; k * per];
    let mut acc = vec![0f64; g.f * per];
    for s in 0..g.n {
        let xs = &x[s * g.c * vin..(s + 1) * g.c * vin];
        for c in 0..g.c {
            for z in 0..d {
                for y in 0..h {
                    let src = &xs[c * vin + (z * h + y) * w..][..w];
                    let dst = &mut xp[c * vp + (z + 1) * plane + (y + 1) * wp + 1..][..w];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o = *v as f64;
                    }
                }
            }
        }
        let ys = &mut out[s * g.f * vout..(s + 1) * g.f * vout];
        for p0 in (first..end).step_by(per) {
            let len = per.min(end - p0);
            // Padded index of the (−1, −1, −1) neighbour of position p0.
            let base = p0 - first;
            for c in 0..g.c {
                for (t, off) in offsets.iter().enumerate() {
                    let src = &xp[c * vp + base + *off as usize..][..len];
                    cols[(c * TAPS + t) * len..][..len].copy_from_slice(src);
                }
            }
            gemm(g.f, k, len, wmat, (k, 1), &cols[..k * len], (len, 1), 0.0, &mut acc[..g.f * len]);
            let (mut pz, mut py, mut px) = (p0 / plane, (p0 / wp) % hp, p0 % wp);
            for j in 0..len {
                if (1..=d).contains(&pz) && (1..=h).contains(&py) && (1..=w).contains(&px) {
                    let v = ((pz - 1) * h + py - 1) * w + px - 1;
                    for f in 0..g.f {
                        ys[f * vout + v] = (acc[f * len + j] + bvec[f]) as f32;
                    }
                }
                px += 1;
                if px == wp {
                    px = 0;
                    py += 1;
                    if py == hp {
                        py = 0;
                        pz += 1;
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Clone, Debug)]
pub struct Conv3dGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv3d_forward`] given the upstream gradient.
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    want_input: bool,
) -> Result<Conv3dGrads> {
    let g = Geometry::new(input, weight, bias, stride)?;
    let [d, h, w] = g.out;
    if grad_out.shape() != [g.n, g.f, d, h, w] {
        return contract(format!(
            "conv3d upstream gradient shape {:?} does not match output",
            grad_out.shape()
        ));
    }
    let k = g.k();
    let wmat: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
    let vout = g.out_vox();
    let vin = g.in_vox();
    let chunk = g.chunk(CHUNK_ELEMS);
    let mut dw = vec![0f64; g.f * k];
    let mut db = vec![0f64; g.f];
    let mut dx_out = if want_input { vec![0f32; g.n * g.c * vin] } else { Vec::new() };
    let mut dx = vec![0f64; if want_input { g.c * vin } else { 0 }];
    let mut cols = vec![0f64; k * chunk];
    let mut dcols = vec![0f64; if want_input { k * chunk } else { 0 }];
    let mut dy = vec![0f64; g.f * chunk];
    for s in 0..g.n {
        let x = &input.data()[s * g.c * vin..(s + 1) * g.c * vin];
        let go = &grad_out.data()[s * g.f * vout..(s + 1) * g.f * vout];
        dx.iter_mut().for_each(|v| *v = 0.0);
        for ch in row_chunks(&g, CHUNK_ELEMS) {
            let (v0, len) = (ch.r0 * g.out[2], ch.voxels(&g));
            let v1 = v0 + len;
            for f in 0..g.f {
                let src = &go[f * vout + v0..f * vout + v1];
                let dst = &mut dy[f * len..(f + 1) * len];
                let mut sum = 0.0;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s as f64;
                    sum += s as f64;
                }
                db[f] += sum;
            }
            im2col(&g, x, ch, &mut cols[..k * len]);
            // dW += dY · colsᵀ
            gemm(g.f, len, k, &dy[..g.f * len], (len, 1), &cols[..k * len], (1, len), 1.0, &mut dw);
            if want_input {
                // dcols = Wᵀ · dY
                gemm(k, g.f, len, &wmat, (1, k), &dy[..g.f * len], (len, 1), 0.0, &mut dcols[..k * len]);
                col2im(&g, &dcols[..k * len], ch, &mut dx);
            }
        }
        if want_input {
            for (o, v) in dx_out[s * g.c * vin..(s + 1) * g.c * vin].iter_mut().zip(&dx) {
                *o = *v as f32;
            }
        }
    }
    Ok(Conv3dGrads {
        input: if want_input { Some(Tensor::new(input.shape().to_vec(), dx_out)?) } else { None },
        weight: Tensor::new(weight.shape().to_vec(), dw.into_iter().map(|v| v as f32).collect())?,
        bias: Tensor::new(vec![g.f], db.into_iter().map(|v| v as f32).collect())?,
    })
}
