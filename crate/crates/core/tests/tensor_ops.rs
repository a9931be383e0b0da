use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxseg_core::tensor::{conv3d_backward, conv3d_forward, upscale_backward, upscale_forward, Tape, Tensor, BCE_EPS};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}

fn at(t: &Tensor, i: [usize; 5]) -> f64 {
    let s = t.shape();
    t.data()[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]] as f64
}

/// Direct convolution with padding 1: seven nested loops plus the kernel taps.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, d, h, wd] = x.dims5().unwrap();
    let f = w.shape()[0];
    let o = |e: usize| (e + 2 - 3) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = Vec::new();
    for ni in 0..n {
        for fi in 0..f {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[fi] as f64;
                        for ci in 0..c {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (iz, iy, ix) = ((z * stride + kz) as isize - 1, (y * stride + ky) as isize - 1, (xx * stride + kx) as isize - 1);
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += at(x, [ni, ci, iz as usize, iy as usize, ix as usize]) * at(w, [fi, ci, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (vec![n, f, od, oh, ow], out)
}

/// Gradients of `Σ g·conv(x, w, b)` by scattering every tap contribution.
fn conv_grad_oracle(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, d, h, wd] = x.dims5().unwrap();
    let [_, f, od, oh, ow] = g.dims5().unwrap();
    let mut gx = vec![0f64; x.len()];
    let mut gw = vec![0f64; w.len()];
    let mut gb = vec![0f64; f];
    for ni in 0..n {
        for fi in 0..f {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let go = at(g, [ni, fi, z, y, xx]);
                        gb[fi] += go;
                        for ci in 0..c {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (iz, iy, ix) = ((z * stride + kz) as isize - 1, (y * stride + ky) as isize - 1, (xx * stride + kx) as isize - 1);
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((ni * c + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((fi * c + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                        gx[xi] += go * w.data()[wi] as f64;
                                        gw[wi] += go * x.data()[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn assert_close(got: &[f32], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol * w.abs().max(1.0), "{what}[{i}]: {g} vs {w}");
    }
}

fn check_conv_against_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, rng: &mut ChaCha8Rng) {
    let y = conv3d_forward(x, w, b, stride).unwrap();
    let (shape, want) = conv_oracle(x, w, b, stride);
    assert_eq!(y.shape(), shape.as_slice());
    assert_close(y.data(), &want, 1e-6, "forward");
    let g = random(rng, &shape);
    let grads = conv3d_backward(x, w, b, &g, stride, true).unwrap();
    let (gx, gw, gb) = conv_grad_oracle(x, w, &g, stride);
    assert_close(grads.input.unwrap().data(), &gx, 1e-6, "grad input");
    assert_close(grads.weight.data(), &gw, 1e-6, "grad weight");
    assert_close(grads.bias.data(), &gb, 1e-6, "grad bias");
}

#[test]
fn conv_consecutive_integers_all_ones_stride2() {
    let x = Tensor::from_fn([1, 1, 4, 4, 4], |i| i as f32);
    let w = Tensor::full([1, 1, 3, 3, 3], 1.0);
    let b = Tensor::zeros([1]);
    let y = conv3d_forward(&x, &w, &b, 2).unwrap();
    let (shape, want) = conv_oracle(&x, &w, &b, 2);
    assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
    assert_eq!(shape, vec![1, 1, 2, 2, 2]);
    // Integer sums are exact in f32.
    assert_eq!(y.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), want);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    check_conv_against_oracle(&x, &w, &b, 2, &mut rng);
}

#[test]
fn conv_matches_direct_loops_on_assorted_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes: &[([usize; 5], usize, usize)] = &[
        ([1, 1, 3, 3, 3], 1, 1),
        ([2, 3, 8, 8, 8], 4, 1),
        ([2, 3, 8, 8, 8], 2, 2),
        ([1, 2, 5, 7, 6], 3, 2),
        ([2, 1, 4, 6, 5], 2, 1),
        ([1, 3, 7, 7, 7], 1, 2),
        ([2, 2, 1, 2, 3], 2, 1),
    ];
    for &(xs, f, stride) in shapes {
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &[f, xs[1], 3, 3, 3]);
        let b = random(&mut rng, &[f]);
        check_conv_against_oracle(&x, &w, &b, stride, &mut rng);
    }
}

#[test]
fn conv_zero_input_gives_bias_and_delta_kernel_is_identity() {
    let x = Tensor::zeros([1, 2, 4, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&mut rng, &[3, 2, 3, 3, 3]);
    let b = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = conv3d_forward(&x, &w, &b, 1).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, b.data()[i / 64]);
    }
    let x = random(&mut rng, &[1, 1, 3, 3, 3]);
    let delta = Tensor::from_fn([1, 1, 3, 3, 3], |i| (i == 13) as u8 as f32);
    let y = conv3d_forward(&x, &delta, &Tensor::zeros([1]), 1).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::zeros([1, 2, 4, 4, 4]);
    assert!(conv3d_forward(&x, &Tensor::zeros([1, 3, 3, 3, 3]), &Tensor::zeros([1]), 1).is_err());
    assert!(conv3d_forward(&x, &Tensor::zeros([1, 2, 5, 5, 5]), &Tensor::zeros([1]), 1).is_err());
    assert!(conv3d_forward(&x, &Tensor::zeros([1, 2, 3, 3, 3]), &Tensor::zeros([1]), 3).is_err());
}

/// Align-corners trilinear value at output voxel `(z, y, x)` evaluated
/// directly from the eight surrounding input voxels.
fn upscale_oracle(x: &Tensor, factor: usize) -> Vec<f64> {
    let [n, c, d, h, w] = x.dims5().unwrap();
    let src = |e: usize, i: usize| -> (usize, usize, f64) {
        let m = e * factor;
        let p = if m > 1 { i as f64 * (e - 1) as f64 / (m - 1) as f64 } else { 0.0 };
        let lo = (p.floor() as usize).min(e.saturating_sub(2));
        let hi = (lo + 1).min(e - 1);
        (lo, hi, if hi == lo { 0.0 } else { p - lo as f64 })
    };
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for z in 0..d * factor {
                for y in 0..h * factor {
                    for xx in 0..w * factor {
                        let (z0, z1, fz) = src(d, z);
                        let (y0, y1, fy) = src(h, y);
                        let (x0, x1, fx) = src(w, xx);
                        let mut v = 0.0;
                        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    v += wz * wy * wx * at(x, [ni, ci, zi, yi, xi]);
                                }
                            }
                        }
                        out.push(v);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn upscale_eight_values_by_two() {
    let x = Tensor::from_fn([1, 1, 2, 2, 2], |i| i as f32);
    let y = upscale_forward(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    assert_close(y.data(), &upscale_oracle(&x, 2), 1e-6, "upscale");
    assert!(y.min() >= 0.0 && y.max() <= 7.0);
    // Corners map to corners.
    assert_eq!(y.data()[0], 0.0);
    assert_eq!(y.data()[63], 7.0);
}

#[test]
fn upscale_matches_pointwise_oracle_and_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (shape, factor) in [([2, 2, 3, 2, 4], 2), ([1, 1, 2, 3, 2], 4), ([1, 2, 1, 2, 2], 16), ([1, 1, 3, 3, 3], 1)] {
        let x = random(&mut rng, &shape);
        let y = upscale_forward(&x, factor).unwrap();
        assert_close(y.data(), &upscale_oracle(&x, factor), 1e-6, "upscale");
        // <up(x), g> = <x, up^T(g)> with the oracle as the forward map.
        let g = random(&mut rng, y.shape());
        let gx = upscale_backward(x.shape(), &g, factor).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn upscale_constant_identity_and_bad_factor() {
    let x = Tensor::full([1, 1, 2, 3, 2], 0.7);
    for f in [1, 2, 4, 16] {
        assert!(upscale_forward(&x, f).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
    }
    assert_eq!(upscale_forward(&x, 1).unwrap(), x);
    assert!(upscale_forward(&x, 3).is_err());
    assert!(upscale_forward(&x, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn upscale_range_is_contained(seed in any::<u64>(), d in 1usize..4, h in 1usize..4, w in 1usize..4, fi in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 2, d, h, w]);
        let y = upscale_forward(&x, [2, 4, 16][fi]).unwrap();
        prop_assert!(y.min() >= x.min() && y.max() <= x.max());
    }
}

#[test]
fn leaky_relu_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new([3], vec![0.0, 5.0, -2.0]).unwrap()).unwrap();
    let y = t.leaky_relu(x, 0.1).unwrap();
    assert_eq!(t.value(y).data()[0], 0.0);
    assert_eq!(t.value(y).data()[1], 5.0);
    assert!((t.value(y).data()[2] + 0.2).abs() < 1e-7);
    let s = t.sum(y).unwrap();
    // Sub-gradient at exactly 0 is 1.
    assert_eq!(t.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 0.1]);
}

#[test]
fn batch_norm_train_normalizes_and_zero_gamma_gives_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn([2, 3, 4, 4, 4], |i| rng.gen_range(-2.0f32..5.0) * (1 + i % 3) as f32);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone()).unwrap();
    let g = t.leaf(Tensor::full([3], 1.0)).unwrap();
    let b = t.leaf(Tensor::zeros([3])).unwrap();
    let (y, stats) = t.batch_norm(xv, g, b, None, 1e-5).unwrap();
    assert!(stats.is_some());
    let yv = t.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| (0..64).map(move |s| (n * 3 + c) * 64 + s)).map(|i| yv.data()[i] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
    let g0 = t.leaf(Tensor::zeros([3])).unwrap();
    let beta = t.leaf(Tensor::new([3], vec![0.25, -1.0, 3.0]).unwrap()).unwrap();
    let (y0, _) = t.batch_norm(xv, g0, beta, None, 1e-5).unwrap();
    for (i, &v) in t.value(y0).data().iter().enumerate() {
        assert_eq!(v, [0.25, -1.0, 3.0][(i / 64) % 3]);
    }
    // A constant channel hits the epsilon floor instead of dividing by zero.
    let c = t.leaf(Tensor::full([2, 1, 2, 2, 2], 4.0)).unwrap();
    let (g1, b1) = (t.leaf(Tensor::full([1], 1.0)).unwrap(), t.leaf(Tensor::zeros([1])).unwrap());
    let (yc, _) = t.batch_norm(c, g1, b1, None, 1e-5).unwrap();
    assert!(t.value(yc).data().iter().all(|&v| v == 0.0));
}

#[test]
fn concat_slices_recover_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random(&mut rng, &[2, 2, 2, 3, 2]), random(&mut rng, &[2, 3, 2, 3, 2]));
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone()).unwrap(), t.leaf(b.clone()).unwrap());
    let c = t.concat(av, bv).unwrap();
    let cv = t.value(c);
    assert_eq!(cv.shape(), &[2, 5, 2, 3, 2]);
    let s = 12;
    for n in 0..2 {
        assert_eq!(&cv.data()[n * 5 * s..n * 5 * s + 2 * s], &a.data()[n * 2 * s..(n + 1) * 2 * s]);
        assert_eq!(&cv.data()[n * 5 * s + 2 * s..(n + 1) * 5 * s], &b.data()[n * 3 * s..(n + 1) * 3 * s]);
    }
    let mut other = Tape::new();
    let foreign = other.leaf(b).unwrap();
    assert!(t.concat(av, foreign).is_err());
}

#[test]
fn concat_spatial_mismatch_rejected() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros([1, 1, 2, 2, 2])).unwrap();
    let b = t.leaf(Tensor::zeros([1, 1, 2, 2, 3])).unwrap();
    assert!(t.concat(a, b).is_err());
}

#[test]
fn bce_examples() {
    let target = Tensor::from_fn([2, 1, 4, 4, 4], |i| (i % 5 < 2) as u8 as f32);
    let mut t = Tape::new();
    let half = t.leaf(Tensor::full([2, 1, 4, 4, 4], 0.5)).unwrap();
    let l = t.bce(half, &target).unwrap();
    assert!((t.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    let perfect = t.leaf(target.clone()).unwrap();
    let l = t.bce(perfect, &target).unwrap();
    assert!(t.scalar(l).unwrap() <= -(1.0 - BCE_EPS).ln() + 1e-12);
    let bad = Tensor::full([2, 1, 4, 4, 4], 0.5);
    assert!(t.bce(half, &bad).is_err());
}

#[test]
fn backward_linear_and_disconnected() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::from_fn([2, 3], |i| i as f32)).unwrap();
    let q = t.leaf(Tensor::full([4], 1.0)).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(p).unwrap(), &[1.0; 6]);
    assert!(g.wrt(q).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    // Non-scalar loss is a contract violation.
    assert!(t.backward(p).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full([1, 1, 2, 2, 2], f32::MAX)).unwrap();
    let w = t.leaf(Tensor::full([1, 1, 3, 3, 3], f32::MAX)).unwrap();
    let b = t.leaf(Tensor::zeros([1])).unwrap();
    assert!(matches!(t.conv3d(x, w, b, 1), Err(voxseg_core::Error::NonFinite(_))));
}
