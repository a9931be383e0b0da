use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxseg_core::phantom::*;
use voxseg_core::Error;

fn grid(kind: VolumeKind, extents: [usize; 3], spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> VolumeGrid {
    let mut v = Vec::new();
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                v.push(f(z, y, x));
            }
        }
    }
    VolumeGrid::new(kind, extents, spacing, [0.0; 3], v).unwrap()
}

#[test]
fn noiseless_single_lobe_threshold_reproduces_label() {
    for seed in 0..5 {
        let p = PhantomParams {
            seed,
            n_lobes: 1,
            intensity_contrast: 1.0,
            boundary_fuzz_mm: 0.0,
            noise_sigma: 0.0,
            distractor_count: 0,
            ..Default::default()
        };
        let (image, label) = generate_phantom(&p).unwrap();
        assert!(label.count_foreground() > 0);
        let (lo, hi) = image.values.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mid = 0.5 * (lo + hi);
        for (i, (&v, &l)) in image.values.iter().zip(&label.values).enumerate() {
            assert_eq!((v > mid) as u8 as f32, l, "voxel {i}");
        }
    }
}

#[test]
fn generation_is_pure() {
    let p = PhantomParams { seed: 42, ..Default::default() };
    assert_eq!(generate_phantom(&p).unwrap(), generate_phantom(&p).unwrap());
    let q = PhantomParams { seed: 43, ..Default::default() };
    assert_ne!(generate_phantom(&p).unwrap().1, generate_phantom(&q).unwrap().1);
}

#[test]
fn invalid_params_rejected() {
    let small = PhantomParams { extents: [15, 32, 32], ..Default::default() };
    assert!(matches!(generate_phantom(&small), Err(Error::Contract(_))));
    let neg = PhantomParams { noise_sigma: -0.1, ..Default::default() };
    assert!(generate_phantom(&neg).is_err());
    let zero = PhantomParams { spacing: [0.0, 3.0, 3.0], ..Default::default() };
    assert!(generate_phantom(&zero).is_err());
}

#[test]
fn hundred_phantom_foreground_fraction() {
    let recipe = DatasetRecipe { seed: 7, ..Default::default() };
    for i in 0..100 {
        let case = synthesize_case(&recipe, i).unwrap();
        assert!(case.label.is_binary());
        let fg = case.label.values.iter().filter(|&&v| v == 1.0).count();
        let frac = fg as f64 / case.label.values.len() as f64;
        assert!((0.02..=0.40).contains(&frac), "case {i}: foreground fraction {frac}");
        assert_eq!(case.image.extents, [32; 3]);
        assert_eq!(case.label.spacing, [3.0; 3]);
    }
}

#[test]
fn resample_identity_and_constant() {
    let v = grid(VolumeKind::Image, [5, 4, 6], [2.0; 3], |z, y, x| (z * 100 + y * 10 + x) as f32);
    assert_eq!(resample_isotropic(&v, 2.0).unwrap(), v);
    let c = VolumeGrid::filled(VolumeKind::Image, [9, 7, 8], [0.7, 2.0, 5.0], 3.25).unwrap();
    for t in [0.5, 1.0, 3.0, 4.5] {
        let r = resample_isotropic(&c, t).unwrap();
        assert_eq!(r.spacing, [t; 3]);
        assert!(r.values.iter().all(|&x| x == 3.25));
        // Back to the source spacing along a uniform axis keeps the constant.
        let back = resample_isotropic(&r, 2.0).unwrap();
        assert!(back.values.iter().all(|&x| x == 3.25));
    }
    assert!(resample_isotropic(&c, 0.0).is_err());
    assert!(resample_isotropic(&c, -1.0).is_err());
}

/// Trilinear sample of `v` at fractional voxel position `p`, clamped to the grid.
fn trilinear(v: &VolumeGrid, p: [f64; 3]) -> f64 {
    let axis = |a: usize| {
        let n = v.extents[a];
        let q = p[a].clamp(0.0, (n - 1) as f64);
        let lo = (q.floor() as usize).min(n.saturating_sub(2));
        let hi = (lo + 1).min(n - 1);
        (lo, hi, if hi == lo { 0.0 } else { q - lo as f64 })
    };
    let (z0, z1, fz) = axis(0);
    let (y0, y1, fy) = axis(1);
    let (x0, x1, fx) = axis(2);
    let mut s = 0.0;
    for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                s += wz * wy * wx * v.get(z, y, x) as f64;
            }
        }
    }
    s
}

#[test]
fn two_to_three_mm_ramp_matches_pointwise_oracle() {
    let ramp = grid(VolumeKind::Image, [10, 12, 11], [2.0; 3], |z, y, x| 0.5 * z as f32 - 0.25 * y as f32 + 0.125 * x as f32 + 1.0);
    let r = resample_isotropic(&ramp, 3.0).unwrap();
    // Physical extent 18 x 22 x 20 mm holds 7, 8 and 7 samples at 3 mm.
    assert_eq!(r.extents, [7, 8, 7]);
    for z in 0..r.extents[0] {
        for y in 0..r.extents[1] {
            for x in 0..r.extents[2] {
                let (sz, sy, sx) = (z as f64 * 1.5, y as f64 * 1.5, x as f64 * 1.5);
                let want = 0.5 * sz - 0.25 * sy + 0.125 * sx + 1.0;
                assert!((r.get(z, y, x) as f64 - want).abs() <= 1e-5, "({z},{y},{x})");
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let wavy = grid(VolumeKind::Image, [9, 8, 10], [2.0, 1.2, 0.8], |_, _, _| rng.gen_range(-1.0f32..1.0));
    let r = resample_isotropic(&wavy, 3.0).unwrap();
    for z in 0..r.extents[0] {
        for y in 0..r.extents[1] {
            for x in 0..r.extents[2] {
                let p = [z as f64 * 3.0 / 2.0, y as f64 * 3.0 / 1.2, x as f64 * 3.0 / 0.8];
                assert!((r.get(z, y, x) as f64 - trilinear(&wavy, p)).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn label_resampling_stays_binary_and_preserves_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = grid(VolumeKind::Label, [20, 17, 19], [0.8, 2.5, 1.1], |_, _, _| rng.gen_bool(0.4) as u8 as f32);
    for t in [1.0, 3.0, 0.6] {
        let r = resample_isotropic(&l, t).unwrap();
        assert!(r.is_binary());
        for a in 0..3 {
            let src = (l.extents[a] - 1) as f32 * l.spacing[a];
            let out = (r.extents[a] - 1) as f32 * t;
            assert!(out <= src + 1e-4 && src - out <= t + 1e-4, "axis {a}: {src} vs {out}");
        }
    }
}

fn independent_checksum(values: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        h.write_u32(v.to_bits());
    }
    h.finish()
}

#[test]
fn volume_round_trip_and_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let v = VolumeGrid::new(
        VolumeKind::Image,
        [64, 64, 64],
        [3.0, 2.5, 1.5],
        [-10.0, 4.5, 0.25],
        (0..64 * 64 * 64).map(|_| rng.gen_range(-1e3f32..1e3)).collect(),
    )
    .unwrap();
    let before = independent_checksum(&v.values);
    let path = dir.path().join("v.vxsg");
    write_volume(&v, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 43 + 4 * 64 * 64 * 64);
    assert_eq!(&bytes[..4], b"VXSG");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let back = read_volume(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(independent_checksum(&back.values), before);

    let l = grid(VolumeKind::Label, [16, 16, 17], [3.0; 3], |z, y, x| ((z + y + x) % 2) as f32);
    let back = decode_volume(&encode_volume(&l)).unwrap();
    assert_eq!(back, l);
    assert_eq!(encode_volume(&l)[6], 1);
}

#[test]
fn malformed_files_give_distinct_errors() {
    let v = grid(VolumeKind::Image, [2, 2, 2], [1.0; 3], |z, y, x| (z + y + x) as f32);
    let good = encode_volume(&v);
    let message = |b: &[u8]| match decode_volume(b) {
        Err(Error::Format(m)) => m,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"NIFT");
    assert!(message(&bad).contains("VXSG"));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(message(&bad).contains("version"));
    assert!(message(&good[..20]).contains("header"));
    assert!(message(&good[..good.len() - 3]).contains("payload"));
    let mut bad = good.clone();
    bad[6] = 7;
    assert!(message(&bad).contains("kind"));
    // A label file holding a non-binary value is rejected as well.
    let mut bad = good.clone();
    bad[6] = 1;
    assert!(decode_volume(&bad).is_err());
}

#[test]
fn sampler_partitions_each_epoch() {
    let mut s = BatchSampler::new((0..8).collect(), 4, 1).unwrap();
    assert_eq!(s.batches_per_epoch(), 2);
    for _ in 0..5 {
        let mut all = [s.next_batch(), s.next_batch()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }
    assert_eq!(s.epoch(), 5);
}

#[test]
fn sampler_is_deterministic_in_seed() {
    let a: Vec<_> = BatchSampler::new((0..10).collect(), 3, 9).unwrap().take(20).collect();
    let b: Vec<_> = BatchSampler::new((0..10).collect(), 3, 9).unwrap().take(20).collect();
    let c: Vec<_> = BatchSampler::new((0..10).collect(), 3, 10).unwrap().take(20).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn thousand_cases_three_epochs() {
    let mut s = BatchSampler::new((0..1000).collect(), 4, 0).unwrap();
    let mut counts = vec![0usize; 1000];
    for _ in 0..3 * 250 {
        for i in s.next_batch() {
            counts[i] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c == 3));
    assert_eq!(s.epoch(), 3);
}

#[test]
fn sampler_contract() {
    assert!(BatchSampler::new(Vec::new(), 1, 0).is_err());
    assert!(BatchSampler::new(vec![1, 2], 3, 0).is_err());
    assert!(BatchSampler::new(vec![1, 2], 0, 0).is_err());
    // Remainder dropped: 10 ids in batches of 4 use 8 per epoch.
    let mut s = BatchSampler::new((0..10).collect(), 4, 5).unwrap();
    let e: Vec<usize> = [s.next_batch(), s.next_batch()].concat();
    let mut u = e.clone();
    u.sort_unstable();
    u.dedup();
    assert_eq!(u.len(), 8);
    s.next_batch();
    assert_eq!(s.epoch(), 2);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = DatasetRecipe { seed: 3, size: 16, ..Default::default() };
    let cases: Vec<Case> = (0..3).map(|i| synthesize_case(&recipe, i).unwrap()).collect();
    let rows = write_dataset(dir.path(), &cases).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(dir.path().join(MANIFEST_FILE).exists());
    assert_eq!(load_dataset(dir.path()).unwrap(), cases);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn resampled_labels_stay_binary(seed in any::<u64>(), sz in 0.5f32..7.0, t in 1.0f32..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = grid(VolumeKind::Label, [12, 10, 11], [sz, 3.0, 3.0], |_, _, _| rng.gen_bool(0.5) as u8 as f32);
        prop_assert!(resample_isotropic(&l, t).unwrap().is_binary());
    }

    #[test]
    fn synthesis_is_deterministic(seed in 0u64..1000, index in 0usize..50) {
        let recipe = DatasetRecipe { seed, size: 16, ..Default::default() };
        prop_assert_eq!(synthesize_case(&recipe, index).unwrap(), synthesize_case(&recipe, index).unwrap());
    }
}
