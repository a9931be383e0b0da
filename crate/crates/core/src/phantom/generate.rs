use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{VolumeGrid, VolumeKind};
use crate::error::{contract, Result};

/// Minimum extent of a generated phantom along every axis.
pub const MIN_EXTENT: usize = 16;

/// Controls for one synthetic organ phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub seed: u64,
    pub extents: [usize; 3],
    /// Voxel spacing (z, y, x) in mm.
    pub spacing: [f32; 3],
    /// Overlapping ellipsoids forming the organ.
    pub n_lobes: usize,
    /// Organ-minus-background intensity; 0 mimics an unenhanced scan.
    pub intensity_contrast: f32,
    /// Gaussian blur sigma in mm.
    pub boundary_fuzz_mm: f32,
    pub noise_sigma: f32,
    /// Bright non-organ spheres.
    pub distractor_count: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: [32; 3],
            spacing: [3.0; 3],
            n_lobes: 2,
            intensity_contrast: 0.7,
            boundary_fuzz_mm: 2.0,
            noise_sigma: 0.05,
            distractor_count: 2,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < MIN_EXTENT) {
            return contract(format!("phantom extents {:?} below minimum {MIN_EXTENT}", self.extents));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return contract("phantom spacing must be positive");
        }
        if self.n_lobes == 0 {
            return contract("a phantom needs at least one lobe");
        }
        if !(0.0..=1.0).contains(&self.intensity_contrast) {
            return contract("intensity_contrast must lie in [0,1]");
        }
        if !(self.boundary_fuzz_mm >= 0.0) || !(self.noise_sigma >= 0.0) {
            return contract("blur and noise scales must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }
}

/// Intensity of distractor structures relative to the background.
const DISTRACTOR_INTENSITY: (f64, f64) = (1.2, 1.6);

/// Generates an (image, label) pair. The label is a union of chained,
/// mutually overlapping ellipsoids; the image is the contrast-scaled mask
/// plus distractors, Gaussian blurred, plus white noise. Identical
/// parameters give bit-identical output.
pub fn generate_phantom(params: &PhantomParams) -> Result<(VolumeGrid, VolumeGrid)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let [d, h, w] = params.extents;
    let sp = params.spacing.map(|s| s as f64);
    let fov = [d as f64 * sp[0], h as f64 * sp[1], w as f64 * sp[2]];

    let mut lobes: Vec<Ellipsoid> = Vec::with_capacity(params.n_lobes);
    let first = Ellipsoid {
        center: [0, 1, 2].map(|a| fov[a] * rng.gen_range(0.4..0.6)),
        radii: [0, 1, 2].map(|a| fov[a] * rng.gen_range(0.22..0.32)),
    };
    lobes.push(first);
    for _ in 1..params.n_lobes {
        let prev = *lobes.last().expect("non-empty");
        // Center inside the previous lobe keeps the union connected.
        let dir: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let reach = rng.gen_range(0.3..0.6);
        let center = [0, 1, 2].map(|a| {
            (prev.center[a] + dir[a] / norm * reach * prev.radii[a]).clamp(0.25 * fov[a], 0.75 * fov[a])
        });
        let radii = [0, 1, 2].map(|a| fov[a] * rng.gen_range(0.14..0.22));
        lobes.push(Ellipsoid { center, radii });
    }

    let pos = |z: usize, y: usize, x: usize| [(z as f64 + 0.5) * sp[0], (y as f64 + 0.5) * sp[1], (x as f64 + 0.5) * sp[2]];
    let n = d * h * w;
    let mut label = vec![0f32; n];
    let mut image = vec![0f64; n];
    let contrast = params.intensity_contrast as f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = pos(z, y, x);
                if lobes.iter().any(|e| e.level(p) <= 1.0) {
                    let i = (z * h + y) * w + x;
                    label[i] = 1.0;
                    image[i] = contrast;
                }
            }
        }
    }

    for _ in 0..params.distractor_count {
        let r = fov.iter().cloned().fold(f64::INFINITY, f64::min) * rng.gen_range(0.04..0.07);
        let intensity = rng.gen_range(DISTRACTOR_INTENSITY.0..DISTRACTOR_INTENSITY.1);
        // Rejection-sample a center clear of the organ; give up after a few tries.
        let mut center = None;
        for _ in 0..32 {
            let c = [0, 1, 2].map(|a| fov[a] * rng.gen_range(0.1..0.9));
            let clear = lobes.iter().all(|e| {
                let grown = Ellipsoid { center: e.center, radii: e.radii.map(|v| v + 1.5 * r) };
                grown.level(c) > 1.0
            });
            if clear {
                center = Some(c);
                break;
            }
        }
        let Some(c) = center else { continue };
        let sphere = Ellipsoid { center: c, radii: [r; 3] };
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if sphere.level(pos(z, y, x)) <= 1.0 {
                        let i = (z * h + y) * w + x;
                        image[i] = image[i].max(intensity);
                    }
                }
            }
        }
    }

    if params.boundary_fuzz_mm > 0.0 {
        for axis in 0..3 {
            gaussian_blur_axis(&mut image, params.extents, axis, params.boundary_fuzz_mm as f64 / sp[axis]);
        }
    }
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma as f64).expect("finite sigma");
        image.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let origin = [0.0; 3];
    let image = VolumeGrid::new(VolumeKind::Image, params.extents, params.spacing, origin, image.into_iter().map(|v| v as f32).collect())?;
    let label = VolumeGrid::new(VolumeKind::Label, params.extents, params.spacing, origin, label)?;
    Ok((image, label))
}

/// In-place 1-D Gaussian filter along `axis` with edge clamping.
fn gaussian_blur_axis(data: &mut [f64], extents: [usize; 3], axis: usize, sigma_vox: f64) {
    if sigma_vox <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma_vox).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = extents;
    let stride = [h * w, w, 1][axis];
    let len = extents[axis] as isize;
    let mut line = vec![0f64; extents[axis]];
    for z in 0..if axis == 0 { 1 } else { d } {
        for y in 0..if axis == 1 { 1 } else { h } {
            for x in 0..if axis == 2 { 1 } else { w } {
                let base = (z * h + y) * w + x;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[base + i * stride];
                }
                for i in 0..len {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let j = (i + k as isize - radius).clamp(0, len - 1);
                        acc += kv * line[j as usize];
                    }
                    data[base + i as usize * stride] = acc;
                }
            }
        }
    }
}
