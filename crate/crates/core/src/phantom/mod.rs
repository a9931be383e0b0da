//! Synthetic volumes standing in for annotated CT scans, their file format,
//! isotropic resampling, and mini-batch sampling.

mod dataset;
mod generate;
mod io;
mod resample;
mod sampler;

pub use dataset::{
    derive_seed, load_dataset, read_manifest, synthesize_case, write_dataset, Case, DatasetRecipe, ManifestRow, FOREGROUND_FRACTION, MANIFEST_FILE,
};
pub use generate::{generate_phantom, PhantomParams, MIN_EXTENT};
pub use io::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION};
pub use resample::resample_isotropic;
pub use sampler::BatchSampler;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// What a grid's values mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    /// Binary mask; values are exactly 0 or 1.
    Label,
}

/// Scalar volume with physical geometry. Axis order is (z, y, x), with x
/// varying fastest in `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub kind: VolumeKind,
    pub extents: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f32; 3],
    /// Position of voxel (0,0,0) in mm.
    pub origin: [f32; 3],
    pub values: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(kind: VolumeKind, extents: [usize; 3], spacing: [f32; 3], origin: [f32; 3], values: Vec<f32>) -> Result<Self> {
        let g = Self { kind, extents, spacing, origin, values };
        g.validate()?;
        Ok(g)
    }

    pub fn filled(kind: VolumeKind, extents: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(kind, extents, spacing, [0.0; 3], vec![value; extents.iter().product()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.extents.iter().product::<usize>() {
            return contract(format!(
                "volume extents {:?} need {} values, got {}",
                self.extents,
                self.extents.iter().product::<usize>(),
                self.values.len()
            ));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return contract(format!("voxel spacing must be positive, got {:?}", self.spacing));
        }
        if self.kind == VolumeKind::Label && !self.is_binary() {
            return contract("label volume contains values other than 0 and 1");
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    /// Number of foreground voxels of a label grid.
    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// `[1, 1, D, H, W]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new([1, 1, d, h, w], self.values.clone()).expect("extents match values")
    }

    /// Builds a grid from a `[1, 1, D, H, W]` tensor, copying geometry from `like`.
    pub fn from_tensor(t: &Tensor, kind: VolumeKind, like: &VolumeGrid) -> Result<Self> {
        let [n, c, d, h, w] = t.dims5()?;
        if n != 1 || c != 1 {
            return contract(format!("expected a single-channel single-item tensor, got {:?}", t.shape()));
        }
        Self::new(kind, [d, h, w], like.spacing, like.origin, t.data().to_vec())
    }

    /// Copy with extents changed to `target`, cropping at the far end or
    /// replicating the last slice/row/column.
    pub fn fit_extents(&self, target: [usize; 3]) -> Result<Self> {
        if target.contains(&0) {
            return contract("target extents must be positive");
        }
        let [d, h, w] = self.extents;
        let mut values = Vec::with_capacity(target.iter().product());
        for z in 0..target[0] {
            for y in 0..target[1] {
                for x in 0..target[2] {
                    values.push(self.get(z.min(d - 1), y.min(h - 1), x.min(w - 1)));
                }
            }
        }
        Self::new(self.kind, target, self.spacing, self.origin, values)
    }
}
