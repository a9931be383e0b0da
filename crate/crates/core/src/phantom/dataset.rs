use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{generate_phantom, read_volume, resample_isotropic, write_volume, PhantomParams, VolumeGrid, VolumeKind};
use crate::error::{contract, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "case\timage\tlabel\tseed";

/// One training or evaluation case on the working grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub seed: u64,
    pub image: VolumeGrid,
    pub label: VolumeGrid,
}

/// How a synthetic cohort is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecipe {
    pub seed: u64,
    /// Cubic working extent after resampling.
    pub size: usize,
    /// Isotropic working spacing in mm.
    pub spacing: f32,
    /// Range of the source inter-slice distance in mm, drawn uniformly. `None`
    /// generates directly on the working grid.
    pub source_z_spacing: Option<(f32, f32)>,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self { seed: 0, size: 32, spacing: 3.0, source_z_spacing: Some((0.5, 7.0)) }
    }
}

/// Accepted label foreground fraction for drawn phantoms.
pub const FOREGROUND_FRACTION: (f64, f64) = (0.02, 0.40);

/// Independent sub-seed for stream `index` of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetRecipe {
    /// Phantom parameters and source spacing for one draw.
    pub fn draw(&self, case_seed: u64) -> PhantomParams {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let t = self.spacing;
        let sz = match self.source_z_spacing {
            Some((lo, hi)) if hi > lo => rng.gen_range(lo..=hi),
            Some((lo, _)) => lo,
            None => t,
        };
        let nz = ((self.size as f32 * t / sz).round() as usize).max(super::generate::MIN_EXTENT);
        PhantomParams {
            seed: rng.gen(),
            extents: [nz, self.size, self.size],
            spacing: [sz, t, t],
            n_lobes: rng.gen_range(1..=3),
            intensity_contrast: rng.gen_range(0.4..=1.0),
            boundary_fuzz_mm: rng.gen_range(0.0..=4.0),
            noise_sigma: rng.gen_range(0.02..=0.1),
            distractor_count: rng.gen_range(0..=3),
        }
    }
}

/// Deterministically synthesizes case `index` of the cohort: phantom on a
/// source grid, isotropic resampling, then crop/pad to the working size.
/// Draws whose foreground fraction falls outside [`FOREGROUND_FRACTION`]
/// are rejected and redrawn.
pub fn synthesize_case(recipe: &DatasetRecipe, index: usize) -> Result<Case> {
    if recipe.size < super::generate::MIN_EXTENT {
        return contract(format!("working size {} below {}", recipe.size, super::generate::MIN_EXTENT));
    }
    let base = derive_seed(recipe.seed, index as u64);
    for attempt in 0..64u64 {
        let case_seed = derive_seed(base, attempt);
        let params = recipe.draw(case_seed);
        let (image, label) = generate_phantom(&params)?;
        let target = [recipe.size; 3];
        let image = resample_isotropic(&image, recipe.spacing)?.fit_extents(target)?;
        let label = resample_isotropic(&label, recipe.spacing)?.fit_extents(target)?;
        let frac = label.count_foreground() as f64 / label.len() as f64;
        if (FOREGROUND_FRACTION.0..=FOREGROUND_FRACTION.1).contains(&frac) {
            return Ok(Case { id: format!("case_{index:04}"), seed: case_seed, image, label });
        }
    }
    Err(Error::Config(format!("case {index}: no admissible phantom in 64 draws")))
}

/// One manifest row: case id, file names relative to the dataset directory, seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub case: String,
    pub image: String,
    pub label: String,
    pub seed: u64,
}

/// Writes image/label volume pairs and a manifest into `dir`.
pub fn write_dataset(dir: &Path, cases: &[Case]) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let row = ManifestRow {
            case: c.id.clone(),
            image: format!("{}_image.vxsg", c.id),
            label: format!("{}_label.vxsg", c.id),
            seed: c.seed,
        };
        write_volume(&c.image, &dir.join(&row.image))?;
        write_volume(&c.label, &dir.join(&row.label))?;
        let _ = writeln!(text, "{}\t{}\t{}\t{}", row.case, row.image, row.label, row.seed);
        rows.push(row);
    }
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{} does not start with the manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest row has {} fields: {l:?}", f.len())));
            }
            let seed = f[3].parse().map_err(|_| Error::Format(format!("bad seed in manifest row {l:?}")))?;
            Ok(ManifestRow { case: f[0].into(), image: f[1].into(), label: f[2].into(), seed })
        })
        .collect()
}

/// Loads every case listed in `dir`'s manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let image = read_volume(&dir.join(&row.image))?;
            let label = read_volume(&dir.join(&row.label))?;
            if image.kind != VolumeKind::Image || label.kind != VolumeKind::Label {
                return Err(Error::Format(format!("case {}: image/label kinds swapped", row.case)));
            }
            if image.extents != label.extents {
                return Err(Error::Format(format!("case {}: image and label extents differ", row.case)));
            }
            Ok(Case { id: row.case, seed: row.seed, image, label })
        })
        .collect()
}
