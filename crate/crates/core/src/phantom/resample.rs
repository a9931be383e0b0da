use super::{VolumeGrid, VolumeKind};
use crate::error::{contract, Result};
use crate::tensor::interp::{interp_volume, AxisTable};

/// Resamples onto a grid with spacing `target` mm along every axis, keeping
/// the origin. Output sample `i` sits at `origin + i·target`; the output
/// extent is the largest that stays inside the source's physical extent.
/// Images are interpolated trilinearly, labels by nearest neighbour.
pub fn resample_isotropic(volume: &VolumeGrid, target: f32) -> Result<VolumeGrid> {
    if !(target > 0.0) || !target.is_finite() {
        return contract(format!("target spacing must be positive, got {target}"));
    }
    volume.validate()?;
    if volume.spacing.iter().all(|&s| s == target) {
        return Ok(volume.clone());
    }
    let t = target as f64;
    let step: [f64; 3] = volume.spacing.map(|s| t / s as f64);
    let out_ext: [usize; 3] = [0, 1, 2].map(|a| {
        let n = volume.extents[a];
        (((n - 1) as f64 / step[a]) + 1e-9).floor() as usize + 1
    });
    let positions = |a: usize| (0..out_ext[a]).map(move |i| i as f64 * step[a]);
    let values = match volume.kind {
        VolumeKind::Image => {
            let tables = [0, 1, 2].map(|a| AxisTable::from_positions(volume.extents[a], positions(a)));
            let x: Vec<f64> = volume.values.iter().map(|&v| v as f64).collect();
            interp_volume(&x, 1, &tables).into_iter().map(|v| v as f32).collect()
        }
        VolumeKind::Label => {
            let nearest: [Vec<usize>; 3] = [0, 1, 2].map(|a| {
                let last = volume.extents[a] - 1;
                positions(a).map(|p| (p.round() as usize).min(last)).collect()
            });
            let mut v = Vec::with_capacity(out_ext.iter().product());
            for &z in &nearest[0] {
                for &y in &nearest[1] {
                    for &x in &nearest[2] {
                        v.push(volume.get(z, y, x));
                    }
                }
            }
            v
        }
    };
    VolumeGrid::new(volume.kind, out_ext, [target; 3], volume.origin, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_already_isotropic() {
        let v = VolumeGrid::new(VolumeKind::Image, [3, 4, 5], [3.0; 3], [1.0, 2.0, 3.0], (0..60).map(|i| i as f32).collect()).unwrap();
        assert_eq!(resample_isotropic(&v, 3.0).unwrap(), v);
    }

    #[test]
    fn constants_survive_round_trip() {
        let v = VolumeGrid::filled(VolumeKind::Image, [20, 17, 9], [0.7, 2.0, 5.0], 0.3).unwrap();
        let r = resample_isotropic(&v, 3.0).unwrap();
        assert!(r.values.iter().all(|&x| x == 0.3));
        assert_eq!(r.spacing, [3.0; 3]);
        let back = resample_isotropic(&VolumeGrid { spacing: [3.0; 3], ..r.clone() }, 1.5).unwrap();
        assert!(back.values.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn labels_stay_binary_and_extent_is_preserved() {
        let vals = (0..16 * 16 * 16).map(|i| ((i / 5) % 2) as f32).collect();
        let v = VolumeGrid::new(VolumeKind::Label, [16, 16, 16], [7.0, 0.5, 3.0], [0.0; 3], vals).unwrap();
        let r = resample_isotropic(&v, 3.0).unwrap();
        assert!(r.is_binary());
        for a in 0..3 {
            let src = (v.extents[a] - 1) as f32 * v.spacing[a];
            let dst = (r.extents[a] - 1) as f32 * 3.0;
            assert!(dst <= src + 1e-4 && src - dst < 3.0, "axis {a}: {src} vs {dst}");
        }
    }

    #[test]
    fn rejects_non_positive_target() {
        let v = VolumeGrid::filled(VolumeKind::Image, [2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(resample_isotropic(&v, 0.0).is_err());
        assert!(resample_isotropic(&v, -1.0).is_err());
    }
}
