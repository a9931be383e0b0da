//! Dice overlap and average symmetric surface distance on binary volumes,
//! plus cohort summaries laid out like a results table.

use std::fmt::Write as _;

use crate::error::{contract, Error, Result};
use crate::phantom::{VolumeGrid, VolumeKind};

pub const TSV_HEADER: &str = "case\tdice\tasd_mean_mm\tasd_max_mm";

/// Voxels at or above `threshold` become foreground.
pub fn binarize(prob: &VolumeGrid, threshold: f32) -> Result<VolumeGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return contract(format!("threshold must lie in (0,1), got {threshold}"));
    }
    let values = prob.values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    VolumeGrid::new(VolumeKind::Label, prob.extents, prob.spacing, prob.origin, values)
}

fn check_pair(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.extents != b.extents {
        return contract(format!("mask extents differ: {:?} vs {:?}", a.extents, b.extents));
    }
    if a.spacing != b.spacing {
        return contract(format!("mask spacings differ: {:?} vs {:?}", a.spacing, b.spacing));
    }
    if !a.is_binary() || !b.is_binary() {
        return contract("masks must be binary");
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both masks are empty.
pub fn dice(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.values.iter().zip(&gt.values) {
        let (a, b) = (a != 0.0, b != 0.0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Foreground voxels with a 6-neighbour that is background or outside the
/// grid, in raster order.
pub fn surface_voxels(mask: &VolumeGrid) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.extents;
    let fg = |z: usize, y: usize, x: usize| mask.get(z, y, x) != 0.0;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !fg(z, y, x) {
                    continue;
                }
                let exposed = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !fg(z - 1, y, x)
                    || !fg(z + 1, y, x)
                    || !fg(z, y - 1, x)
                    || !fg(z, y + 1, x)
                    || !fg(z, y, x - 1)
                    || !fg(z, y, x + 1);
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Symmetric surface distances in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistance {
    /// Mean over both directed surface sets.
    pub mean_mm: f64,
    /// Largest directed distance in either direction.
    pub max_mm: f64,
}

/// Average symmetric surface distance. Both masks must be nonempty.
pub fn asd(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<SurfaceDistance> {
    check_pair(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() || sg.is_empty() {
        let which = match (sp.is_empty(), sg.is_empty()) {
            (true, true) => "both masks are",
            (true, false) => "prediction mask is",
            _ => "ground-truth mask is",
        };
        return Err(Error::UndefinedMetric(format!("surface distance undefined: {which} empty")));
    }
    let to_g = squared_distance_transform(&sg, gt.extents, gt.spacing);
    let to_p = squared_distance_transform(&sp, pred.extents, pred.spacing);
    let idx = |v: &[usize; 3]| (v[0] * gt.extents[1] + v[1]) * gt.extents[2] + v[2];
    // Each direction is summed on its own so that swapping the arguments
    // gives a bit-identical result.
    let directed = |from: &[[usize; 3]], dist: &[f64]| {
        from.iter().fold((0.0f64, 0.0f64), |(sum, max), v| {
            let d = dist[idx(v)].sqrt();
            (sum + d, max.max(d))
        })
    };
    let (a, ma) = directed(&sp, &to_g);
    let (b, mb) = directed(&sg, &to_p);
    Ok(SurfaceDistance { mean_mm: (a + b) / (sp.len() + sg.len()) as f64, max_mm: ma.max(mb) })
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// site, by separable lower envelopes of parabolas.
fn squared_distance_transform(sites: &[[usize; 3]], extents: [usize; 3], spacing: [f32; 3]) -> Vec<f64> {
    let [d, h, w] = extents;
    let mut f = vec![f64::INFINITY; d * h * w];
    for s in sites {
        f[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in [2, 1, 0] {
        let n = extents[axis];
        let s2 = (spacing[axis] as f64).powi(2);
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..extents[others[0]] {
            for j in 0..extents[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * stride]));
                lower_envelope(&line, s2, &mut out);
                for (k, v) in out.iter().enumerate() {
                    f[base + k * stride] = *v;
                }
            }
        }
    }
    f
}

/// `out[q] = min_p s2·(q−p)² + f[p]` over finite `f[p]`.
fn lower_envelope(f: &[f64], s2: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let cross = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                Some(&p) => {
                    let s = cross(q, p);
                    if s <= z[z.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(s);
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                }
            }
            break;
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = s2 * dq * dq + f[v[k]];
    }
}

/// Metrics of one scored case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub dice: f64,
    pub asd_mean_mm: f64,
    pub asd_max_mm: f64,
}

/// A case either scored or excluded with a reason.
#[derive(Clone, Debug, PartialEq)]
pub enum CaseEntry {
    Scored(CaseMetrics),
    Flagged { case: String, reason: String },
}

/// Scores one prediction against its ground truth; an empty mask flags the case.
pub fn evaluate_case(case: &str, pred: &VolumeGrid, gt: &VolumeGrid) -> Result<CaseEntry> {
    let dice = dice(pred, gt)?;
    match asd(pred, gt) {
        Ok(sd) => Ok(CaseEntry::Scored(CaseMetrics { case: case.into(), dice, asd_mean_mm: sd.mean_mm, asd_max_mm: sd.max_mm })),
        Err(Error::UndefinedMetric(reason)) => Ok(CaseEntry::Flagged { case: case.into(), reason }),
        Err(e) => Err(e),
    }
}

/// Mean, population std, min, max and median of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return contract("cannot summarize an empty sample");
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
        Ok(Self { mean, std, min: sorted[0], max: sorted[sorted.len() - 1], median })
    }
}

/// Per-case rows plus cohort statistics over the scored cases.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub flagged: Vec<(String, String)>,
    /// Over per-case mean ASD; `max` is the cohort's "Max" column.
    pub asd: Summary,
    pub dice: Summary,
    /// Over per-case maximum surface distance, reported separately.
    pub asd_max: Summary,
}

pub fn cohort_report(entries: &[CaseEntry]) -> Result<MetricsReport> {
    if entries.is_empty() {
        return contract("cohort report needs at least one case");
    }
    let mut cases = Vec::new();
    let mut flagged = Vec::new();
    for e in entries {
        match e {
            CaseEntry::Scored(m) => cases.push(m.clone()),
            CaseEntry::Flagged { case, reason } => flagged.push((case.clone(), reason.clone())),
        }
    }
    if cases.is_empty() {
        return Err(Error::UndefinedMetric(format!("all {} cases are flagged", flagged.len())));
    }
    let col = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).collect::<Vec<_>>();
    Ok(MetricsReport {
        asd: Summary::of(&col(|c| c.asd_mean_mm))?,
        dice: Summary::of(&col(|c| c.dice))?,
        asd_max: Summary::of(&col(|c| c.asd_max_mm))?,
        cases,
        flagged,
    })
}

impl MetricsReport {
    /// Tab-separated per-case rows, then a `#`-prefixed summary block.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(TSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", c.case, c.dice, c.asd_mean_mm, c.asd_max_mm);
        }
        let a = &self.asd;
        let d = &self.dice;
        let _ = writeln!(s, "# asd_mm\tmean={:.6}\tstd={:.6}\tmax={:.6}\tmedian={:.6}", a.mean, a.std, a.max, a.median);
        let _ = writeln!(s, "# dice\tmean={:.6}\tstd={:.6}\tmin={:.6}\tmedian={:.6}", d.mean, d.std, d.min, d.median);
        for (case, reason) in &self.flagged {
            let _ = writeln!(s, "# flagged\t{case}\t{reason}");
        }
        s
    }

    /// Two-tier summary table: ASD mean/std/max/median, then Dice mean/std/min/median.
    pub fn table(&self, method: &str) -> String {
        let a = &self.asd;
        let d = &self.dice;
        let width = method.len().max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:width$}  {:^31}  {:^31}", "", "ASD (mm)", "Dice");
        let _ = writeln!(
            s,
            "{:width$}  {:>7} {:>7} {:>7} {:>7}  {:>7} {:>7} {:>7} {:>7}",
            "Method", "Mean", "Std", "Max", "Median", "Mean", "Std", "Min", "Median"
        );
        let _ = writeln!(
            s,
            "{method:width$}  {:>7.3} {:>7.3} {:>7.3} {:>7.3}  {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            a.mean, a.std, a.max, a.median, d.mean, d.std, d.min, d.median
        );
        if !self.flagged.is_empty() {
            let _ = writeln!(s, "flagged (excluded from statistics):");
            for (case, reason) in &self.flagged {
                let _ = writeln!(s, "  {case}: {reason}");
            }
        }
        s
    }
}
