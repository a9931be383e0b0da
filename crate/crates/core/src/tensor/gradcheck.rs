//! Central finite-difference checking of analytic gradients.

use rand::Rng;

use super::Tensor;
use crate::error::{contract, Result};

/// Knobs of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Perturbation added to and subtracted from each probed coordinate.
    pub step: f64,
    /// Coordinates probed per tensor; tensors at most this large are probed exhaustively.
    pub samples: usize,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Absolute scale below which gradient differences count as noise.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-3, samples: 10, tolerance: 1e-3, abs_floor: 1e-3 }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference at steps `h` and `h/2` combined by Richardson
/// extrapolation, cancelling the `h²` truncation term. Perturbed values are
/// rounded to f32 first and the actual spacing is used in the quotient.
fn richardson_derivative<F>(tensors: &mut [Tensor], t: usize, i: usize, h: f64, objective: &mut F) -> Result<f64>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Vec<Option<Vec<f32>>>)>,
{
    let orig = tensors[t].data()[i];
    let mut central = |h: f64| -> Result<f64> {
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;
        tensors[t].data_mut()[i] = plus;
        let (fp, _) = objective(tensors, false)?;
        tensors[t].data_mut()[i] = minus;
        let (fm, _) = objective(tensors, false)?;
        tensors[t].data_mut()[i] = orig;
        Ok((fp - fm) / (plus as f64 - minus as f64))
    };
    let coarse = central(h)?;
    let fine = central(h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Worst discrepancy found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// `(tensor index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares analytic gradients of a scalar objective against extrapolated
/// central differences.
///
/// `objective(tensors, want_grad)` returns the objective value in f64 and,
/// when `want_grad` is set, one gradient buffer per tensor (`None` for
/// tensors the objective does not depend on, which are treated as zero).
pub fn check_gradients<F, R>(
    name: &str,
    tensors: &mut [Tensor],
    mut objective: F,
    opts: &FdOptions,
    rng: &mut R,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Vec<Option<Vec<f32>>>)>,
    R: Rng,
{
    let (_, analytic) = objective(tensors, true)?;
    if analytic.len() != tensors.len() {
        return contract("objective returned the wrong number of gradients");
    }
    let mut report = FdReport { name: name.to_string(), max_rel_error: 0.0, tolerance: opts.tolerance, probes: 0, worst: (0, 0) };
    for t in 0..tensors.len() {
        let n = tensors[t].len();
        let coords: Vec<usize> = if n <= opts.samples {
            (0..n).collect()
        } else {
            (0..opts.samples).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            let numeric = richardson_derivative(tensors, t, i, opts.step, &mut objective)?;
            let a = analytic[t].as_ref().map_or(0.0, |g| g[i] as f64);
            let mut err = relative_error(a, numeric, opts.abs_floor);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            report.probes += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, i);
            }
        }
    }
    Ok(report)
}
