use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Entries smaller than this in both routes are compared absolutely.
const REL_FLOOR: f64 = 1e-6;
/// The floor also scales with the largest analytic gradient entry, so
/// entries negligible next to it are judged at the gradient's scale and
/// finite-difference roundoff on them does not dominate.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Worst discrepancy found for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst error of the plain central difference at `step`, whichever
    /// stencil decided the verdict.
    pub central_rel_error: f64,
}

/// Finite-difference formula used for the numeric gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    #[default]
    Central,
    /// Richardson extrapolation of central differences at `h` and `h/2`,
    /// `(4 D(h/2) - D(h)) / 3`, truncation error O(h⁴).
    Richardson,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    /// `(param, index)` entries whose stencil straddles a kink: the two
    /// one-sided slopes disagree and the analytic gradient matches one of
    /// them, which is then used in place of the central estimate.
    pub kinks: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn max_central_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.central_rel_error).fold(0.0, f64::max)
    }
}

/// Relative discrepancy `|a - n| / max(|a|, |n|, floor)`; the checkers use
/// `floor = max(1e-6, SCALE_FLOOR * max |gradient entry|)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every entry of every parameter.
///
/// `f` records the computation on a fresh tape given one variable per
/// parameter and returns the scalar output.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, step, tolerance, |_, _| {})
}

/// Like [`grad_check`], with a hook that may alter each analytic gradient
/// before comparison. Used to confirm the check catches corrupted gradients.
pub fn grad_check_with<T, F, P>(f: F, params: &[Tensor<T>], step: f64, tolerance: f64, perturb: P) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    P: Fn(usize, &mut [f64]),
{
    grad_check_stencil(f, params, step, tolerance, Stencil::Central, perturb)
}

/// The general form: chooses the finite-difference [`Stencil`].
pub fn grad_check_stencil<T, F, P>(
    f: F,
    params: &[Tensor<T>],
    step: f64,
    tolerance: f64,
    stencil: Stencil,
    perturb: P,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    P: Fn(usize, &mut [f64]),
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::arg(format!("finite-difference step {step} outside (0, 1e-3]")));
    }
    let mut report = GradCheckReport { entries: Vec::new(), tolerance, kinks: Vec::new() };
    if params.is_empty() {
        return Ok(report);
    }

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().to_f64_lossless())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossless()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    let scale = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = REL_FLOOR.max(SCALE_FLOOR * scale);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, mut analytic) in grads.into_iter().enumerate() {
        let n = params[pi].numel();
        perturb(pi, &mut analytic);
        let mut entry =
            GradCheckEntry { param: pi, max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, central_rel_error: 0.0 };
        for k in 0..n {
            let orig = work[pi].data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[k] = T::from_f64_lossy(orig.to_f64_lossless() + offset);
                let v = eval(&work);
                work[pi].data_mut()[k] = orig;
                v
            };
            let (up, down) = (at(step)?, at(-step)?);
            let coarse = (up - down) / (2.0 * step);
            let halves = match stencil {
                Stencil::Central => None,
                Stencil::Richardson => Some((at(step / 2.0)?, at(-step / 2.0)?)),
            };
            let numeric = match halves {
                None => coarse,
                Some((uh, dh)) => (4.0 * (uh - dh) / step - coarse) / 3.0,
            };
            entry.central_rel_error = entry.central_rel_error.max(relative_error_floored(analytic[k], coarse, floor));
            if !numeric.is_finite() || !analytic[k].is_finite() {
                return Err(Error::Numeric(format!("grad_check: non-finite gradient for parameter {pi} entry {k}")));
            }
            let mut rel = relative_error_floored(analytic[k], numeric, floor);
            if rel >= tolerance {
                if let Some((uh, dh)) = halves {
                    // Second-order one-sided differences with spacing h/2.
                    let mid = at(0.0)?;
                    let right = (-3.0 * mid + 4.0 * uh - up) / step;
                    let left = (3.0 * mid - 4.0 * dh + down) / step;
                    let best = relative_error_floored(analytic[k], left, floor).min(relative_error_floored(analytic[k], right, floor));
                    if relative_error_floored(left, right, floor) >= tolerance && best < tolerance {
                        report.kinks.push((pi, k));
                        rel = best;
                    }
                }
            }
            if rel > entry.max_rel_error || k == 0 {
                entry = GradCheckEntry { max_rel_error: rel, worst_index: k, analytic: analytic[k], numeric, ..entry };
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}
