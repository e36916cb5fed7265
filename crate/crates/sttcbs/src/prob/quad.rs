//! Adaptive Simpson quadrature and a golden-section maximizer.
//!
//! The integrands in this crate are smooth except for isolated kinks (callers
//! split at those) and integrable endpoint singularities (callers substitute
//! them away). A panel is accepted when its Richardson estimate falls below
//! the local budget or the depth cap is reached; unresolved error is
//! accumulated so the caller can compare the total against its tolerance
//! instead of silently truncating.

use super::ProbError;

#[derive(Debug, Clone, Copy)]
pub(crate) struct QuadResult {
    pub value: f64,
    pub err: f64,
}

impl QuadResult {
    pub fn zero() -> Self {
        QuadResult { value: 0.0, err: 0.0 }
    }

    pub fn add(&mut self, other: QuadResult) {
        self.value += other.value;
        self.err += other.err;
    }
}

/// First levels are always refined: a shallow Richardson estimate can alias
/// on integrands whose structure sits between the five base samples.
const MIN_DEPTH: u32 = 4;

pub(crate) fn adaptive_simpson<F>(
    f: &mut F,
    a: f64,
    b: f64,
    tol: f64,
    max_depth: u32,
) -> Result<QuadResult, ProbError>
where
    F: FnMut(f64) -> Result<f64, ProbError>,
{
    if !(b > a) {
        return Ok(QuadResult::zero());
    }
    let m = 0.5 * (a + b);
    let fa = f(a)?;
    let fm = f(m)?;
    let fb = f(b)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut out = QuadResult::zero();
    let force = MIN_DEPTH.min(max_depth);
    step(f, a, b, fa, fm, fb, whole, tol, max_depth, force, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn step<F>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    force: u32,
    out: &mut QuadResult,
) -> Result<(), ProbError>
where
    F: FnMut(f64) -> Result<f64, ProbError>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    // Interval too narrow to split further in f64.
    let degenerate = lm <= a || rm <= m || m <= lm || b <= rm;
    let converged = force == 0 && delta.abs() <= 15.0 * tol;
    if depth == 0 || converged || degenerate {
        out.value += left + right + delta / 15.0;
        out.err += delta.abs() / 15.0;
        return Ok(());
    }
    let force = force.saturating_sub(1);
    step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, force, out)?;
    step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, force, out)
}

/// Locate the maximum of a unimodal function on `[a, b]`.
pub(crate) fn golden_section_max<F>(
    f: &mut F,
    mut a: f64,
    mut b: f64,
    iters: u32,
) -> Result<f64, ProbError>
where
    F: FnMut(f64) -> Result<f64, ProbError>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    if !(b > a) {
        return Ok(a);
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}
