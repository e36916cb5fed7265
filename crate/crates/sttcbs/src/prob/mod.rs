//! Gamma special functions and the analytic conflict-probability integrals.
//!
//! Delay accumulated over a path is `Gamma(n, lambda)` with `n` the sum of the
//! shapes of the traversed nodes. A conflict between two agents at a node is
//! the event that both are present simultaneously; conditioning on the
//! difference of their accumulated delays `y` reduces it to
//!
//! ```text
//! P = integral over y of  p(y) * Tail(|delta + y|; n_m, lambda) dy
//! ```
//!
//! where `delta` is the planned arrival gap and `Tail` is the upper tail of
//! the hold-time distribution at the conflict node. Edge conflicts (opposing
//! traversals) reduce to a single integral against the gamma CDF. All
//! integrals are evaluated by adaptive Simpson quadrature on a window that
//! omits at most `tail_mass` of each gamma factor, with splits at kinks and
//! at the numerically located mode of the difference density.
//!
//! Cumulative shapes of zero are accepted in queries and treated as a point
//! mass at zero delay: an agent evaluated at its own start node has traversed
//! no nodes yet.

mod quad;

use quad::{adaptive_simpson, golden_section_max, QuadResult};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use std::cell::RefCell;
use std::collections::HashMap;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProbError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("quadrature did not converge: error estimate {err:.3e} exceeds tolerance {tol:.3e}")]
    NonConvergence { err: f64, tol: f64 },
    #[error("difference density diverges at y = 0 when shapes sum to {0} <= 1")]
    DivergentDensity(f64),
    #[error("quadrature returned {0:.3e}, below -abs_tol")]
    NegativeProbability(f64),
}

fn require(cond: bool, msg: &str) -> Result<(), ProbError> {
    if cond {
        Ok(())
    } else {
        Err(ProbError::InvalidParams(msg.to_string()))
    }
}

/// Shape/rate parameters of a gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    shape: f64,
    rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self, ProbError> {
        require(shape.is_finite() && shape > 0.0, "gamma shape must be positive and finite")?;
        require(rate.is_finite() && rate > 0.0, "gamma rate must be positive and finite")?;
        Ok(GammaParams { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Gamma density, zero on the nonpositive axis. Evaluated in log space.
pub fn gamma_pdf(x: f64, p: &GammaParams) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return 0.0;
    }
    let power = if p.shape == 1.0 { 0.0 } else { (p.shape - 1.0) * x.ln() };
    (p.shape * p.rate.ln() + power - p.rate * x - ln_gamma(p.shape)).exp()
}

/// Regularized lower incomplete gamma P(n, lambda x).
pub fn gamma_cdf(x: f64, p: &GammaParams) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(p.shape, p.rate * x)
}

/// Upper tail 1 - cdf(x), computed without cancellation.
pub fn gamma_tail(x: f64, p: &GammaParams) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(p.shape, p.rate * x)
}

thread_local! {
    static QUANTILE_CACHE: RefCell<HashMap<(u64, u64, u64), f64>> = RefCell::new(HashMap::new());
}

/// Smallest x with cdf(x) >= prob, by bisection. Cached per thread: the
/// solver asks for the same handful of (shape, rate, mass) triples thousands
/// of times while sweeping conflicts.
pub fn gamma_quantile(prob: f64, p: &GammaParams) -> f64 {
    assert!((0.0..1.0).contains(&prob), "quantile probability must be in [0, 1)");
    if prob == 0.0 {
        return 0.0;
    }
    let key = (prob.to_bits(), p.shape.to_bits(), p.rate.to_bits());
    if let Some(v) = QUANTILE_CACHE.with(|c| c.borrow().get(&key).copied()) {
        return v;
    }
    let mut hi = (p.shape + 10.0 * p.shape.sqrt() + 20.0) / p.rate;
    while gamma_cdf(hi, p) < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if gamma_cdf(mid, p) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let v = 0.5 * (lo + hi);
    QUANTILE_CACHE.with(|c| c.borrow_mut().insert(key, v));
    v
}

/// Controls for the probability quadratures.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    /// Absolute tolerance on a returned probability.
    pub abs_tol: f64,
    /// Gamma mass allowed outside the truncated integration window, per
    /// integration variable.
    pub tail_mass: f64,
    /// Maximum interval-halving depth of the adaptive rule.
    pub max_subdivisions: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { abs_tol: 1e-6, tail_mass: 1e-9, max_subdivisions: 50 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<(), ProbError> {
        require(self.abs_tol > 0.0 && self.abs_tol < 1.0, "abs_tol must be in (0, 1)")?;
        require(
            self.tail_mass > 0.0 && self.tail_mass < self.abs_tol,
            "tail_mass must be in (0, abs_tol)",
        )?;
        require(self.max_subdivisions >= 8, "max_subdivisions must be at least 8")
    }
}

/// Parameters of a node conflict between two scheduled visits.
///
/// `delta` is the planned arrival gap `t_A1 - t_A2` at the node, `n1`/`n2`
/// the cumulative shapes accumulated strictly before the node (zero allowed:
/// the visit is the agent's start), `n_m` the shape of the node itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeConflictQuery {
    pub delta: f64,
    pub n1: f64,
    pub n2: f64,
    pub n_m: f64,
    pub lambda: f64,
}

impl NodeConflictQuery {
    pub fn new(delta: f64, n1: f64, n2: f64, n_m: f64, lambda: f64) -> Result<Self, ProbError> {
        require(delta.is_finite(), "delta must be finite")?;
        require(n1.is_finite() && n1 >= 0.0, "n1 must be nonnegative and finite")?;
        require(n2.is_finite() && n2 >= 0.0, "n2 must be nonnegative and finite")?;
        require(n_m.is_finite() && n_m > 0.0, "n_m must be positive and finite")?;
        require(lambda.is_finite() && lambda > 0.0, "lambda must be positive and finite")?;
        Ok(NodeConflictQuery { delta, n1, n2, n_m, lambda })
    }
}

/// Parameters of an opposing-edge conflict. `delta = t_A1 - t_A2` is the gap
/// between the planned entry times at the two ends, `n1`/`n2` the cumulative
/// shapes at entry, `t_e` the nominal traversal time of the edge (or merged
/// segment).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeConflictQuery {
    pub delta: f64,
    pub n1: f64,
    pub n2: f64,
    pub t_e: f64,
    pub lambda: f64,
}

impl EdgeConflictQuery {
    pub fn new(delta: f64, n1: f64, n2: f64, t_e: f64, lambda: f64) -> Result<Self, ProbError> {
        require(delta.is_finite(), "delta must be finite")?;
        require(n1.is_finite() && n1 >= 0.0, "n1 must be nonnegative and finite")?;
        require(n2.is_finite() && n2 >= 0.0, "n2 must be nonnegative and finite")?;
        require(t_e.is_finite() && t_e >= 0.0, "t_e must be nonnegative and finite")?;
        require(lambda.is_finite() && lambda > 0.0, "lambda must be positive and finite")?;
        Ok(EdgeConflictQuery { delta, n1, n2, t_e, lambda })
    }
}

/// Integrand `G(v + t | a, lambda) * G(t | b, lambda)` for the difference
/// density, with the constant factors hoisted out of the hot loop.
struct ProductIntegrand {
    a: f64,
    b: f64,
    lambda: f64,
    v: f64,
    ln_norm: f64,
}

impl ProductIntegrand {
    fn new(a: f64, b: f64, lambda: f64, v: f64) -> Self {
        let ln_norm = (a + b) * lambda.ln() - ln_gamma(a) - ln_gamma(b) - lambda * v;
        ProductIntegrand { a, b, lambda, v, ln_norm }
    }

    fn ln_eval(&self, t: f64) -> f64 {
        let pa = if self.a == 1.0 { 0.0 } else { (self.a - 1.0) * (self.v + t).ln() };
        let pb = if self.b == 1.0 { 0.0 } else { (self.b - 1.0) * t.ln() };
        self.ln_norm + pa + pb - 2.0 * self.lambda * t
    }

    fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            // Singular or zero endpoint; panels touching it are substituted.
            return 0.0;
        }
        let v = self.ln_eval(t).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }

    /// Interior critical point of the log-integrand, from
    /// 2*lambda*t^2 + (2*lambda*v + 2 - a - b)*t - (b - 1)*v = 0.
    fn mode(&self) -> f64 {
        let two_l = 2.0 * self.lambda;
        let bq = two_l * self.v + 2.0 - self.a - self.b;
        let cq = -(self.b - 1.0) * self.v;
        let disc = bq * bq - 4.0 * two_l * cq;
        if disc < 0.0 {
            return 0.0;
        }
        let root = (-bq + disc.sqrt()) / (2.0 * two_l);
        root.max(0.0)
    }
}

/// `integral of G(v + t | a) G(t | b) dt over t >= 0`, the density of the
/// difference of two gamma variables at distance `v >= 0` from zero.
fn product_integral(
    a: f64,
    b: f64,
    lambda: f64,
    v: f64,
    tol: f64,
    max_depth: u32,
) -> Result<QuadResult, ProbError> {
    let f = ProductIntegrand::new(a, b, lambda, v);
    let sing_exp = if v > 0.0 { b - 1.0 } else { a + b - 2.0 };
    if v == 0.0 && a + b <= 1.0 {
        return Err(ProbError::DivergentDensity(a + b));
    }

    let mode = f.mode();
    // Beyond t0 the log-integrand decays at rate >= lambda, so extend until
    // the remaining tail is negligible against the tolerance.
    let t0 = {
        let poly = ((a - 1.0).max(0.0) + (b - 1.0).max(0.0)) / lambda;
        mode.max(poly).max(1.0 / lambda)
    };
    let ln_cutoff = (tol.max(1e-300) / 4.0 * lambda).ln();
    let mut hi = t0 + 2.0 / lambda;
    for _ in 0..200 {
        if f.ln_eval(hi) <= ln_cutoff {
            break;
        }
        hi += 4.0 / lambda;
    }
    let tail_err = (f.ln_eval(hi) - lambda.ln()).exp();

    let mut edges: Vec<f64> = vec![0.0, hi];
    if mode > 0.0 && mode < hi {
        edges.push(mode);
    }

    let mut total = QuadResult { value: 0.0, err: tail_err };
    if sing_exp < 0.0 {
        // Substitute t = u^p on the first panel so the integrand is
        // continuous at the origin.
        let p = (1.0 / (sing_exp + 1.0)).ceil() + 1.0;
        let split = if mode > 0.0 { mode } else { hi / 8.0 };
        edges.retain(|&e| e >= split || e == 0.0);
        edges.push(split);
        let u_hi = split.powf(1.0 / p);
        let mut g = |u: f64| -> Result<f64, ProbError> {
            if u <= 0.0 {
                return Ok(0.0);
            }
            let t = u.powf(p);
            Ok((f.ln_eval(t) + p.ln() + (p - 1.0) * u.ln()).exp())
        };
        total.add(adaptive_simpson(&mut g, 0.0, u_hi, 0.5 * tol, max_depth)?);
        edges.retain(|&e| e > 0.0);
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup();

    let mut h = |t: f64| -> Result<f64, ProbError> { Ok(f.eval(t)) };
    let panels = (edges.len() - 1).max(1) as f64;
    for w in edges.windows(2) {
        total.add(adaptive_simpson(&mut h, w[0], w[1], 0.5 * tol / panels, max_depth)?);
    }
    Ok(total)
}

/// Density of `y = nu_1 - nu_2` with `nu_i ~ Gamma(n_i, lambda)` independent,
/// by quadrature of the convolution integral. A shape of zero denotes a point
/// mass at zero delay. Diverges at `y = 0` when `n1 + n2 <= 1`.
pub fn diff_density(
    y: f64,
    n1: f64,
    n2: f64,
    lambda: f64,
    cfg: &QuadratureConfig,
) -> Result<f64, ProbError> {
    cfg.validate()?;
    require(y.is_finite(), "y must be finite")?;
    require(n1.is_finite() && n1 >= 0.0, "n1 must be nonnegative")?;
    require(n2.is_finite() && n2 >= 0.0, "n2 must be nonnegative")?;
    require(lambda.is_finite() && lambda > 0.0, "lambda must be positive")?;
    require(n1 > 0.0 || n2 > 0.0, "at least one shape must be positive")?;
    if n1 == 0.0 {
        let p = GammaParams::new(n2, lambda)?;
        return Ok(gamma_pdf(-y, &p));
    }
    if n2 == 0.0 {
        let p = GammaParams::new(n1, lambda)?;
        return Ok(gamma_pdf(y, &p));
    }
    let (v, a, b) = if y >= 0.0 { (y, n1, n2) } else { (-y, n2, n1) };
    let r = product_integral(a, b, lambda, v, cfg.abs_tol, cfg.max_subdivisions)?;
    if r.err > cfg.abs_tol {
        return Err(ProbError::NonConvergence { err: r.err, tol: cfg.abs_tol });
    }
    Ok(r.value.max(0.0))
}

fn clamp_probability(raw: f64, cfg: &QuadratureConfig) -> Result<f64, ProbError> {
    if raw < -cfg.abs_tol {
        return Err(ProbError::NegativeProbability(raw));
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// Integrate `pdf(x | shape, lambda) * g(x)` over `[0, hi]` with extra split
/// points and a substituted first panel when the density is singular at zero.
fn gamma_weighted_integral<G>(
    shape: f64,
    lambda: f64,
    hi: f64,
    kinks: &[f64],
    g: &mut G,
    tol: f64,
    max_depth: u32,
) -> Result<QuadResult, ProbError>
where
    G: FnMut(f64) -> f64,
{
    let p = GammaParams::new(shape, lambda)?;
    if !(hi > 0.0) {
        return Ok(QuadResult::zero());
    }
    let mut edges: Vec<f64> = vec![0.0, hi];
    let mode = (shape - 1.0).max(0.0) / lambda;
    if mode > 0.0 && mode < hi {
        edges.push(mode);
    }
    for &k in kinks {
        if k > 0.0 && k < hi {
            edges.push(k);
        }
    }
    let mut total = QuadResult::zero();
    if shape < 1.0 {
        let power = (1.0 / shape).ceil() + 1.0;
        let split_cap = (hi / 8.0).min(1.0 / lambda);
        let split = edges
            .iter()
            .copied()
            .filter(|&e| e > 0.0)
            .fold(split_cap, f64::min)
            .min(split_cap);
        let u_hi = split.powf(1.0 / power);
        let mut sub = |u: f64| -> Result<f64, ProbError> {
            if u <= 0.0 {
                return Ok(0.0);
            }
            let x = u.powf(power);
            Ok(gamma_pdf(x, &p) * g(x) * power * u.powf(power - 1.0))
        };
        total.add(adaptive_simpson(&mut sub, 0.0, u_hi, 0.5 * tol, max_depth)?);
        edges.retain(|&e| e >= split);
        edges.push(split);
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let mut f = |x: f64| -> Result<f64, ProbError> { Ok(gamma_pdf(x, &p) * g(x)) };
    let panels = (edges.len() - 1).max(1) as f64;
    for w in edges.windows(2) {
        total.add(adaptive_simpson(&mut f, w[0], w[1], 0.5 * tol / panels, max_depth)?);
    }
    Ok(total)
}

fn quantile_or_zero(shape: f64, lambda: f64, mass: f64) -> f64 {
    if shape == 0.0 {
        0.0
    } else {
        let p = GammaParams::new(shape, lambda).expect("validated shape");
        gamma_quantile(1.0 - mass, &p)
    }
}

/// Shared core of the node-conflict and goal-occupancy probabilities:
/// `integral of p(y) * weight(delta + y) dy` with `y = nu_1 - nu_2`.
/// `one_sided = false` weights by `Tail(|delta + y|)` (both agents depart),
/// `one_sided = true` by `Tail((delta + y)^+)` (agent 1 never departs).
fn occupancy_prob(
    delta: f64,
    n1: f64,
    n2: f64,
    n_m: f64,
    lambda: f64,
    one_sided: bool,
    cfg: &QuadratureConfig,
) -> Result<f64, ProbError> {
    cfg.validate()?;
    let hold = GammaParams::new(n_m, lambda)?;
    let weight = move |x: f64| -> f64 {
        let arg = if one_sided { x.max(0.0) } else { x.abs() };
        gamma_tail(arg, &hold)
    };

    if n1 == 0.0 && n2 == 0.0 {
        return Ok(weight(delta));
    }
    let max_depth = cfg.max_subdivisions;
    if n1 == 0.0 || n2 == 0.0 {
        // One delay is deterministic: a single integral against the other.
        let (shape, sign) = if n1 == 0.0 { (n2, -1.0) } else { (n1, 1.0) };
        let hi = quantile_or_zero(shape, lambda, cfg.tail_mass);
        let kink = -delta * sign;
        let mut g = |x: f64| weight(delta + sign * x);
        let r = gamma_weighted_integral(shape, lambda, hi, &[kink], &mut g, 0.5 * cfg.abs_tol, max_depth)?;
        let err = r.err + cfg.tail_mass;
        if err > cfg.abs_tol {
            return Err(ProbError::NonConvergence { err, tol: cfg.abs_tol });
        }
        return clamp_probability(r.value, cfg);
    }

    let q1 = quantile_or_zero(n1, lambda, 0.5 * cfg.tail_mass);
    let q2 = quantile_or_zero(n2, lambda, 0.5 * cfg.tail_mass);
    let (y_lo, y_hi) = (-q2, q1);
    let width = y_hi - y_lo;
    let inner_tol = (cfg.abs_tol / (16.0 * width.max(1.0))).max(1e-13);

    let mut inner_err: f64 = 0.0;
    let mut density = |y: f64| -> Result<f64, ProbError> {
        let (v, a, b) = if y >= 0.0 { (y, n1, n2) } else { (-y, n2, n1) };
        let r = product_integral(a, b, lambda, v, inner_tol, max_depth)?;
        inner_err = inner_err.max(r.err);
        Ok(r.value)
    };

    // Split at the weight kink, at y = 0 (density kink), and at the density
    // mode located by golden section.
    let mut edges = vec![y_lo, y_hi];
    let mode = golden_section_max(&mut density, y_lo, y_hi, 24)?;
    for e in [-delta, 0.0, mode] {
        if e > y_lo && e < y_hi {
            edges.push(e);
        }
    }
    // The density itself diverges at y = 0 when shapes sum below one; leave a
    // gap whose omitted mass is accounted in the error tally, and grade the
    // panels geometrically into the logarithmic edge.
    let mut gap_err = 0.0;
    if n1 + n2 <= 1.0 {
        let eta = 1e-9 / lambda;
        edges.retain(|&e| e.abs() > eta);
        let mut probe: f64 = 0.0;
        let mut graded = eta;
        while graded < 1.0 / lambda {
            if graded < y_hi {
                edges.push(graded);
            }
            if -graded > y_lo {
                edges.push(-graded);
            }
            graded *= 10.0;
        }
        if y_hi > eta {
            probe = probe.max(density(eta)?);
        }
        if y_lo < -eta {
            probe = probe.max(density(-eta)?);
        }
        gap_err = 4.0 * eta * probe.max(1.0);
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup();

    let mut f = |y: f64| -> Result<f64, ProbError> { Ok(density(y)? * weight(y + delta)) };
    let mut total = QuadResult::zero();
    let panels = (edges.len() - 1).max(1) as f64;
    for w in edges.windows(2) {
        // The window straddling y = 0 is the divergence gap left on purpose.
        if n1 + n2 <= 1.0 && w[0] < 0.0 && w[1] > 0.0 {
            continue;
        }
        total.add(adaptive_simpson(&mut f, w[0], w[1], 0.5 * cfg.abs_tol / panels, max_depth)?);
    }
    let err = total.err + inner_err * width + cfg.tail_mass + gap_err;
    if err > cfg.abs_tol {
        return Err(ProbError::NonConvergence { err, tol: cfg.abs_tol });
    }
    clamp_probability(total.value, cfg)
}

/// Probability that two agents are simultaneously present at a node.
pub fn node_conflict_prob(q: &NodeConflictQuery, cfg: &QuadratureConfig) -> Result<f64, ProbError> {
    occupancy_prob(q.delta, q.n1, q.n2, q.n_m, q.lambda, false, cfg)
}

/// Cheap rigorous upper bound on [`node_conflict_prob`], used to screen far
/// separated visit pairs before paying for the full quadrature.
pub fn node_conflict_prob_bound(q: &NodeConflictQuery, cfg: &QuadratureConfig) -> f64 {
    let q1 = quantile_or_zero(q.n1, q.lambda, 0.5 * cfg.tail_mass);
    let q2 = quantile_or_zero(q.n2, q.lambda, 0.5 * cfg.tail_mass);
    let t = -q.delta;
    let x0 = if t < -q2 {
        -q2 - t
    } else if t > q1 {
        t - q1
    } else {
        0.0
    };
    let hold = GammaParams::new(q.n_m, q.lambda).expect("validated query");
    (gamma_tail(x0, &hold) + cfg.tail_mass).min(1.0)
}

/// Probability that a visiting agent is still present at a node when a
/// resident agent (parked there for good) arrives. `delta` is the resident's
/// planned arrival minus the visitor's.
pub fn goal_occupancy_conflict_prob(
    delta: f64,
    n_resident: f64,
    n_visitor: f64,
    n_m: f64,
    lambda: f64,
    cfg: &QuadratureConfig,
) -> Result<f64, ProbError> {
    require(delta.is_finite(), "delta must be finite")?;
    require(n_resident.is_finite() && n_resident >= 0.0, "n_resident must be nonnegative")?;
    require(n_visitor.is_finite() && n_visitor >= 0.0, "n_visitor must be nonnegative")?;
    occupancy_prob(delta, n_resident, n_visitor, n_m, lambda, true, cfg)
}

/// Upper bound companion of [`goal_occupancy_conflict_prob`].
pub fn goal_occupancy_prob_bound(
    delta: f64,
    n_resident: f64,
    n_visitor: f64,
    n_m: f64,
    lambda: f64,
    cfg: &QuadratureConfig,
) -> f64 {
    let q_vis = quantile_or_zero(n_visitor, lambda, 0.5 * cfg.tail_mass);
    let x0 = (delta - q_vis).max(0.0);
    let _ = n_resident;
    let hold = GammaParams::new(n_m, lambda).expect("validated query");
    (gamma_tail(x0, &hold) + cfg.tail_mass).min(1.0)
}

/// Probability that two agents traversing an edge (or merged segment) of
/// nominal time `t_e` in opposite directions are on it simultaneously:
/// the event `|nu_2 - nu_1 - delta| <= t_e`.
pub fn edge_conflict_prob(q: &EdgeConflictQuery, cfg: &QuadratureConfig) -> Result<f64, ProbError> {
    cfg.validate()?;
    let EdgeConflictQuery { delta, n1, n2, t_e, lambda } = *q;
    if t_e == 0.0 {
        return Ok(0.0);
    }
    if n1 == 0.0 && n2 == 0.0 {
        return Ok(if delta.abs() <= t_e { 1.0 } else { 0.0 });
    }
    if n1 == 0.0 {
        let p2 = GammaParams::new(n2, lambda)?;
        let raw = gamma_cdf(delta + t_e, &p2) - gamma_cdf(delta - t_e, &p2);
        return clamp_probability(raw, cfg);
    }
    if n2 == 0.0 {
        let p1 = GammaParams::new(n1, lambda)?;
        let raw = gamma_cdf(-delta + t_e, &p1) - gamma_cdf(-delta - t_e, &p1);
        return clamp_probability(raw, cfg);
    }
    let p2 = GammaParams::new(n2, lambda)?;
    let hi = quantile_or_zero(n1, lambda, cfg.tail_mass);
    let kinks = [-delta - t_e, -delta + t_e];
    let mut g = |e: f64| gamma_cdf(e + delta + t_e, &p2) - gamma_cdf(e + delta - t_e, &p2);
    let r = gamma_weighted_integral(n1, lambda, hi, &kinks, &mut g, 0.5 * cfg.abs_tol, cfg.max_subdivisions)?;
    let err = r.err + cfg.tail_mass;
    if err > cfg.abs_tol {
        return Err(ProbError::NonConvergence { err, tol: cfg.abs_tol });
    }
    clamp_probability(r.value, cfg)
}

/// Upper bound companion of [`edge_conflict_prob`].
pub fn edge_conflict_prob_bound(q: &EdgeConflictQuery, cfg: &QuadratureConfig) -> f64 {
    if q.t_e == 0.0 {
        return 0.0;
    }
    // Conditioning either way: with the outer delay confined to its quantile
    // window, the inner delay must land in an interval of width 2 t_e + window.
    let bound_given = |n_out: f64, n_in: f64, delta: f64| -> f64 {
        if n_in == 0.0 {
            return 1.0;
        }
        let hi_out = quantile_or_zero(n_out, q.lambda, 0.5 * cfg.tail_mass);
        let p_in = GammaParams::new(n_in, q.lambda).expect("validated query");
        gamma_cdf(delta + q.t_e + hi_out, &p_in) - gamma_cdf(delta - q.t_e, &p_in)
    };
    let b1 = bound_given(q.n1, q.n2, q.delta);
    let b2 = bound_given(q.n2, q.n1, -q.delta);
    (b1.min(b2) + cfg.tail_mass).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn pdf_zero_on_nonpositive_axis() {
        let p = GammaParams::new(2.5, 5.0).unwrap();
        assert_eq!(gamma_pdf(-1.0, &p), 0.0);
        assert_eq!(gamma_pdf(0.0, &p), 0.0);
    }

    #[test]
    fn pdf_matches_exponential_closed_form() {
        // shape 1 is Exp(lambda): pdf(0.2) = 5 e^{-1}
        let p = GammaParams::new(1.0, 5.0).unwrap();
        let expect = 5.0 * (-1.0f64).exp();
        assert!((gamma_pdf(0.2, &p) - expect).abs() < 1e-12);
    }

    #[test]
    fn pdf_integrates_to_one() {
        for shape in [0.5, 1.0, 3.0, 10.0] {
            for rate in [1.0, 5.0] {
                let p = GammaParams::new(shape, rate).unwrap();
                let hi = gamma_quantile(1.0 - 1e-12, &p);
                let mut f = |x: f64| Ok(gamma_pdf(x, &p));
                let r = adaptive_simpson(&mut f, 0.0, hi, 1e-9, 60).unwrap();
                let tol = if shape == 3.0 { 1e-9 } else { 1e-6 };
                assert!(
                    (r.value - 1.0).abs() < tol,
                    "shape {shape} rate {rate}: integral {} err {}",
                    r.value,
                    r.err
                );
            }
        }
    }

    #[test]
    fn cdf_matches_exponential_closed_form() {
        let p = GammaParams::new(1.0, 5.0).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!((gamma_cdf(0.2, &p) - expect).abs() < 1e-12);
        assert_eq!(gamma_cdf(0.0, &p), 0.0);
    }

    #[test]
    fn cdf_monotone_and_normalized() {
        let p = GammaParams::new(2.5, 5.0).unwrap();
        let mut prev = 0.0;
        for i in 0..200 {
            let x = i as f64 * 0.05;
            let c = gamma_cdf(x, &p);
            assert!(c >= prev);
            prev = c;
        }
        assert!((gamma_cdf(1e6, &p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let p = GammaParams::new(3.0, 5.0).unwrap();
        for q in [0.1, 0.5, 0.9, 1.0 - 1e-9] {
            let x = gamma_quantile(q, &p);
            assert!((gamma_cdf(x, &p) - q).abs() < 1e-9, "q={q}");
        }
    }

    #[test]
    fn diff_density_laplace_at_zero() {
        // Difference of two Exp(5) variables is Laplace(0, 1/5): density at
        // zero is lambda / 2.
        let d = diff_density(0.0, 1.0, 1.0, 5.0, &cfg()).unwrap();
        assert!((d - 2.5).abs() < 1e-7, "got {d}");
    }

    #[test]
    fn diff_density_symmetric_for_equal_shapes() {
        for y in [0.1, 0.5, 1.0] {
            let a = diff_density(y, 3.0, 3.0, 5.0, &cfg()).unwrap();
            let b = diff_density(-y, 3.0, 3.0, 5.0, &cfg()).unwrap();
            assert!((a - b).abs() < 2e-6, "y={y}: {a} vs {b}");
        }
    }

    #[test]
    fn diff_density_integrates_to_one() {
        for (n1, n2) in [(0.5, 0.5), (1.0, 1.0), (3.0, 1.0), (10.0, 3.0), (0.5, 3.0)] {
            for lambda in [1.0, 5.0] {
                // Density evaluations an order tighter than the 1e-6 the
                // integral is checked to, so pointwise error cannot leak.
                let c = QuadratureConfig { abs_tol: 1e-9, tail_mass: 1e-12, max_subdivisions: 60 };
                let p1 = GammaParams::new(n1, lambda).unwrap();
                let p2 = GammaParams::new(n2, lambda).unwrap();
                let hi = gamma_quantile(1.0 - 1e-10, &p1);
                let lo = -gamma_quantile(1.0 - 1e-10, &p2);
                let mut f = |y: f64| diff_density(y, n1, n2, lambda, &c);
                // Panels graded geometrically toward the (possibly
                // log-singular) origin.
                let gap = if n1 + n2 <= 1.0 { 1e-9 / lambda } else { 0.0 };
                let mut edges = vec![lo, -gap, gap, hi];
                let mut g = 1e-9 / lambda;
                while g < 1.0 / lambda {
                    edges.push(g);
                    edges.push(-g);
                    g *= 10.0;
                }
                edges.retain(|&e| e >= lo && e <= hi && e.abs() >= gap);
                edges.sort_by(f64::total_cmp);
                edges.dedup();
                let mut total = 0.0;
                for w in edges.windows(2) {
                    if w[0] < 0.0 && w[1] > 0.0 && gap > 0.0 {
                        continue;
                    }
                    total += adaptive_simpson(&mut f, w[0], w[1], 2e-8, 60).unwrap().value;
                }
                assert!(
                    (total - 1.0).abs() < 1e-6,
                    "n1={n1} n2={n2} lambda={lambda}: mass {total}"
                );
            }
        }
    }

    #[test]
    fn diff_density_divergent_at_origin_reported() {
        let err = diff_density(0.0, 0.5, 0.5, 5.0, &cfg()).unwrap_err();
        assert!(matches!(err, ProbError::DivergentDensity(_)));
    }

    #[test]
    fn node_prob_exponential_closed_form() {
        // n1 = n2 = n_m = 1: P = E[exp(-lambda |y|)] with |y| ~ Exp(lambda),
        // which is exactly 1/2 at delta = 0.
        let q = NodeConflictQuery::new(0.0, 1.0, 1.0, 1.0, 5.0).unwrap();
        let p = node_conflict_prob(&q, &cfg()).unwrap();
        assert!((p - 0.5).abs() < 2e-6, "got {p}");
    }

    #[test]
    fn node_prob_symmetry() {
        for delta in [0.5, 2.0] {
            let a = node_conflict_prob(
                &NodeConflictQuery::new(delta, 3.0, 3.0, 1.0, 5.0).unwrap(),
                &cfg(),
            )
            .unwrap();
            let b = node_conflict_prob(
                &NodeConflictQuery::new(-delta, 3.0, 3.0, 1.0, 5.0).unwrap(),
                &cfg(),
            )
            .unwrap();
            assert!((a - b).abs() < 2e-6, "delta={delta}: {a} vs {b}");
        }
        // Asymmetric shapes: swapping agents negates delta.
        let a = node_conflict_prob(
            &NodeConflictQuery::new(0.7, 3.0, 1.0, 2.0, 5.0).unwrap(),
            &cfg(),
        )
        .unwrap();
        let b = node_conflict_prob(
            &NodeConflictQuery::new(-0.7, 1.0, 3.0, 2.0, 5.0).unwrap(),
            &cfg(),
        )
        .unwrap();
        assert!((a - b).abs() < 2e-6, "{a} vs {b}");
    }

    #[test]
    fn node_prob_vanishes_at_large_separation() {
        let q = NodeConflictQuery::new(1e6, 1.0, 1.0, 1.0, 5.0).unwrap();
        let p = node_conflict_prob(&q, &cfg()).unwrap();
        assert!(p <= 1e-9, "got {p}");
        let b = node_conflict_prob_bound(&q, &cfg());
        assert!(b <= 1e-8, "bound {b}");
    }

    #[test]
    fn node_prob_bound_dominates() {
        for delta in [-3.0, -1.0, 0.0, 0.5, 2.0, 5.0] {
            let q = NodeConflictQuery::new(delta, 2.0, 1.0, 1.0, 5.0).unwrap();
            let p = node_conflict_prob(&q, &cfg()).unwrap();
            let b = node_conflict_prob_bound(&q, &cfg());
            assert!(p <= b + 2e-6, "delta={delta}: p={p} bound={b}");
        }
    }

    #[test]
    fn node_prob_zero_shape_degenerate() {
        // Both arrivals deterministic: probability is the hold tail at |delta|.
        let q = NodeConflictQuery::new(0.3, 0.0, 0.0, 1.0, 5.0).unwrap();
        let p = node_conflict_prob(&q, &cfg()).unwrap();
        assert!((p - (-1.5f64).exp()).abs() < 1e-9);
        // One deterministic arrival: single integral, sanity via bound and
        // symmetry against the analytic tail at huge separation.
        let q = NodeConflictQuery::new(1e6, 0.0, 3.0, 1.0, 5.0).unwrap();
        assert!(node_conflict_prob(&q, &cfg()).unwrap() <= 1e-9);
    }

    #[test]
    fn edge_prob_zero_traversal_time() {
        let q = EdgeConflictQuery::new(0.5, 1.0, 1.0, 0.0, 5.0).unwrap();
        assert_eq!(edge_conflict_prob(&q, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn edge_prob_exponential_closed_form() {
        // n1 = n2 = 1, delta = 0: |nu2 - nu1| ~ Exp(lambda), so
        // P(|gap| <= t_e) = 1 - exp(-lambda t_e).
        let q = EdgeConflictQuery::new(0.0, 1.0, 1.0, 1.0, 5.0).unwrap();
        let p = edge_conflict_prob(&q, &cfg()).unwrap();
        let expect = 1.0 - (-5.0f64).exp();
        assert!((p - expect).abs() < 2e-6, "got {p}, want {expect}");
    }

    #[test]
    fn edge_prob_monotone_in_traversal_time() {
        let mut prev = 0.0;
        for t_e in [0.5, 1.0, 2.0] {
            let q = EdgeConflictQuery::new(0.8, 3.0, 1.0, t_e, 5.0).unwrap();
            let p = edge_conflict_prob(&q, &cfg()).unwrap();
            assert!(p >= prev - 1e-9, "t_e={t_e}: {p} < {prev}");
            prev = p;
        }
    }

    #[test]
    fn edge_prob_symmetry_under_agent_swap() {
        let a = edge_conflict_prob(
            &EdgeConflictQuery::new(0.9, 4.0, 1.5, 1.0, 5.0).unwrap(),
            &cfg(),
        )
        .unwrap();
        let b = edge_conflict_prob(
            &EdgeConflictQuery::new(-0.9, 1.5, 4.0, 1.0, 5.0).unwrap(),
            &cfg(),
        )
        .unwrap();
        assert!((a - b).abs() < 2e-6, "{a} vs {b}");
    }

    #[test]
    fn edge_prob_bound_dominates() {
        for delta in [-2.0, 0.0, 1.0, 4.0] {
            let q = EdgeConflictQuery::new(delta, 2.0, 3.0, 1.0, 5.0).unwrap();
            let p = edge_conflict_prob(&q, &cfg()).unwrap();
            let b = edge_conflict_prob_bound(&q, &cfg());
            assert!(p <= b + 2e-6, "delta={delta}: p={p} bound={b}");
        }
    }

    #[test]
    fn goal_occupancy_limits() {
        let c = cfg();
        // Resident arrives far earlier: the visitor is certain to depart
        // after the resident's arrival.
        let p = goal_occupancy_conflict_prob(-1e6, 1.0, 1.0, 1.0, 5.0, &c).unwrap();
        assert!(p > 1.0 - 1e-6, "got {p}");
        // Visitor passes long before the resident shows up.
        let p = goal_occupancy_conflict_prob(1e6, 1.0, 1.0, 1.0, 5.0, &c).unwrap();
        assert!(p <= 1e-9, "got {p}");
    }

    #[test]
    fn goal_occupancy_closed_form() {
        // All shapes 1, delta 0: P(nu_vis + nu_hold >= nu_res) = 3/4 for
        // i.i.d. exponentials.
        let p = goal_occupancy_conflict_prob(0.0, 1.0, 1.0, 1.0, 5.0, &cfg()).unwrap();
        assert!((p - 0.75).abs() < 2e-6, "got {p}");
    }

    #[test]
    fn goal_occupancy_dominates_node_prob() {
        for delta in [-1.0, 0.0, 1.0] {
            let node = node_conflict_prob(
                &NodeConflictQuery::new(delta, 2.0, 1.0, 1.0, 5.0).unwrap(),
                &cfg(),
            )
            .unwrap();
            let goal = goal_occupancy_conflict_prob(delta, 2.0, 1.0, 1.0, 5.0, &cfg()).unwrap();
            assert!(goal >= node - 2e-6, "delta={delta}: goal={goal} node={node}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = QuadratureConfig { abs_tol: 0.0, ..QuadratureConfig::default() };
        assert!(bad.validate().is_err());
        let bad = QuadratureConfig { tail_mass: 1e-3, abs_tol: 1e-6, max_subdivisions: 50 };
        assert!(bad.validate().is_err());
        assert!(QuadratureConfig::default().validate().is_ok());
    }

    #[test]
    fn query_validation() {
        assert!(NodeConflictQuery::new(0.0, -1.0, 1.0, 1.0, 5.0).is_err());
        assert!(NodeConflictQuery::new(0.0, 1.0, 1.0, 0.0, 5.0).is_err());
        assert!(NodeConflictQuery::new(f64::NAN, 1.0, 1.0, 1.0, 5.0).is_err());
        assert!(EdgeConflictQuery::new(0.0, 1.0, 1.0, -0.5, 5.0).is_err());
        assert!(GammaParams::new(0.0, 5.0).is_err());
    }
}

