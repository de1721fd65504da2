//! Breakdown frontier for the conclusion `beta_long > b_low`, the common
//! breakdown point, and identified sets under joint bounds on `r_X` and `r_Y`.
//!
//! The frontier at `rx_bar` is the smallest `r_Y` bound at which some
//! `b <= b_low` becomes consistent with the data. In the interior case it is
//! the value of a smooth constrained program over `(z, c, b)`, where `c` can
//! be restricted to the span of `Cov(W1, Y)` and `Cov(W1, X)`. For fixed
//! `(c, b)` the objective is a decreasing function of a convex function of
//! `z`, so the optimum over `z` sits at an endpoint of the feasible
//! `z`-intervals; those endpoints are available in closed form. The remaining
//! search over `(||c||, direction of c, b)` is done by a seeded multi-start
//! simplex search.
//!
//! All coefficients are in normalized units (see [`NormalizedModel::x_scale`]).

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::covkernel::NormalizedModel;
use crate::error::{Error, Result};
use crate::identify::{bounds_rx_c, validate_c_range, IdentifiedInterval, BISECTION_MAX_ITER, BISECTION_TOLERANCE};
use crate::optimize::{halton_point, nelder_mead, NelderMeadOptions};
use crate::Magnitude;

/// Margin by which strict inequalities are enforced (e.g. `||c|| <= 1 - margin`).
pub const CONSTRAINT_MARGIN: f64 = 1e-9;
/// Local searches on the surface where two constraints bind.
const SURFACE_RESTARTS: usize = 8;
/// Normalized Gram determinant below which `Cov(W1,Y)` and `Cov(W1,X)` count as dependent.
pub const GRAM_TOLERANCE: f64 = 1e-10;

/// Which case of the frontier characterization applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseTag {
    /// `b_low >= beta_med`: the conclusion fails even without selection on unobservables.
    Zero,
    /// The `r_X` restriction alone already rules out every `b <= b_low`.
    Infinite,
    /// The frontier is the value of the constrained program.
    Interior,
}

/// Minimizer of the frontier program, with `c = c1 Cov(W1,Y) + c2 Cov(W1,X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontierArgmin {
    pub z: f64,
    pub c1: f64,
    pub c2: f64,
    pub norm_c: f64,
    pub b: f64,
}

/// Constraint slacks at the reported minimizer (nonnegative means satisfied).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintResiduals {
    /// `p(z, c; rx_bar)`.
    pub p: f64,
    /// `devsq(z) - (b - beta_med)^2`; `+inf` when the minimum is approached
    /// as `|z| -> sqrt(Var(X^{⊥W1}))`, where devsq diverges.
    pub devsq_slack: f64,
    /// `1 - ||c||`.
    pub norm_slack: f64,
    /// `b_low - b`.
    pub b_slack: f64,
    /// `Var(X^{⊥W1}) - z^2`.
    pub z_slack: f64,
}

/// Diagnostics of the multi-start search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverReport {
    pub restarts: usize,
    pub evaluations: usize,
    pub best_objective: Option<f64>,
    pub argmin: Option<FrontierArgmin>,
    pub residuals: Option<ConstraintResiduals>,
}

impl SolverReport {
    fn closed_form() -> Self {
        Self { restarts: 0, evaluations: 0, best_objective: None, argmin: None, residuals: None }
    }
}

/// One point of the breakdown frontier.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub rx_bar: f64,
    pub ry_bf: Magnitude,
    pub case_tag: CaseTag,
    pub solver_report: SolverReport,
}

/// The frontier over a grid of `rx_bar` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierCurve {
    pub b_low: f64,
    pub c_low: f64,
    pub c_high: f64,
    pub points: Vec<FrontierPoint>,
}

/// Settings for the multi-start search.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Number of local searches.
    pub restarts: usize,
    /// Seeding grid resolution per searched coordinate.
    pub grid: usize,
    pub local: NelderMeadOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { restarts: 32, grid: 8, local: NelderMeadOptions::default() }
    }
}

/// `devsq(z) = Var(Y^{⊥X,W1}) / k0 * z^2 / (k0 - z^2)`: squared distance from
/// `beta_med` reachable when `Cov(X^{⊥W1}, W2) = z`.
pub fn devsq(nm: &NormalizedModel, z: f64) -> Result<f64> {
    let k0 = nm.k0();
    if !(z * z < k0) {
        return Err(Error::Domain(format!("devsq needs z^2 < Var(X^⊥W1) = {k0}, got z = {z}")));
    }
    Ok(nm.var_y_perp_xw1() / k0 * z * z / (k0 - z * z))
}

/// Smallest `||r_Y||` consistent with `(z, c, b)`.
pub fn underline_r_y(nm: &NormalizedModel, z: f64, c: &DVector<f64>, b: f64) -> Result<Magnitude> {
    let nc2 = c.norm_squared();
    if !(nc2 < 1.0) || c.len() != nm.d1() {
        return Err(Error::Domain(format!("need ||c|| < 1 and dim(c) = d1, got ||c|| = {}", nc2.sqrt())));
    }
    let gap = nm.beta_med() - b;
    if gap == 0.0 {
        return Ok(Magnitude::Finite(0.0));
    }
    let s = (1.0 - nc2).sqrt();
    let v = nm.sigma_w1y() - nm.sigma_w1x() * b;
    let denom = (v * (z * s / nm.k0()) - c * gap).norm();
    if denom == 0.0 {
        return Ok(Magnitude::Infinite);
    }
    Ok(Magnitude::Finite(gap.abs() / denom))
}

/// `p(z, c; rx_bar) = rx_bar^2 ||Cov(W1,X) sqrt(1 - ||c||^2) - c z||^2 - z^2`;
/// nonnegative iff some `r_X` with `||r_X|| <= rx_bar` produces this `z`.
pub fn p_constraint(nm: &NormalizedModel, z: f64, c: &DVector<f64>, rx_bar: f64) -> f64 {
    let s = (1.0 - c.norm_squared()).max(0.0).sqrt();
    rx_bar * rx_bar * (nm.sigma_w1x() * s - c * z).norm_squared() - z * z
}

/// Scalars describing the model in the orthonormal basis `(e1, e2)` of
/// `span{Cov(W1,X), Cov(W1,Y)}` with `e1` along `Cov(W1,X)`.
#[derive(Debug, Clone)]
struct Geometry {
    nx: f64,
    y1: f64,
    y2: f64,
    beta: f64,
    k0: f64,
    v: f64,
    planar: bool,
}

impl Geometry {
    fn new(nm: &NormalizedModel) -> Result<Self> {
        let sx = nm.sigma_w1x();
        let sy = nm.sigma_w1y();
        let nx = sx.norm();
        let y1 = sx.dot(sy) / nx;
        let y2 = (sy.norm_squared() - y1 * y1).max(0.0).sqrt();
        let planar = nm.d1() >= 2;
        if planar {
            let ny2 = sy.norm_squared();
            let gram = if ny2 > 0.0 { 1.0 - y1 * y1 / ny2 } else { 0.0 };
            if !(gram > GRAM_TOLERANCE) {
                return Err(Error::LinearDependence(gram));
            }
        }
        Ok(Self { nx, y1, y2, beta: nm.beta_med(), k0: nm.k0(), v: nm.var_y_perp_xw1(), planar })
    }
}

#[derive(Debug, Clone)]
struct Program {
    g: Geometry,
    rx: f64,
    a_lo: f64,
    a_hi: f64,
    delta_min: f64,
    q_lo: f64,
}

/// Decoded search point: `||c||`, direction angle of `c`, and `b`.
#[derive(Debug, Clone, Copy)]
struct Point {
    a: f64,
    theta: f64,
    b: f64,
}

fn sin2(u: f64) -> f64 {
    let s = u.sin();
    s * s
}

fn asin_sqrt(f: f64) -> f64 {
    f.clamp(0.0, 1.0).sqrt().asin()
}

impl Program {
    /// Best `(objective, z)` over `z` for fixed `(||c||, angle, b)`; `None` if infeasible.
    fn profile(&self, a: f64, theta: f64, b: f64) -> Option<(f64, f64)> {
        let g = &self.g;
        let delta = g.beta - b;
        if !(delta > 0.0) {
            return None;
        }
        let s = (1.0 - a * a).max(0.0).sqrt();
        let (ct, st) = (theta.cos(), theta.sin());
        let (c1, c2) = (a * ct, a * st);
        let (al1, al2) = (s / g.k0 * (g.y1 - b * g.nx), s / g.k0 * g.y2);
        let aa = al1 * al1 + al2 * al2;
        let ac = al1 * c1 + al2 * c2;
        let cc = a * a;
        let d2 = |z: f64| (z * z * aa - 2.0 * z * delta * ac + delta * delta * cc).max(0.0);

        let zmin = delta * g.k0 / (g.v + delta * delta * g.k0).sqrt();
        let zmax = g.k0.sqrt();
        let r2 = self.rx * self.rx;
        let qa = r2 * a * a - 1.0;
        let qb = -2.0 * r2 * s * g.nx * c1;
        let qc = r2 * s * s * g.nx * g.nx;
        let p = |z: f64| qa * z * z + qb * z + qc;
        let p_tol = 1e-12 * (qc.abs() + zmax * zmax);

        let mut candidates = [zmin, -zmin, zmax, -zmax, f64::NAN, f64::NAN];
        if qa.abs() > 1e-300 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let q = -0.5 * (qb + qb.signum() * disc.sqrt());
                if q != 0.0 {
                    candidates[4] = q / qa;
                    candidates[5] = qc / q;
                } else {
                    candidates[4] = 0.0;
                }
            }
        } else if qb != 0.0 {
            candidates[4] = -qc / qb;
        }
        let mut best: Option<(f64, f64)> = None;
        for &z in candidates.iter().filter(|z| z.is_finite()) {
            let az = z.abs();
            if az < zmin * (1.0 - 1e-12) || az > zmax || p(z) < -p_tol {
                continue;
            }
            let dz = d2(z);
            if best.is_none_or(|(bd, _)| dz > bd) {
                best = Some((dz, z));
            }
        }
        let (dz, z) = best?;
        let obj = if dz > 0.0 { delta / dz.sqrt() } else { f64::INFINITY };
        Some((obj, z))
    }

    fn decode(&self, u: &[f64], theta_fixed: Option<f64>) -> Point {
        let a = self.a_lo + (self.a_hi - self.a_lo) * sin2(u[0]);
        let (theta, qi) = match theta_fixed {
            Some(t) => (t, 1),
            None => (u[1], 2),
        };
        let q = self.q_lo + (1.0 - self.q_lo) * sin2(u[qi]);
        Point { a, theta, b: self.g.beta - self.delta_min / q }
    }

    /// Coordinates in search space for fractions `(fa, angle, fq)` in `[0,1]`.
    fn encode(&self, fa: f64, theta: f64, fq: f64, theta_fixed: Option<f64>) -> Vec<f64> {
        match theta_fixed {
            Some(_) => vec![asin_sqrt(fa), asin_sqrt(fq)],
            None => vec![asin_sqrt(fa), theta, asin_sqrt(fq)],
        }
    }

    fn objective(&self, u: &[f64], theta_fixed: Option<f64>) -> f64 {
        let pt = self.decode(u, theta_fixed);
        self.profile(pt.a, pt.theta, pt.b).map_or(f64::INFINITY, |(v, _)| v)
    }

    /// Norms `a` in `[a_lo, a_hi]` at which `p(z, c) = 0` for `c` of norm `a`
    /// in direction `theta`. With `a = sin(phi)`, `p = rx^2 u'Mu - z^2` for
    /// `u = (cos phi, sin phi)`, which is solved in closed form in `2 phi`.
    fn boundary_norms(&self, z: f64, theta: f64) -> Vec<f64> {
        let g = &self.g;
        let (m11, m22, m12) = (g.nx * g.nx, z * z, -g.nx * z * theta.cos());
        let r2 = self.rx * self.rx;
        if r2 == 0.0 {
            return Vec::new();
        }
        let (amp_a, amp_b) = (0.5 * (m11 - m22), m12);
        let radius = amp_a.hypot(amp_b);
        let rhs = z * z / r2 - 0.5 * (m11 + m22);
        if radius == 0.0 || rhs.abs() > radius {
            return Vec::new();
        }
        let psi = amp_b.atan2(amp_a);
        let spread = (rhs / radius).acos();
        let tau = 2.0 * std::f64::consts::PI;
        let mut out = Vec::new();
        for base in [psi + spread, psi - spread] {
            for k in -2..=2 {
                let two_phi = base + tau * k as f64;
                if (0.0..=std::f64::consts::PI).contains(&two_phi) {
                    let a = (0.5 * two_phi).sin();
                    if a >= self.a_lo && a <= self.a_hi {
                        out.push(a);
                    }
                }
            }
        }
        out
    }

    /// Objective on the surface where `|z| = zmin(b)` and `p = 0` both bind,
    /// parameterized by the angle of `c` and `b`; `||c||` is solved for.
    fn surface_objective(&self, u: &[f64], theta_fixed: Option<f64>) -> f64 {
        let (theta, uq) = match theta_fixed {
            Some(t) => (t, u[0]),
            None => (u[0], u[1]),
        };
        let q = self.q_lo + (1.0 - self.q_lo) * sin2(uq);
        let delta = self.delta_min / q;
        let b = self.g.beta - delta;
        let zmin = delta * self.g.k0 / (self.g.v + delta * delta * self.g.k0).sqrt();
        let mut best = f64::INFINITY;
        for z in [zmin, -zmin] {
            for a in self.boundary_norms(z, theta) {
                if let Some((v, _)) = self.profile(a, theta, b) {
                    best = best.min(v);
                }
            }
        }
        best
    }

    /// Decodes a surface-search point into the best `(objective, Point)`.
    fn surface_point(&self, u: &[f64], theta_fixed: Option<f64>) -> Option<(f64, Point)> {
        let (theta, uq) = match theta_fixed {
            Some(t) => (t, u[0]),
            None => (u[0], u[1]),
        };
        let q = self.q_lo + (1.0 - self.q_lo) * sin2(uq);
        let delta = self.delta_min / q;
        let b = self.g.beta - delta;
        let zmin = delta * self.g.k0 / (self.g.v + delta * delta * self.g.k0).sqrt();
        let mut best: Option<(f64, Point)> = None;
        for z in [zmin, -zmin] {
            for a in self.boundary_norms(z, theta) {
                if let Some((v, _)) = self.profile(a, theta, b) {
                    if best.is_none_or(|(bv, _)| v < bv) {
                        best = Some((v, Point { a, theta, b }));
                    }
                }
            }
        }
        best
    }
}

struct SearchOutcome {
    best: Option<(f64, Point, f64)>,
    evaluations: usize,
    restarts: usize,
}

fn search(prog: &Program, opts: &SolverOptions, seed_fa: f64) -> SearchOutcome {
    // Directions of c to search: a full circle in the planar case, the two
    // signs along Cov(W1,X) otherwise.
    let slices: Vec<Option<f64>> =
        if prog.g.planar { vec![None] } else { vec![Some(0.0), Some(std::f64::consts::PI)] };
    let mut evaluations = 0usize;
    let mut restarts = 0usize;
    let mut best: Option<(f64, Point, f64, usize)> = None;
    let mut run_index = 0usize;
    for theta_fixed in slices {
        let dim = if theta_fixed.is_some() { 2 } else { 3 };
        let mut seeds: Vec<Vec<f64>> = Vec::new();
        // Known-feasible construction: c anti-aligned with Cov(W1,X), b = b_low.
        seeds.push(prog.encode(seed_fa, std::f64::consts::PI, 1.0, theta_fixed));
        let n = opts.grid.max(1);
        let frac = |i: usize| (i as f64 + 0.5) / n as f64;
        let tau = 2.0 * std::f64::consts::PI;
        if dim == 2 {
            for i in 0..n {
                for k in 0..n {
                    seeds.push(prog.encode(frac(i), 0.0, frac(k), theta_fixed));
                }
            }
        } else {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        seeds.push(prog.encode(frac(i), tau * frac(j), frac(k), theta_fixed));
                    }
                }
            }
        }
        if prog.q_lo < 1e-6 {
            // Unbounded identified set: seed the branch with b far below
            // beta_med, where the infimum is often approached.
            // The norm of c maximizing |z| is feasible there even when the
            // feasible band of norms is too thin for the grid.
            let thetas: Vec<f64> = if dim == 2 { vec![0.0] } else { (0..n).map(|j| tau * frac(j)).collect() };
            for &t in &thetas {
                seeds.push(prog.encode(seed_fa, t, 0.0, theta_fixed));
                for i in 0..n {
                    seeds.push(prog.encode(frac(i), t, 0.0, theta_fixed));
                }
            }
            if dim == 3 {
                seeds.push(prog.encode(seed_fa, 0.0, 0.0, theta_fixed));
                seeds.push(prog.encode(seed_fa, std::f64::consts::PI, 0.0, theta_fixed));
            }
        }
        for h in 0..opts.restarts as u64 {
            let p = halton_point(h, 3);
            seeds.push(prog.encode(p[0], tau * p[1], p[2], theta_fixed));
        }
        let mut scored: Vec<(f64, usize)> = seeds
            .iter()
            .enumerate()
            .map(|(i, u)| (prog.objective(u, theta_fixed), i))
            .filter(|(v, _)| v.is_finite())
            .collect();
        evaluations += seeds.len();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(opts.restarts.max(1));
        restarts += scored.len();

        let step: Vec<f64> = vec![0.3; dim];
        let results: Vec<(f64, Vec<f64>, usize)> = scored
            .par_iter()
            .map(|&(_, i)| {
                let m = nelder_mead(|u| prog.objective(u, theta_fixed), &seeds[i], &step, &opts.local);
                (m.f, m.x, m.evals)
            })
            .collect();
        for (f, x, evals) in results {
            evaluations += evals;
            if f.is_finite() {
                let idx = run_index;
                run_index += 1;
                let better = match &best {
                    None => true,
                    Some((bf, _, _, bi)) => f < *bf || (f == *bf && idx < *bi),
                };
                if better {
                    let pt = prog.decode(&x, theta_fixed);
                    let z = prog.profile(pt.a, pt.theta, pt.b).map_or(f64::NAN, |(_, z)| z);
                    best = Some((f, pt, z, idx));
                }
            }
        }

        // Minima frequently sit where |z| = zmin(b) and p = 0 both bind, on
        // the edge of the feasible region where a simplex search stalls.
        // Search that surface directly.
        let n_theta = if dim == 3 { 8 * n } else { 1 };
        let n_q = n;
        let mut surface_seeds: Vec<Vec<f64>> = Vec::new();
        for j in 0..n_theta {
            for k in 0..=n_q {
                let uq = asin_sqrt(k as f64 / n_q as f64);
                if dim == 3 {
                    surface_seeds.push(vec![tau * (j as f64 + 0.5) / n_theta as f64, uq]);
                } else {
                    surface_seeds.push(vec![uq]);
                }
            }
        }
        let mut scored: Vec<(f64, usize)> = surface_seeds
            .iter()
            .enumerate()
            .map(|(i, u)| (prog.surface_objective(u, theta_fixed), i))
            .filter(|(v, _)| v.is_finite())
            .collect();
        evaluations += surface_seeds.len();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(SURFACE_RESTARTS);
        restarts += scored.len();
        let step = vec![0.1; dim - 1];
        let results: Vec<(f64, Vec<f64>, usize)> = scored
            .par_iter()
            .map(|&(_, i)| {
                let m = nelder_mead(|u| prog.surface_objective(u, theta_fixed), &surface_seeds[i], &step, &opts.local);
                (m.f, m.x, m.evals)
            })
            .collect();
        for (f, x, evals) in results {
            evaluations += evals;
            let idx = run_index;
            run_index += 1;
            if let Some((f2, pt)) = prog.surface_point(&x, theta_fixed) {
                debug_assert!(f2 <= f);
                let better = best.as_ref().is_none_or(|(bf, _, _, _)| f2 < *bf);
                if better {
                    let z = prog.profile(pt.a, pt.theta, pt.b).map_or(f64::NAN, |(_, z)| z);
                    best = Some((f2, pt, z, idx));
                }
            }
        }
    }
    SearchOutcome { best: best.map(|(f, p, z, _)| (f, p, z)), evaluations, restarts }
}

/// Breakdown frontier with arbitrarily endogenous controls (`c` unrestricted).
pub fn breakdown_frontier(nm: &NormalizedModel, rx_bar: f64, b_low: f64) -> Result<FrontierPoint> {
    breakdown_frontier_c(nm, rx_bar, b_low, 0.0, 1.0)
}

/// Breakdown frontier with `||c|| in [c_low, c_high]`.
pub fn breakdown_frontier_c(
    nm: &NormalizedModel,
    rx_bar: f64,
    b_low: f64,
    c_low: f64,
    c_high: f64,
) -> Result<FrontierPoint> {
    breakdown_frontier_with(nm, rx_bar, b_low, c_low, c_high, &SolverOptions::default())
}

/// [`breakdown_frontier_c`] with explicit solver settings.
pub fn breakdown_frontier_with(
    nm: &NormalizedModel,
    rx_bar: f64,
    b_low: f64,
    c_low: f64,
    c_high: f64,
    opts: &SolverOptions,
) -> Result<FrontierPoint> {
    validate_c_range(c_low, c_high)?;
    let identified = bounds_rx_c(nm, rx_bar, c_low, c_high)?;
    let g = Geometry::new(nm)?;
    let beta = nm.beta_med();
    let point = |ry_bf, case_tag, solver_report| FrontierPoint { rx_bar, ry_bf, case_tag, solver_report };
    if b_low >= beta {
        return Ok(point(Magnitude::Finite(0.0), CaseTag::Zero, SolverReport::closed_form()));
    }
    let lower = identified.lower();
    if let Some(l) = lower {
        if l > b_low {
            return Ok(point(Magnitude::Infinite, CaseTag::Infinite, SolverReport::closed_form()));
        }
    }

    let a_hi = c_high.min(1.0 - CONSTRAINT_MARGIN);
    let a_lo = c_low.min(a_hi);
    let delta_min = beta - b_low;
    let q_lo = match lower {
        Some(l) => (delta_min / ((beta - l) * (1.0 + CONSTRAINT_MARGIN))).min(1.0),
        None => 1e-12,
    };
    let prog = Program { g, rx: rx_bar, a_lo, a_hi, delta_min, q_lo };
    // Norm of c at which |z| is largest (used for a feasible starting point).
    let m = if rx_bar * c_high >= 1.0 { a_hi } else { rx_bar.min(c_high).max(c_low).min(a_hi) };
    let seed_fa = if a_hi > a_lo { (m - a_lo) / (a_hi - a_lo) } else { 0.0 };
    let outcome = search(&prog, opts, seed_fa);

    let Some((f, pt, z)) = outcome.best else {
        // The feasible set is empty only on the boundary between cases 2 and 3.
        if let Some(l) = lower {
            if l >= b_low - 1e-9 * (1.0 + b_low.abs()) {
                return Ok(point(Magnitude::Infinite, CaseTag::Infinite, SolverReport::closed_form()));
            }
        }
        return Err(Error::SolverFailure { restarts: outcome.restarts });
    };

    let (ct, st) = (pt.theta.cos(), pt.theta.sin());
    let (ce1, ce2) = (pt.a * ct, pt.a * st);
    let (c1, c2) = if prog.g.planar && prog.g.y2 > 0.0 {
        let c1 = ce2 / prog.g.y2;
        (c1, (ce1 - c1 * prog.g.y1) / prog.g.nx)
    } else {
        (0.0, ce1 / prog.g.nx)
    };
    let s = (1.0 - pt.a * pt.a).max(0.0).sqrt();
    let r2 = rx_bar * rx_bar;
    let p = r2 * ((prog.g.nx * s - ce1 * z).powi(2) + (ce2 * z).powi(2)) - z * z;
    let k0 = nm.k0();
    // At |z| = sqrt(k0) the minimum is a limit along which devsq diverges.
    let devsq_slack = if z * z < k0 * (1.0 - 1e-12) {
        nm.var_y_perp_xw1() / k0 * z * z / (k0 - z * z) - (pt.b - beta).powi(2)
    } else {
        f64::INFINITY
    };
    let report = SolverReport {
        restarts: outcome.restarts,
        evaluations: outcome.evaluations,
        best_objective: Some(f),
        argmin: Some(FrontierArgmin { z, c1, c2, norm_c: pt.a, b: pt.b }),
        residuals: Some(ConstraintResiduals {
            p,
            devsq_slack,
            norm_slack: 1.0 - pt.a,
            b_slack: b_low - pt.b,
            z_slack: k0 - z * z,
        }),
    };
    Ok(point(Magnitude::Finite(f), CaseTag::Interior, report))
}

/// Frontier evaluated on a grid of `rx_bar` values.
pub fn frontier_curve(
    nm: &NormalizedModel,
    rx_grid: &[f64],
    b_low: f64,
    c_low: f64,
    c_high: f64,
    opts: &SolverOptions,
) -> Result<FrontierCurve> {
    let points = rx_grid
        .iter()
        .map(|&rx| breakdown_frontier_with(nm, rx, b_low, c_low, c_high, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrontierCurve { b_low, c_low, c_high, points })
}

/// Bisection for the boundary of a monotone fallible predicate that is
/// false at `lo` and true at `hi`; returns the final bracket.
fn bisect_fallible(mut lo: f64, mut hi: f64, tol: f64, pred: &impl Fn(f64) -> Result<bool>) -> Result<(f64, f64)> {
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid <= lo || mid >= hi {
            break;
        }
        if pred(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, hi))
}

/// Common breakdown point: the largest `r` such that `r_X <= r` and
/// `r_Y <= r` together still imply `beta_long > b_low`.
pub fn common_breakdown(nm: &NormalizedModel, b_low: f64, c_low: f64, c_high: f64) -> Result<Magnitude> {
    common_breakdown_with(nm, b_low, c_low, c_high, &SolverOptions::default())
}

/// [`common_breakdown`] with explicit solver settings.
pub fn common_breakdown_with(
    nm: &NormalizedModel,
    b_low: f64,
    c_low: f64,
    c_high: f64,
    opts: &SolverOptions,
) -> Result<Magnitude> {
    validate_c_range(c_low, c_high)?;
    if b_low >= nm.beta_med() {
        return Ok(Magnitude::Finite(0.0));
    }
    // `overturned(r)` is true once the frontier at r_X = r drops to r or below.
    let overturned = |r: f64| -> Result<bool> {
        let pt = breakdown_frontier_with(nm, r, b_low, c_low, c_high, opts)?;
        Ok(pt.ry_bf <= Magnitude::Finite(r))
    };
    let mut hi = 1.0;
    while !overturned(hi)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(Magnitude::Infinite);
        }
    }
    let (lo, hi) = bisect_fallible(0.0, hi, BISECTION_TOLERANCE, &overturned)?;
    // Near a jump of the frontier, or the square-root singularity where the
    // identified set becomes unbounded, ry_bf changes much faster than r;
    // there the crossing is located to float resolution.
    let at = breakdown_frontier_with(nm, hi, b_low, c_low, c_high, opts)?.ry_bf.to_f64();
    let hi = if at < hi - 1e-9 { bisect_fallible(lo, hi, 0.0, &overturned)?.1 } else { hi };
    Ok(Magnitude::Finite(hi))
}

/// Identified set under `r_X <= rx_bar`, `r_Y <= ry_bar` (`None` = unrestricted)
/// and `||c|| in [c_low, c_high]`, obtained from the frontier by duality.
pub fn bounds_rx_ry(
    nm: &NormalizedModel,
    rx_bar: f64,
    ry_bar: Option<f64>,
    c_low: f64,
    c_high: f64,
) -> Result<IdentifiedInterval> {
    bounds_rx_ry_with(nm, rx_bar, ry_bar, c_low, c_high, &SolverOptions::default())
}

/// [`bounds_rx_ry`] with explicit solver settings.
pub fn bounds_rx_ry_with(
    nm: &NormalizedModel,
    rx_bar: f64,
    ry_bar: Option<f64>,
    c_low: f64,
    c_high: f64,
    opts: &SolverOptions,
) -> Result<IdentifiedInterval> {
    let outer = bounds_rx_c(nm, rx_bar, c_low, c_high)?;
    let ry = match ry_bar {
        None => return Ok(outer),
        Some(ry) if ry.is_infinite() && ry > 0.0 => return Ok(outer),
        Some(ry) if !(ry >= 0.0) => {
            return Err(Error::Domain(format!("ry_bar must be >= 0, got {ry}")));
        }
        Some(ry) => ry,
    };
    let beta = nm.beta_med();
    if ry == 0.0 || outer.dev() == Magnitude::Finite(0.0) {
        return Ok(IdentifiedInterval::point(beta));
    }
    let lower = lower_endpoint(nm, rx_bar, ry, c_low, c_high, opts)?;
    let upper = lower_endpoint(&nm.mirrored(), rx_bar, ry, c_low, c_high, opts)?.map(|v| -v);
    let lower = match (lower, outer.lower()) {
        (Some(a), Some(b)) => Some(a.max(b).min(beta)),
        (Some(a), None) => Some(a.min(beta)),
        (None, b) => b,
    };
    let upper = match (upper, outer.upper()) {
        (Some(a), Some(b)) => Some(a.min(b).max(beta)),
        (Some(a), None) => Some(a.max(beta)),
        (None, b) => b,
    };
    Ok(IdentifiedInterval::from_endpoints(beta, lower, upper))
}

fn lower_endpoint(
    nm: &NormalizedModel,
    rx_bar: f64,
    ry: f64,
    c_low: f64,
    c_high: f64,
    opts: &SolverOptions,
) -> Result<Option<f64>> {
    let beta = nm.beta_med();
    let reachable = |b: f64| -> Result<bool> {
        let pt = breakdown_frontier_with(nm, rx_bar, b, c_low, c_high, opts)?;
        Ok(pt.ry_bf <= Magnitude::Finite(ry))
    };
    let lo = match bounds_rx_c(nm, rx_bar, c_low, c_high)?.lower() {
        Some(l) => l,
        None => {
            let scale = beta.abs().max((nm.var_y_perp_xw1() / nm.k0()).sqrt()).max(1e-8);
            let mut step = scale;
            loop {
                if !reachable(beta - step)? {
                    break beta - step;
                }
                step *= 2.0;
                if step > 1e12 * scale {
                    return Ok(None);
                }
            }
        }
    };
    // Report the unreachable side of the final bracket so that the interval
    // is an outer approximation of the identified set.
    let (a, _) = bisect_fallible(lo, beta, BISECTION_TOLERANCE, &reachable)?;
    Ok(Some(a))
}
