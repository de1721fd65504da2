//! Brute-force verification of the closed-form identified sets.
//!
//! The checker works directly with the primitive sensitivity parameters
//! `(r_X, r_Y, c)`: it samples them inside the budget, decides membership of
//! candidate coefficients `b` with an exact characterization of the
//! identified set for fixed parameters, and reports the hull of everything it
//! verified. The result is an inner approximation of the identified set. It is
//! meant for tests and the `--verify` flag, not for production bounds.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covkernel::NormalizedModel;
use crate::identify::{IdentifiedInterval, SensitivityBudget};
use crate::stream_rng;

/// Tolerance for equality conditions.
pub const EQUALITY_TOLERANCE: f64 = 1e-9;
/// Margin for strict inequalities.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Relative amount by which candidate endpoints are pulled inside open intervals.
const INTERIOR_SHRINK: f64 = 1e-9;

/// A sampled parameter configuration and a coefficient value.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePoint {
    pub r_x: DVector<f64>,
    pub r_y: DVector<f64>,
    pub c: DVector<f64>,
    pub b: f64,
    pub feasible: bool,
    /// `Cov(X^{⊥W1}, W2)` implied by `(r_x, c)`.
    pub witness_z: f64,
}

/// `z` implied by `(r_x, c)`: `r_x' Cov(W1,X) sqrt(1-||c||^2) / (1 + r_x'c)`.
/// `None` when `r_x'c = -1` or `||c|| >= 1`.
pub fn z_x(nm: &NormalizedModel, r_x: &DVector<f64>, c: &DVector<f64>) -> Option<f64> {
    let nc2 = c.norm_squared();
    if !(nc2 < 1.0) {
        return None;
    }
    let d = 1.0 + r_x.dot(c);
    if d.abs() < 1e-12 {
        return None;
    }
    Some(r_x.dot(nm.sigma_w1x()) * (1.0 - nc2).sqrt() / d)
}

fn devsq_unchecked(nm: &NormalizedModel, z: f64) -> Option<f64> {
    let k0 = nm.k0();
    let room = k0 - z * z;
    (room > STRICT_MARGIN * k0).then(|| nm.var_y_perp_xw1() / k0 * z * z / room)
}

/// Whether `b` belongs to the identified set for fixed `(r_x, r_y, c)`.
pub fn membership(nm: &NormalizedModel, b: f64, r_x: &DVector<f64>, r_y: &DVector<f64>, c: &DVector<f64>) -> bool {
    let d1 = nm.d1();
    if r_x.len() != d1 || r_y.len() != d1 || c.len() != d1 {
        return false;
    }
    let nc2 = c.norm_squared();
    if !(nc2 < 1.0 - STRICT_MARGIN) {
        return false;
    }
    let s2 = 1.0 - nc2;
    let (k0, k1) = (nm.k0(), nm.k1());
    let (sx, sy) = (nm.sigma_w1x(), nm.sigma_w1y());
    let gap = k1 - b * k0;
    if b == nm.beta_med() || gap == 0.0 {
        // Solve (I + c r')x = v by Sherman–Morrison and check the six
        // defining conditions with k1 - b k0 = 0.
        let solve = |r: &DVector<f64>, v: &DVector<f64>| -> Option<DVector<f64>> {
            let d = 1.0 + r.dot(c);
            (d.abs() > 1e-12).then(|| v - c * (r.dot(v) / d))
        };
        let Some(p1) = solve(r_x, sx) else { return false };
        let Some(g1) = solve(r_y, &(sy - sx * b)) else { return false };
        let (px, gy) = (p1.dot(r_x), g1.dot(r_y));
        let scale = 1.0 + px.abs() * gy.abs();
        return (px * gy * s2).abs() <= EQUALITY_TOLERANCE * scale
            && gy * gy * s2 < nm.var_y_perp_xw1() - STRICT_MARGIN
            && px * px * s2 < k0 - STRICT_MARGIN;
    }
    let Some(z) = z_x(nm, r_x, c) else { return false };
    if z == 0.0 {
        return false;
    }
    let Some(ds) = devsq_unchecked(nm, z) else { return false };
    let db = b - nm.beta_med();
    if !(db * db < ds * (1.0 - STRICT_MARGIN)) {
        return false;
    }
    let v = (sy - sx * b) * (z * s2.sqrt()) - c * gap;
    let rhs = r_y.dot(&v);
    (gap - rhs).abs() <= EQUALITY_TOLERANCE * (1.0 + gap.abs() + r_y.norm() * v.norm())
}

/// `r_Y` of smallest norm making `b` consistent with `(z, c)`.
pub fn witness_r_y(nm: &NormalizedModel, z: f64, c: &DVector<f64>, b: f64) -> Option<DVector<f64>> {
    let s = (1.0 - c.norm_squared()).max(0.0).sqrt();
    let gap = nm.k1() - b * nm.k0();
    let v = (nm.sigma_w1y() - nm.sigma_w1x() * b) * (z * s) - c * gap;
    let n2 = v.norm_squared();
    (n2 > 0.0).then(|| v * (gap / n2))
}

/// `r_X` of smallest norm producing `z` together with `c`.
pub fn witness_r_x(nm: &NormalizedModel, z: f64, c: &DVector<f64>) -> Option<DVector<f64>> {
    let s = (1.0 - c.norm_squared()).max(0.0).sqrt();
    let w = nm.sigma_w1x() * s - c * z;
    let n2 = w.norm_squared();
    (n2 > 0.0).then(|| w * (z / n2))
}

/// Orthonormal basis of `span{Cov(W1,X), Cov(W1,Y)}` (one or two vectors).
fn span_basis(nm: &NormalizedModel) -> Vec<DVector<f64>> {
    let e1 = nm.sigma_w1x().normalize();
    let mut basis = vec![e1.clone()];
    let rest = nm.sigma_w1y() - &e1 * e1.dot(nm.sigma_w1y());
    if rest.norm() > 1e-12 * nm.sigma_w1y().norm().max(1e-300) {
        basis.push(rest.normalize());
    }
    basis
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Unit direction drawn uniformly on the sphere of `R^d1` or within the span
/// of the given vectors, optionally with a random orthogonal component.
fn direction<R: Rng>(rng: &mut R, d: usize, span: &[DVector<f64>]) -> DVector<f64> {
    match rng.gen_range(0..3) {
        0 => random_unit(rng, d),
        mode => {
            let mut v = DVector::zeros(d);
            for e in span {
                v += e * rng.sample::<f64, _>(StandardNormal);
            }
            if mode == 2 {
                v += random_unit(rng, d) * (0.3 * rng.gen::<f64>());
            }
            let n = v.norm();
            if n > 1e-12 {
                v / n
            } else {
                random_unit(rng, d)
            }
        }
    }
}

fn orthonormalize(vs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        for e in &out {
            w -= e * e.dot(&w);
        }
        if w.norm() > 1e-10 * v.norm().max(1e-300) {
            out.push(w.normalize());
        }
    }
    out
}

/// With `u = k1 c - z s Cov(W1,Y)` and `v = k0 c - z s Cov(W1,X)`
/// (`s = sqrt(1 - ||c||^2)`), the coefficient implied by `r_Y` is
/// `(k1 + r_Y'u) / (k0 + r_Y'v)`.
fn profile_vectors(nm: &NormalizedModel, z: f64, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let s = (1.0 - c.norm_squared()).max(0.0).sqrt();
    let u = c * nm.k1() - nm.sigma_w1y() * (z * s);
    let v = c * nm.k0() - nm.sigma_w1x() * (z * s);
    (u, v)
}

/// Ends of the set of coefficients reachable with `||r_Y|| <= ry_bar` for
/// fixed `(z, c)`: `b` is reachable iff `(b k0 - k1)^2 <= ry_bar^2 ||u - b v||^2`.
/// The roots are pulled slightly into the reachable side.
fn profiled_extremes(nm: &NormalizedModel, z: f64, c: &DVector<f64>, ry_bar: f64) -> Vec<f64> {
    let (u, v) = profile_vectors(nm, z, c);
    let r2 = ry_bar * ry_bar;
    let a = nm.k0() * nm.k0() - r2 * v.norm_squared();
    let b = nm.k0() * nm.k1() - r2 * u.dot(&v);
    let cc = nm.k1() * nm.k1() - r2 * u.norm_squared();
    let disc = b * b - a * cc;
    if !(disc >= 0.0) || a.abs() < 1e-14 {
        return Vec::new();
    }
    let root = disc.sqrt();
    let (lo, hi) = ((b - root) / a, (b + root) / a);
    let (lo, hi) = (lo.min(hi), lo.max(hi));
    let eps = |x: f64| INTERIOR_SHRINK * x.abs().max(1.0);
    // Reachable set is [lo, hi] when a > 0 and its complement otherwise.
    let inward = if a > 0.0 { 1.0 } else { -1.0 };
    [lo + inward * eps(lo), hi - inward * eps(hi)].into_iter().filter(|x| x.is_finite()).collect()
}

/// Smallest `r_Y` implying coefficient `b` for fixed `(z, c)`.
fn profiled_r_y(nm: &NormalizedModel, z: f64, c: &DVector<f64>, b: f64) -> Option<DVector<f64>> {
    let (u, v) = profile_vectors(nm, z, c);
    let w = u - v * b;
    let n2 = w.norm_squared();
    (n2 > 0.0).then(|| w * ((b * nm.k0() - nm.k1()) / n2))
}

/// Parameter configuration searched by the oracle.
#[derive(Debug, Clone)]
struct Params {
    r_x: DVector<f64>,
    r_y: DVector<f64>,
    c: DVector<f64>,
}

struct Sampler<'a> {
    nm: &'a NormalizedModel,
    budget: SensitivityBudget,
    a_hi: f64,
    span: Vec<DVector<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(nm: &'a NormalizedModel, budget: SensitivityBudget) -> Self {
        let a_hi = budget.c_high.min(1.0 - 1e-9);
        Self { nm, budget, a_hi, span: span_basis(nm) }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Params {
        let d = self.nm.d1();
        let b = &self.budget;
        let a = if self.a_hi > b.c_low { rng.gen_range(b.c_low..=self.a_hi) } else { self.a_hi.min(b.c_low) };
        let c = direction(rng, d, &self.span) * a;
        let mut x_span = vec![self.nm.sigma_w1x().clone()];
        if a > 0.0 {
            x_span.push(c.clone());
        }
        let x_span = orthonormalize(&x_span);
        let rx_radius = if rng.gen_bool(0.5) { b.rx_bar } else { b.rx_bar * rng.gen::<f64>() };
        let r_x = direction(rng, d, &x_span) * rx_radius;
        let r_y = match b.ry_bar {
            Some(ry) => {
                let mut y_span = self.span.clone();
                if a > 0.0 {
                    y_span.push(c.clone());
                }
                let y_span = orthonormalize(&y_span);
                let radius = if rng.gen_bool(0.5) { ry } else { ry * rng.gen::<f64>() };
                direction(rng, d, &y_span) * radius
            }
            None => DVector::zeros(d),
        };
        Params { r_x, r_y, c }
    }

    /// Pulls a perturbed configuration back inside the budget.
    fn project(&self, mut p: Params) -> Params {
        let b = &self.budget;
        let nx = p.r_x.norm();
        if nx > b.rx_bar {
            p.r_x *= b.rx_bar / nx;
        }
        if let Some(ry) = b.ry_bar {
            let ny = p.r_y.norm();
            if ny > ry {
                p.r_y *= ry / ny;
            }
        }
        let a = p.c.norm();
        if a > self.a_hi {
            p.c *= self.a_hi / a;
        } else if a < b.c_low {
            if a > 0.0 {
                p.c *= b.c_low / a;
            } else {
                p.c = self.span[0].clone() * b.c_low;
            }
        }
        p
    }

    /// Verified feasible coefficients produced by a configuration: the
    /// (up to two) candidate values closest to the lower and upper ends.
    fn candidates(&self, p: &Params) -> Vec<f64> {
        let nm = self.nm;
        let Some(z) = z_x(nm, &p.r_x, &p.c) else { return Vec::new() };
        let beta = nm.beta_med();
        let mut out = Vec::new();
        match self.budget.ry_bar {
            None => {
                let Some(ds) = devsq_unchecked(nm, z) else { return out };
                let half = ds.sqrt() * (1.0 - INTERIOR_SHRINK);
                for b in [beta - half, beta + half] {
                    if let Some(ry) = witness_r_y(nm, z, &p.c, b) {
                        if membership(nm, b, &p.r_x, &ry, &p.c) {
                            out.push(b);
                        }
                    }
                }
            }
            Some(ry_bar) => {
                let s = (1.0 - p.c.norm_squared()).max(0.0).sqrt();
                let rc = 1.0 + p.r_y.dot(&p.c);
                let ry_sy = p.r_y.dot(nm.sigma_w1y());
                let ry_sx = p.r_y.dot(nm.sigma_w1x());
                let den = nm.k0() * rc - z * s * ry_sx;
                if den.abs() > 1e-14 {
                    let b = (nm.k1() * rc - z * s * ry_sy) / den;
                    if b.is_finite() && membership(nm, b, &p.r_x, &p.r_y, &p.c) {
                        out.push(b);
                    }
                }
                // Ends of the intersection of the r_Y-reachable set with the
                // range allowed by z.
                let mut ends = profiled_extremes(nm, z, &p.c, ry_bar);
                if let Some(ds) = devsq_unchecked(nm, z) {
                    let half = ds.sqrt() * (1.0 - INTERIOR_SHRINK);
                    ends.iter_mut().for_each(|b| *b = b.clamp(beta - half, beta + half));
                    ends.extend([beta - half, beta + half]);
                }
                for b in ends {
                    if let Some(r_y) = profiled_r_y(nm, z, &p.c, b) {
                        if r_y.norm() <= ry_bar && membership(nm, b, &p.r_x, &r_y, &p.c) {
                            out.push(b);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Hull found by the brute-force search, with the configurations attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceReport {
    pub hull: IdentifiedInterval,
    pub n_samples: usize,
    pub n_feasible: usize,
    pub lower_witness: Option<CandidatePoint>,
    pub upper_witness: Option<CandidatePoint>,
}

/// Inner approximation of the identified set under `budget` from
/// `n_samples` sampled parameter configurations (about half of which
/// are spent on local refinement around the most extreme ones).
pub fn brute_force_bounds(nm: &NormalizedModel, budget: &SensitivityBudget, n_samples: usize, seed: u64) -> IdentifiedInterval {
    brute_force_search(nm, budget, n_samples, seed).hull
}

/// [`brute_force_bounds`] with witnesses and counts.
pub fn brute_force_search(nm: &NormalizedModel, budget: &SensitivityBudget, n_samples: usize, seed: u64) -> BruteForceReport {
    let beta = nm.beta_med();
    let sampler = Sampler::new(nm, *budget);
    let n_global = n_samples - n_samples / 2;
    let n_local = n_samples - n_global;

    // Global phase.
    let evaluated: Vec<(Params, Vec<f64>)> = (0..n_global as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let p = sampler.draw(&mut rng);
            let cands = sampler.candidates(&p);
            (p, cands)
        })
        .collect();
    let n_feasible = evaluated.iter().filter(|(_, c)| !c.is_empty()).count();

    // Start points for refinement: most extreme configurations on each side.
    const CHAINS: usize = 8;
    let mut lows: Vec<(f64, usize)> = Vec::new();
    let mut highs: Vec<(f64, usize)> = Vec::new();
    for (i, (_, cands)) in evaluated.iter().enumerate() {
        for &b in cands {
            lows.push((b, i));
            highs.push((-b, i));
        }
    }
    lows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    highs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    lows.dedup_by_key(|x| x.1);
    highs.dedup_by_key(|x| x.1);

    let mut starts: Vec<(f64, Params)> = Vec::new(); // (sign, params): sign -1 minimizes b
    for (sign, list) in [(1.0, &lows), (-1.0, &highs)] {
        for &(_, i) in list.iter().take(CHAINS) {
            starts.push((sign, evaluated[i].0.clone()));
        }
    }
    let steps_per_chain = if starts.is_empty() { 0 } else { n_local / starts.len() };
    let refined: Vec<Vec<(f64, Params)>> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, (sign, p0))| {
            let mut rng = stream_rng(seed ^ 0x005e_ed0f_0a11, ci as u64);
            refine_chain(&sampler, p0.clone(), *sign, steps_per_chain, &mut rng)
        })
        .collect();

    let mut lower: Option<(f64, Params)> = None;
    let mut upper: Option<(f64, Params)> = None;
    let mut consider = |b: f64, p: &Params| {
        if lower.as_ref().is_none_or(|(l, _)| b < *l) {
            lower = Some((b, p.clone()));
        }
        if upper.as_ref().is_none_or(|(u, _)| b > *u) {
            upper = Some((b, p.clone()));
        }
    };
    for (p, cands) in &evaluated {
        for &b in cands {
            consider(b, p);
        }
    }
    for chain in &refined {
        for (b, p) in chain {
            consider(*b, p);
        }
    }
    let witness = |found: &Option<(f64, Params)>| {
        found.as_ref().map(|(b, p)| {
            let z = z_x(nm, &p.r_x, &p.c).unwrap_or(f64::NAN);
            let r_y = match budget.ry_bar {
                None => witness_r_y(nm, z, &p.c, *b).unwrap_or_else(|| p.r_y.clone()),
                Some(_) if membership(nm, *b, &p.r_x, &p.r_y, &p.c) => p.r_y.clone(),
                Some(_) => profiled_r_y(nm, z, &p.c, *b).unwrap_or_else(|| p.r_y.clone()),
            };
            CandidatePoint {
                feasible: membership(nm, *b, &p.r_x, &r_y, &p.c),
                r_x: p.r_x.clone(),
                r_y,
                c: p.c.clone(),
                b: *b,
                witness_z: z,
            }
        })
    };
    let lower_witness = witness(&lower);
    let upper_witness = witness(&upper);
    let lo = lower.map_or(beta, |(b, _)| b.min(beta));
    let hi = upper.map_or(beta, |(b, _)| b.max(beta));
    BruteForceReport {
        hull: IdentifiedInterval::from_endpoints(beta, Some(lo), Some(hi)),
        n_samples,
        n_feasible,
        lower_witness,
        upper_witness,
    }
}

/// Random-perturbation hill climbing that pushes the verified candidate in
/// the direction `-sign` (sign 1 lowers b, sign -1 raises it). Each proposal
/// perturbs one of `r_X`, `r_Y`, `c` (or stretches `r_X`/`r_Y` to the edge
/// of the budget); the step size grows after successes and shrinks after
/// runs of failures.
fn refine_chain<R: Rng>(sampler: &Sampler, start: Params, sign: f64, steps: usize, rng: &mut R) -> Vec<(f64, Params)> {
    let score = |p: &Params| -> Option<f64> {
        let c = sampler.candidates(p);
        if sign > 0.0 {
            c.into_iter().reduce(f64::min)
        } else {
            c.into_iter().reduce(f64::max)
        }
    };
    let d = sampler.nm.d1();
    let b = &sampler.budget;
    let Some(mut best) = score(&start) else { return Vec::new() };
    let mut current = start;
    let mut step = 0.1;
    let mut fails = 0usize;
    let mut out = vec![(best, current.clone())];
    for _ in 0..steps {
        let noise = |rng: &mut R, scale: f64| DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let mut trial = current.clone();
        match rng.gen_range(0..7) {
            0 | 1 => trial.r_x += noise(rng, step * b.rx_bar.max(1e-3)),
            2 | 3 if b.ry_bar.is_some() => trial.r_y += noise(rng, step * b.ry_bar.unwrap_or(0.0).max(1e-3)),
            4 => {
                let n = trial.r_x.norm();
                if n > 0.0 {
                    trial.r_x *= b.rx_bar / n;
                }
                if let Some(ry) = b.ry_bar {
                    let n = trial.r_y.norm();
                    if n > 0.0 {
                        trial.r_y *= ry / n;
                    }
                }
            }
            _ => trial.c += noise(rng, step),
        }
        let trial = sampler.project(trial);
        match score(&trial) {
            Some(v) if (v - best) * sign < 0.0 => {
                best = v;
                current = trial;
                out.push((best, current.clone()));
                fails = 0;
                step = (step * 1.5).min(1.0);
            }
            _ => {
                fails += 1;
                if fails >= 12 {
                    step = (step * 0.5).max(1e-9);
                    fails = 0;
                }
            }
        }
    }
    out
}

/// Grid-and-zoom maximization of `|z_X(r_x, c)|` over `||r_x|| <= rx_bar`
/// and `||c|| in [c_low, c_high]`, with `r_x` and `c` in a plane containing
/// `Cov(W1,X)`.
pub fn zbar_oracle(nm: &NormalizedModel, rx_bar: f64, c_low: f64, c_high: f64, grid_density: usize) -> f64 {
    if rx_bar == 0.0 {
        return 0.0;
    }
    let n = grid_density.max(4);
    let d = nm.d1();
    let e1 = nm.sigma_w1x().normalize();
    let e2 = if d >= 2 {
        let mut v = DVector::zeros(d);
        let j = (0..d).min_by(|&a, &b| e1[a].abs().total_cmp(&e1[b].abs())).unwrap_or(0);
        v[j] = 1.0;
        Some((&v - &e1 * e1.dot(&v)).normalize())
    } else {
        None
    };
    let a_hi = c_high.min(1.0 - 1e-12);
    let tau = 2.0 * std::f64::consts::PI;
    let eval = |t: [f64; 4]| -> f64 {
        // t = (radius of r_x, angle of r_x, norm of c, angle of c), all in [0,1].
        let unit = |ang: f64| match &e2 {
            Some(e2) => &e1 * ang.cos() + e2 * ang.sin(),
            None => &e1 * if ang.cos() >= 0.0 { 1.0 } else { -1.0 },
        };
        let r_x = unit(tau * t[1]) * (rx_bar * t[0]);
        let c = unit(tau * t[3]) * (c_low + (a_hi - c_low) * t[2]);
        z_x(nm, &r_x, &c).map_or(0.0, f64::abs)
    };
    let mut best = (0.0, [1.0, 0.0, 0.0, 0.5]);
    for i in 0..=n {
        for j in 0..n {
            for k in 0..=n {
                for l in 0..n {
                    let t = [i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64, l as f64 / n as f64];
                    let v = eval(t);
                    if v > best.0 {
                        best = (v, t);
                    }
                }
            }
        }
    }
    // Zoom passes around the incumbent.
    let mut width = 1.0 / n as f64;
    for _ in 0..40 {
        let center = best.1;
        for i in 0..=8 {
            for j in 0..=8 {
                for k in 0..=8 {
                    for l in 0..=8 {
                        let off = |m: usize| (m as f64 / 4.0 - 1.0) * width;
                        let mut t = [center[0] + off(i), center[1] + off(j), center[2] + off(k), center[3] + off(l)];
                        t[0] = t[0].clamp(0.0, 1.0);
                        t[2] = t[2].clamp(0.0, 1.0);
                        t[1] = t[1].rem_euclid(1.0);
                        t[3] = t[3].rem_euclid(1.0);
                        let v = eval(t);
                        if v > best.0 {
                            best = (v, t);
                        }
                    }
                }
            }
        }
        width *= 0.5;
    }
    best.0
}

/// Grid-and-zoom minimization of the smallest `||r_Y||` that overturns
/// `beta_long > b_low` under `r_X <= rx_bar` and `||c|| in [c_low, c_high]`.
///
/// The search runs over `(||c||, angle of c, z, b)` directly, with `c` in
/// the plane spanned by `Cov(W1,X)` and `Cov(W1,Y)` (the whole space when
/// `d1 = 2`). Infeasible points score `+inf`, so every value found is
/// attained by a feasible configuration and the result approaches the
/// frontier from above. The feasible `z` range can be very thin, so the
/// coarse pass sweeps `z` on a grid `z_density` times finer than the other
/// coordinates. Returns `+inf` when nothing feasible is found.
pub fn frontier_grid_oracle(nm: &NormalizedModel, rx_bar: f64, b_low: f64, c_low: f64, c_high: f64, grid_density: usize) -> f64 {
    const Z_DENSITY: usize = 256;
    let beta = nm.beta_med();
    if b_low >= beta {
        return 0.0;
    }
    let n = grid_density.max(4);
    // Coordinates in the orthonormal basis (e1, e2) with e1 along Cov(W1,X).
    let sx = nm.sigma_w1x();
    let sy = nm.sigma_w1y();
    let nx = sx.norm();
    let y1 = sx.dot(sy) / nx;
    let y2 = if nm.d1() >= 2 { (sy.norm_squared() - y1 * y1).max(0.0).sqrt() } else { 0.0 };
    let planar = nm.d1() >= 2;
    let (k0, vperp) = (nm.k0(), nm.var_y_perp_xw1());
    let zmax = k0.sqrt();
    let a_hi = c_high.min(1.0 - 1e-9);
    let gap_low = beta - b_low;
    let tau = 2.0 * std::f64::consts::PI;
    let eval = |t: [f64; 4]| -> f64 {
        // t = (norm of c, angle of c, z, q) in [0,1]^4 with b = beta - gap_low / q.
        let a = c_low + (a_hi - c_low) * t[0];
        let ang = tau * t[1];
        let (c1, c2) = if planar { (a * ang.cos(), a * ang.sin()) } else { (a * ang.cos().signum(), 0.0) };
        let z = zmax * (2.0 * t[2] - 1.0) * (1.0 - 1e-12);
        let gap = gap_low / t[3].max(1e-9);
        let b = beta - gap;
        let s = (1.0 - a * a).sqrt();
        let p = rx_bar * rx_bar * ((nx * s - c1 * z).powi(2) + (c2 * z).powi(2)) - z * z;
        if p < 0.0 || vperp / k0 * z * z / (k0 - z * z) < gap * gap {
            return f64::INFINITY;
        }
        let f = z * s / k0;
        let denom = (((y1 - b * nx) * f - c1 * gap).powi(2) + (y2 * f - c2 * gap).powi(2)).sqrt();
        if denom == 0.0 {
            f64::INFINITY
        } else {
            gap / denom
        }
    };
    let nz = n * Z_DENSITY;
    let mut starts: Vec<(f64, [f64; 4])> = (0..=n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut local = Vec::new();
            for j in 0..n {
                for l in 1..=n {
                    let mut best: Option<(f64, [f64; 4])> = None;
                    for k in 0..=nz {
                        let t = [i as f64 / n as f64, j as f64 / n as f64, k as f64 / nz as f64, l as f64 / n as f64];
                        let v = eval(t);
                        if v.is_finite() && best.is_none_or(|(bv, _)| v < bv) {
                            best = Some((v, t));
                        }
                    }
                    local.extend(best);
                }
            }
            local
        })
        .collect();
    starts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal)));
    starts.truncate(8);
    let zoomed: Vec<f64> = starts
        .par_iter()
        .map(|&start| {
            let mut best = start;
            let mut width = [1.0 / n as f64, 1.0 / n as f64, 1.0 / nz as f64, 1.0 / n as f64];
            for _ in 0..48 {
                let center = best.1;
                for i in 0..=8 {
                    for j in 0..=8 {
                        for k in 0..=8 {
                            for l in 0..=8 {
                                let off = |m: usize, w: f64| (m as f64 / 4.0 - 1.0) * w;
                                let t = [
                                    (center[0] + off(i, width[0])).clamp(0.0, 1.0),
                                    (center[1] + off(j, width[1])).rem_euclid(1.0),
                                    (center[2] + off(k, width[2])).clamp(0.0, 1.0),
                                    (center[3] + off(l, width[3])).clamp(0.0, 1.0),
                                ];
                                let v = eval(t);
                                if v < best.0 {
                                    best = (v, t);
                                }
                            }
                        }
                    }
                }
                for w in &mut width {
                    *w *= 0.5;
                }
            }
            best.0
        })
        .collect();
    zoomed.into_iter().fold(f64::INFINITY, f64::min)
}
