//! Derivative-free local minimization (Nelder–Mead simplex search) and a
//! deterministic low-discrepancy sequence for seeding multi-start searches.
//!
//! Objectives may return `f64::INFINITY` for infeasible points; such points
//! are simply ranked worst. NaN must never be returned.

/// Options for [`nelder_mead`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Maximum number of objective evaluations.
    pub max_evals: usize,
    /// Stop when the simplex diameter (max-norm) falls below this value...
    pub x_tol: f64,
    /// ...and the spread of objective values falls below this value.
    pub f_tol: f64,
    /// Number of times the simplex is rebuilt around the incumbent after
    /// convergence, guarding against premature collapse.
    pub rebuilds: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_evals: 4000, x_tol: 1e-11, f_tol: 1e-15, rebuilds: 2 }
    }
}

/// Result of a local search.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMinimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` starting from `x0`, with initial simplex edge lengths `step`.
///
/// Uses the standard reflection/expansion/contraction/shrink coefficients
/// (1, 2, 1/2, 1/2).
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    step: &[f64],
    opts: &NelderMeadOptions,
) -> LocalMinimum {
    let n = x0.len();
    assert_eq!(step.len(), n, "step length must match dimension");
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        debug_assert!(!v.is_nan(), "objective returned NaN");
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0);
    let mut converged = false;
    let mut scale = 1.0;

    for _round in 0..=opts.rebuilds {
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut values: Vec<f64> = Vec::with_capacity(n + 1);
        simplex.push(best_x.clone());
        values.push(best_f);
        for i in 0..n {
            let mut x = best_x.clone();
            x[i] += step[i] * scale;
            values.push(eval(&x));
            simplex.push(x);
        }
        converged = false;
        let mut order: Vec<usize> = (0..=n).collect();
        loop {
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            let (ib, iw, isw) = (order[0], order[n], order[n.saturating_sub(1)]);
            let diameter = simplex
                .iter()
                .map(|x| x.iter().zip(&simplex[ib]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            let spread = if values[iw].is_finite() {
                values[iw] - values[ib]
            } else {
                f64::INFINITY
            };
            if diameter <= opts.x_tol && spread <= opts.f_tol * (1.0 + values[ib].abs()) {
                converged = true;
                break;
            }
            if diameter <= opts.x_tol * 1e-3 {
                // Simplex has collapsed onto an infeasible or flat region.
                converged = values[ib].is_finite();
                break;
            }
            if evals.get() >= opts.max_evals {
                break;
            }
            let mut centroid = vec![0.0; n];
            for &i in &order[..n] {
                for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                    *c += v / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[iw]).map(|(c, w)| c + t * (c - w)).collect()
            };
            let xr = along(1.0);
            let fr = eval(&xr);
            if fr < values[ib] {
                let xe = along(2.0);
                let fe = eval(&xe);
                if fe < fr {
                    simplex[iw] = xe;
                    values[iw] = fe;
                } else {
                    simplex[iw] = xr;
                    values[iw] = fr;
                }
            } else if fr < values[isw] {
                simplex[iw] = xr;
                values[iw] = fr;
            } else {
                let (xc, fc) = if fr < values[iw] {
                    let xc = along(0.5);
                    let fc = eval(&xc);
                    (xc, fc)
                } else {
                    let xc = along(-0.5);
                    let fc = eval(&xc);
                    (xc, fc)
                };
                if fc < values[iw].min(fr) {
                    simplex[iw] = xc;
                    values[iw] = fc;
                } else {
                    let xb = simplex[ib].clone();
                    for &i in &order[1..] {
                        let x: Vec<f64> = simplex[i].iter().zip(&xb).map(|(v, b)| b + 0.5 * (v - b)).collect();
                        values[i] = eval(&x);
                        simplex[i] = x;
                    }
                }
            }
        }
        let ib = (0..=n)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
            .expect("non-empty simplex");
        let improved = values[ib] < best_f;
        if values[ib] <= best_f {
            best_f = values[ib];
            best_x = simplex[ib].clone();
        }
        if !improved && converged {
            break;
        }
        if evals.get() >= opts.max_evals {
            break;
        }
        scale *= 0.1;
    }
    LocalMinimum { x: best_x, f: best_f, evals: evals.get(), converged }
}

/// Radical-inverse (van der Corput) value of `index` in the given prime base.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    value
}

/// The `index`-th point of the Halton sequence in `[0,1)^dim` (dim <= 8).
pub fn halton_point(index: u64, dim: usize) -> Vec<f64> {
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    assert!(dim <= PRIMES.len(), "Halton dimension too large");
    PRIMES[..dim].iter().map(|&p| radical_inverse(index + 1, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_converges() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], &[0.5, 0.5], &NelderMeadOptions { max_evals: 20000, ..Default::default() });
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{m:?}");
        assert!(m.f < 1e-12);
    }

    #[test]
    fn infeasible_region_is_avoided() {
        let f = |x: &[f64]| if x[0] < 0.3 { f64::INFINITY } else { x[0] * x[0] + x[1] * x[1] };
        let m = nelder_mead(f, &[1.0, 1.0], &[0.2, 0.2], &NelderMeadOptions::default());
        assert!((m.x[0] - 0.3).abs() < 1e-6 && m.x[1].abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn halton_points_are_in_unit_cube_and_distinct() {
        let pts: Vec<Vec<f64>> = (0..64).map(|i| halton_point(i, 3)).collect();
        for p in &pts {
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
        }
        for i in 0..pts.len() {
            for j in 0..i {
                assert_ne!(pts[i], pts[j]);
            }
        }
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }
}
