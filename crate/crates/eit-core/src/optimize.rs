//! Bound-constrained quasi-Newton descent: projected L-BFGS directions with
//! Armijo backtracking.
//!
//! Deliberately dependency-free: the multiscale driver only needs a monotone
//! inner minimizer that respects box bounds and a fixed iteration budget per
//! phase. The limited-memory curvature model matters in practice — the
//! coarse control space has long curved valleys (region extent can trade
//! against region value) that first-order steps crawl along.

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
const STEP_GROWTH: f64 = 2.0;
const LBFGS_MEMORY: usize = 8;

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub accepted_steps: usize,
    /// Set when a line search exhausted its backtracks; `x` is still the best
    /// iterate seen.
    pub line_search_failed: bool,
    /// Objective evaluations consumed (gradient calls not included).
    pub evaluations: usize,
    /// Objective value after each accepted step.
    pub objective_history: Vec<f64>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Minimize `objective` over the box `[lower, upper]` starting from `x0`,
/// running at most `max_iters` accepted steps. Accepted steps are strictly
/// decreasing in objective; iterates are always bound-feasible.
pub fn inner_minimize(
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    objective: impl FnMut(&[f64]) -> f64,
    gradient: impl FnMut(&[f64]) -> Vec<f64>,
    max_iters: usize,
) -> InnerResult {
    inner_minimize_cb(x0, lower, upper, objective, gradient, max_iters, |_, _| false)
}

/// [`inner_minimize`] with an early-stop hook invoked after every accepted
/// step with `(accepted_count, objective)`; returning true ends the run.
pub fn inner_minimize_cb(
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    mut objective: impl FnMut(&[f64]) -> f64,
    mut gradient: impl FnMut(&[f64]) -> Vec<f64>,
    max_iters: usize,
    mut stop: impl FnMut(usize, f64) -> bool,
) -> InnerResult {
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n);
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut fx = objective(&x);
    let mut evaluations = 1;
    let mut accepted = 0;
    let mut history = Vec::new();
    let mut line_search_failed = false;
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (x, g) of last accepted
    // limited-memory curvature pairs (s, y, 1/<s,y>), newest last
    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::new();

    while accepted < max_iters {
        let g = gradient(&x);
        if let Some((px, pg)) = &prev {
            let s: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            if sy > 1e-12 * ss.sqrt() * y.iter().map(|a| a * a).sum::<f64>().sqrt() {
                if pairs.len() == LBFGS_MEMORY {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
        }
        // search direction: two-loop L-BFGS recursion, or a scaled gradient
        // step while no curvature information exists
        let mut d: Vec<f64>;
        if pairs.is_empty() {
            if prev.is_none() {
                // scale the first trial step to the gradient magnitude
                let gmax = g.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                if gmax > 0.0 {
                    let xscale = x.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
                    step = (0.1 * xscale / gmax).min(1e6);
                }
            }
            d = g.iter().map(|gi| -step * gi).collect();
        } else {
            d = g.iter().map(|gi| -gi).collect();
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * s.iter().zip(&d).map(|(si, di)| si * di).sum::<f64>();
                for i in 0..n {
                    d[i] -= a * y[i];
                }
                alphas.push(a);
            }
            let (s_last, y_last, _) = pairs.back().unwrap();
            let sy: f64 = s_last.iter().zip(y_last).map(|(a, b)| a * b).sum();
            let yy: f64 = y_last.iter().map(|a| a * a).sum();
            let gamma = (sy / yy).clamp(1e-12, 1e12);
            for di in d.iter_mut() {
                *di *= gamma;
            }
            for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
                let b = rho * y.iter().zip(&d).map(|(yi, di)| yi * di).sum::<f64>();
                for i in 0..n {
                    d[i] += (a - b) * s[i];
                }
            }
            // guard: fall back to steepest descent if the model direction
            // lost descent (possible after aggressive bound projections)
            let gd: f64 = g.iter().zip(&d).map(|(gi, di)| gi * di).sum();
            if !(gd < 0.0) {
                let (ss, sy) = {
                    let (s, y, _) = pairs.back().unwrap();
                    (
                        s.iter().map(|a| a * a).sum::<f64>(),
                        s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
                    )
                };
                let bb = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { step };
                d = g.iter().map(|gi| -bb * gi).collect();
            }
        }
        let mut found = false;
        let mut t = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            project(&mut trial, lower, upper);
            let decrease_pred: f64 = x
                .iter()
                .zip(&trial)
                .zip(&g)
                .map(|((xi, ti), gi)| gi * (xi - ti))
                .sum();
            if decrease_pred <= 0.0 {
                // projected step is null (or uphill): at a stationary point
                // of the box-constrained problem
                break;
            }
            let ft = objective(&trial);
            evaluations += 1;
            if ft <= fx - ARMIJO_C1 * decrease_pred {
                prev = Some((x.clone(), g.clone()));
                x = trial;
                fx = ft;
                accepted += 1;
                history.push(fx);
                if pairs.is_empty() {
                    step = step * t * STEP_GROWTH;
                }
                found = true;
                break;
            }
            t *= BACKTRACK;
        }
        if found && stop(accepted, fx) {
            break;
        }
        if !found {
            // either converged (null projected step) or line search exhausted
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + di).collect();
            project(&mut trial, lower, upper);
            let moved = x.iter().zip(&trial).any(|(a, b)| (a - b).abs() > 0.0);
            if moved {
                line_search_failed = true;
            }
            break;
        }
    }

    InnerResult {
        x,
        objective: fx,
        accepted_steps: accepted,
        line_search_failed,
        evaluations,
        objective_history: history,
    }
}
