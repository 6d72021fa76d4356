//! The multiscale optimization driver: alternating fine (reduced xi-space)
//! and coarse (near-binary zeta-space) phases with PCA re-truncation at the
//! switches.
//!
//! Fine phases run projected gradients on the leading PCA coefficients
//! against all rotated measurement patterns; coarse phases optimize the
//! region values and thresholds against the first pattern only. Switches are
//! guarded: the fine objective immediately after a coarse-to-fine switch
//! never exceeds the fine objective at the end of the previous fine phase.

use std::cell::Cell;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::adjoint::SigmaGradient;
use crate::coarse::{
    binarize, coarse_gradient, detect_regions, init_controls, CoarseControls, CoarseError,
    PartitionMap,
};
use crate::diagnostics::l2_error;
use crate::forward::{ConductivityField, RobinVariant};
use crate::geometry::{ElectrodeLayout, Mesh};
use crate::objective::{
    augment_coarse_gradient, evaluate, evaluate_regularized, misfit_gradient, DataError,
    MeasurementSet, RegularizationConfig,
};
use crate::optimize::inner_minimize_cb;
use crate::pca::{project_gradient, to_sigma, to_xi, truncate, PcaBasis, XiVector};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Objective(#[from] DataError),
    #[error(transparent)]
    Coarse(#[from] CoarseError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SwitchSchedule {
    /// Iterations per phase.
    pub n_s: usize,
    /// Fine-phase relative-change tolerance.
    pub eps_f: f64,
    /// Coarse-phase relative-change tolerance (0 disables the test).
    pub eps_c: f64,
    pub max_iterations: usize,
    pub max_objective_evaluations: usize,
    /// Relaxation cap for the switch blending, in (0, 1].
    pub alpha_max: f64,
}

impl Default for SwitchSchedule {
    fn default() -> Self {
        Self {
            n_s: 5,
            eps_f: 1e-9,
            eps_c: 0.0,
            max_iterations: 2000,
            max_objective_evaluations: 100_000,
            alpha_max: 1.0,
        }
    }
}

impl SwitchSchedule {
    pub fn validate(&self) -> Result<(), DriverError> {
        if self.n_s < 1 {
            return Err(DriverError::InvalidSchedule("n_s must be >= 1".into()));
        }
        if self.eps_f < 0.0 || self.eps_c < 0.0 {
            return Err(DriverError::InvalidSchedule("tolerances must be >= 0".into()));
        }
        if self.max_iterations == 0 || self.max_objective_evaluations == 0 {
            return Err(DriverError::InvalidSchedule("caps must be positive".into()));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= 1.0) {
            return Err(DriverError::InvalidSchedule(format!("alpha_max {}", self.alpha_max)));
        }
        Ok(())
    }
}

/// 0 on fine half-cycles, 1 on coarse half-cycles: iterations are grouped in
/// blocks of `n_s`, alternating fine first.
pub fn scale_indicator(k: usize, n_s: usize) -> u8 {
    assert!(k >= 1);
    (((k - 1) / n_s) % 2) as u8
}

/// Relative-change termination test on consecutive objective records, with
/// the first iteration after each switch excluded. `objectives` holds J per
/// realized iteration in order; `k` is the iteration of the last record.
pub fn should_terminate(objectives: &[f64], schedule: &SwitchSchedule, k: usize) -> bool {
    if objectives.len() < 2 {
        return false;
    }
    if k > 1 && (k - 1) % schedule.n_s == 0 {
        return false; // k = k_s * n_s + 1: first iteration of a new phase
    }
    let eps = if scale_indicator(k, schedule.n_s) == 0 { schedule.eps_f } else { schedule.eps_c };
    if eps == 0.0 {
        return false;
    }
    let jk = objectives[objectives.len() - 1];
    let jp = objectives[objectives.len() - 2];
    if jk == 0.0 {
        return true;
    }
    ((jk - jp) / jk).abs() < eps
}

/// Smallest-argmin integer search over `1..=n`: evaluate on the geometric
/// ladder {1, 2, 4, ...} plus `n`, then scan the bracket around the ladder
/// minimum linearly. Ties break toward the smallest index.
pub fn integer_argmin(n: usize, mut eval: impl FnMut(usize) -> f64) -> usize {
    assert!(n >= 1);
    if n == 1 {
        return 1;
    }
    let mut ladder = Vec::new();
    let mut v = 1usize;
    while v < n {
        ladder.push(v);
        v *= 2;
    }
    ladder.push(n);
    let vals: Vec<f64> = ladder.iter().map(|&c| eval(c)).collect();
    let mut best_i = 0;
    for i in 1..vals.len() {
        if vals[i] < vals[best_i] {
            best_i = i;
        }
    }
    // linear scan over the open bracket around the ladder minimum
    let lo = if best_i == 0 { 1 } else { ladder[best_i - 1] };
    let hi = if best_i + 1 < ladder.len() { ladder[best_i + 1] } else { n };
    let mut best = (vals[best_i], ladder[best_i]);
    for c in lo..=hi {
        if ladder.contains(&c) {
            let known = vals[ladder.iter().position(|&l| l == c).unwrap()];
            if known < best.0 || (known == best.0 && c < best.1) {
                best = (known, c);
            }
            continue;
        }
        let val = eval(c);
        if val < best.0 || (val == best.0 && c < best.1) {
            best = (val, c);
        }
    }
    best.1
}

/// Largest feasible integer in `1..=n` assuming feasibility is monotone
/// (feasible below some boundary): bisect the boundary. Returns `fallback`
/// when nothing is feasible.
pub fn integer_max_feasible(n: usize, fallback: usize, mut feasible: impl FnMut(usize) -> bool) -> usize {
    if feasible(n) {
        return n;
    }
    if !feasible(1) {
        return fallback;
    }
    // invariant: feasible(lo), !feasible(hi)
    let (mut lo, mut hi) = (1usize, n);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TerminationReason {
    FineTolerance,
    CoarseTolerance,
    MaxIterations,
    MaxEvaluations,
    Stalled,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HistoryRecord {
    pub k: usize,
    /// 0 fine, 1 coarse.
    pub scale: u8,
    pub j_fine: f64,
    pub j_coarse: f64,
    pub l2_error: f64,
    pub n_xi: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DriverConfig {
    pub schedule: SwitchSchedule,
    pub n_max: usize,
    /// FD step for threshold gradients, in the normalized coordinate.
    pub delta_zeta: f64,
    /// `None` disables the coarse regularization entirely.
    pub regularization: Option<RegularizationConfig>,
    pub robin_variant: RobinVariant,
    /// Skip coarse phases: plain reduced-space descent.
    pub fine_only: bool,
    /// Constant initial guess.
    pub sigma0: f64,
    /// Enable the integer re-truncation searches at the switches.
    pub tuned_pca: bool,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            schedule: SwitchSchedule::default(),
            n_max: 5,
            // set experimentally: on N ~ 2000 meshes a 1e-3 step moves no
            // element across a cut, zeroing the threshold FD gradients
            delta_zeta: 1e-2,
            regularization: None,
            robin_variant: RobinVariant::SigmaScaled,
            fine_only: false,
            sigma0: 0.3,
            tuned_pca: true,
        }
    }
}

#[derive(Debug)]
pub struct OptimizationState {
    pub k: usize,
    pub xi: XiVector,
    pub sigma: ConductivityField,
    /// Last coarse-phase result, when a coarse phase ran.
    pub zeta: Option<CoarseControls>,
    pub map: Option<PartitionMap>,
    /// Binarized field at the end of the last coarse phase.
    pub sigma_coarse: Option<ConductivityField>,
    pub history: Vec<HistoryRecord>,
    pub evaluations: usize,
    pub termination: TerminationReason,
}

pub fn write_history_csv(history: &[HistoryRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "k,scale,J_fine,J_coarse,l2_error,N_xi,alpha")?;
    for r in history {
        writeln!(
            f,
            "{},{},{:e},{:e},{:e},{},{:e}",
            r.k, r.scale, r.j_fine, r.j_coarse, r.l2_error, r.n_xi, r.alpha
        )?;
    }
    Ok(())
}

struct Budget<'a> {
    evals: &'a Cell<usize>,
    cap: usize,
}

impl Budget<'_> {
    fn spend(&self, n: usize) {
        self.evals.set(self.evals.get() + n);
    }

    fn exhausted(&self) -> bool {
        self.evals.get() >= self.cap
    }
}

/// Run the alternating multiscale loop.
///
/// `truth` is only used to fill the `l2_error` history column.
pub fn run(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    basis: &PcaBasis,
    data: &MeasurementSet,
    config: &DriverConfig,
    truth: Option<&ConductivityField>,
) -> Result<OptimizationState, DriverError> {
    config.schedule.validate()?;
    data.validate()?;
    if let Some(reg) = &config.regularization {
        reg.validate()?;
    }
    let n_s = config.schedule.n_s;
    let coarse_data = data.first_rotation_only();
    let evals = Cell::new(0usize);
    let budget = Budget { evals: &evals, cap: config.schedule.max_objective_evaluations };

    // fine-scale objective/gradient over full xi coefficient vectors
    let j_fine = |xi: &XiVector| -> Result<f64, DriverError> {
        budget.spend(1);
        Ok(evaluate(mesh, &to_sigma(xi, basis), layout, data)?.value)
    };
    let j_coarse_of_field = |field: &ConductivityField| -> Result<f64, DriverError> {
        budget.spend(1);
        Ok(evaluate(mesh, field, layout, &coarse_data)?.value)
    };

    let sigma0 = ConductivityField::constant(config.sigma0, mesh);
    let mut xi = to_xi(&sigma0, basis);
    let n_xi = basis.num_components();

    let mut history: Vec<HistoryRecord> = Vec::new();
    let mut objectives: Vec<f64> = Vec::new(); // J per realized iteration
    let mut k = 1usize;
    let mut termination = None;
    let mut stalled_phases = 0usize;

    let mut zeta_prev: Option<CoarseControls> = None;
    let mut xi_fine_prev: Option<XiVector> = None; // pre-truncation fine iterate
    let mut map_prev: Option<PartitionMap> = None;
    let mut sigma_coarse_final: Option<ConductivityField> = None;
    let mut j_ref_fine: Option<f64> = None; // fine J at end of last fine phase
    let mut pending_switch_from_coarse = false;

    let l2 = |field: &ConductivityField| truth.map_or(f64::NAN, |t| l2_error(field, t, mesh));

    'phases: while k <= config.schedule.max_iterations && !budget.exhausted() {
        let chi = if config.fine_only { 0 } else { scale_indicator(k, n_s) };
        let phase_start = k;
        let phase_budget = n_s.min(config.schedule.max_iterations - k + 1);

        if chi == 0 {
            // ---- coarse-to-fine switch ----
            let mut alpha_used = f64::NAN;
            if pending_switch_from_coarse {
                let (Some(zeta), Some(map), Some(j_ref)) =
                    (&zeta_prev, &map_prev, j_ref_fine)
                else {
                    unreachable!("coarse phase ran without leaving state");
                };
                let fine_ref = to_sigma(&xi, basis);
                let sigma_c = binarize(&fine_ref, zeta, map);
                sigma_coarse_final = Some(sigma_c.clone());
                let xi_proj = to_xi(&sigma_c, basis);
                // blend against the fine iterate from before the Eq-30-style
                // truncation: that is what the guard level j_ref refers to
                let xi_ref = xi_fine_prev.clone().unwrap_or_else(|| xi.clone());
                // smallest alpha on a 33-point grid whose blend keeps the
                // fine objective at or below the previous fine level
                let mut chosen: Option<(f64, XiVector)> = None;
                for step in 0..=32 {
                    let alpha = config.schedule.alpha_max * step as f64 / 32.0;
                    let blend = XiVector {
                        coefficients: xi_ref
                            .coefficients
                            .iter()
                            .zip(&xi_proj.coefficients)
                            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                            .collect(),
                        active_count: n_xi,
                    };
                    if j_fine(&blend)? <= j_ref * (1.0 + 1e-12) {
                        chosen = Some((alpha, blend));
                        break;
                    }
                    if budget.exhausted() {
                        break;
                    }
                }
                match chosen {
                    Some((alpha, blend)) => {
                        alpha_used = alpha;
                        // re-truncation: largest component count that keeps
                        // the guard satisfied
                        if config.tuned_pca {
                            let prev_active = xi.active_count;
                            let nt = integer_max_feasible(n_xi, prev_active, |c| {
                                if budget.exhausted() {
                                    return false;
                                }
                                let t = truncate(&blend, c);
                                j_fine(&t).map(|j| j <= j_ref * (1.0 + 1e-12)).unwrap_or(false)
                            });
                            if nt == prev_active && {
                                let t = truncate(&blend, nt);
                                j_fine(&t)? > j_ref * (1.0 + 1e-12)
                            } {
                                // fallback: nothing feasible, keep the fine
                                // iterate exactly
                                alpha_used = 1.0;
                                xi = xi_ref.clone();
                            } else {
                                xi = truncate(&blend, nt);
                            }
                        } else {
                            xi = blend;
                        }
                    }
                    None => {
                        alpha_used = 1.0; // revert to the previous fine iterate
                        xi = xi_ref;
                    }
                }
                pending_switch_from_coarse = false;
            }

            // ---- fine phase ----
            let active = xi.active_count;
            let x0: Vec<f64> = xi.coefficients[..active].to_vec();
            let lower = vec![f64::NEG_INFINITY; active];
            let upper = vec![f64::INFINITY; active];
            let full_xi = |x: &[f64]| -> XiVector {
                let mut c = vec![0.0; n_xi];
                c[..active].copy_from_slice(x);
                XiVector { coefficients: c, active_count: active }
            };
            let err: std::cell::RefCell<Option<DriverError>> = Default::default();
            let mut phase_objs: Vec<f64> = Vec::new();
            let res = inner_minimize_cb(
                &x0,
                &lower,
                &upper,
                |x| {
                    budget.spend(1);
                    match evaluate(mesh, &to_sigma(&full_xi(x), basis), layout, data) {
                        Ok(e) => e.value,
                        Err(e) => {
                            err.borrow_mut().get_or_insert(e.into());
                            f64::INFINITY
                        }
                    }
                },
                |x| {
                    let xi_x = full_xi(x);
                    let sigma = to_sigma(&xi_x, basis);
                    budget.spend(1);
                    match evaluate(mesh, &sigma, layout, data).and_then(|e| {
                        misfit_gradient(mesh, &sigma, layout, data, &e, config.robin_variant)
                    }) {
                        Ok(g) => project_gradient(&g, basis, active)[..active].to_vec(),
                        Err(e) => {
                            err.borrow_mut().get_or_insert(e.into());
                            vec![0.0; active]
                        }
                    }
                },
                phase_budget,
                |_, fx| {
                    phase_objs.push(fx);
                    budget.exhausted()
                },
            );
            if let Some(e) = err.into_inner() {
                return Err(e);
            }
            xi = full_xi(&res.x);
            let sigma_now = to_sigma(&xi, basis);
            for (i, &j) in res.objective_history.iter().enumerate() {
                let kk = phase_start + i;
                objectives.push(j);
                history.push(HistoryRecord {
                    k: kk,
                    scale: 0,
                    j_fine: j,
                    j_coarse: f64::NAN,
                    l2_error: f64::NAN,
                    n_xi: active,
                    alpha: if i == 0 { alpha_used } else { f64::NAN },
                });
                if should_terminate(&objectives, &config.schedule, kk) {
                    history.last_mut().unwrap().l2_error = l2(&sigma_now);
                    termination = Some(TerminationReason::FineTolerance);
                    k = kk + 1;
                    break 'phases;
                }
            }
            if let Some(last) = history.last_mut() {
                if last.scale == 0 && last.k >= phase_start {
                    last.l2_error = l2(&sigma_now);
                }
            }
            if res.accepted_steps == 0 {
                stalled_phases += 1;
            } else {
                stalled_phases = 0;
            }
            j_ref_fine = Some(res.objective);
            xi_fine_prev = Some(xi.clone());
        } else {
            // ---- fine-to-coarse switch ----
            let reuse = zeta_prev.clone();
            let pipeline = |xi_t: &XiVector,
                            reuse: &Option<CoarseControls>,
                            prev_map: Option<&PartitionMap>|
             -> Result<(ConductivityField, PartitionMap, CoarseControls, ConductivityField), DriverError> {
                let fine_ref = to_sigma(xi_t, basis);
                let zeta_guess = match reuse {
                    Some(z) => z.clone(),
                    None => {
                        // detection before controls exist: neutral thresholds
                        let probe = CoarseControls {
                            sigma_low: 1e-4,
                            sigma_high: vec![1.0; config.n_max],
                            sigma_th: vec![0.5; config.n_max],
                        };
                        let map0 = detect_regions(&fine_ref, &probe, mesh, prev_map);
                        init_controls(&fine_ref, &map0, config.n_max)?
                    }
                };
                let map = detect_regions(&fine_ref, &zeta_guess, mesh, prev_map);
                let zeta = match reuse {
                    Some(z) => z.clone(),
                    None => init_controls(&fine_ref, &map, config.n_max)?,
                };
                let bin = binarize(&fine_ref, &zeta, &map);
                Ok((fine_ref, map, zeta, bin))
            };

            let nt = if config.tuned_pca && n_xi > 1 {
                let mut failed: Option<DriverError> = None;
                let chosen = integer_argmin(n_xi, |c| {
                    if budget.exhausted() || failed.is_some() {
                        return f64::INFINITY;
                    }
                    let xi_t = truncate(&xi, c);
                    match pipeline(&xi_t, &reuse, map_prev.as_ref())
                        .and_then(|(_, _, _, bin)| j_coarse_of_field(&bin))
                    {
                        Ok(j) => j,
                        Err(e) => {
                            failed.get_or_insert(e);
                            f64::INFINITY
                        }
                    }
                });
                if let Some(e) = failed {
                    return Err(e);
                }
                chosen
            } else {
                xi.active_count.max(1)
            };
            xi = truncate(&xi, nt);
            let (fine_ref, map, zeta0, _) = pipeline(&xi, &reuse, map_prev.as_ref())?;

            // ---- coarse phase: optimize (sigma_low, gaps, thresholds) ----
            // gaps g_n = sigma_high_n - sigma_low keep Eq. 24's ordering as a
            // plain box constraint
            let n_max = config.n_max;
            let to_zeta = |x: &[f64]| -> CoarseControls {
                CoarseControls {
                    sigma_low: x[0],
                    sigma_high: (0..n_max).map(|n| x[0] + x[1 + n]).collect(),
                    sigma_th: x[1 + n_max..].to_vec(),
                }
            };
            let from_zeta = |z: &CoarseControls| -> Vec<f64> {
                let mut x = vec![z.sigma_low];
                x.extend(z.sigma_high.iter().map(|h| h - z.sigma_low));
                x.extend_from_slice(&z.sigma_th);
                x
            };
            let mut lower = vec![1e-4];
            lower.extend(vec![1e-6; n_max]);
            lower.extend(vec![1e-3; n_max]);
            let mut upper = vec![f64::INFINITY; 1 + n_max];
            upper.extend(vec![1.0 - 1e-3; n_max]);

            let reg = config.regularization;
            let chi_c = true;
            let coarse_obj = |z: &CoarseControls| -> Result<f64, DriverError> {
                let bin = binarize(&fine_ref, z, &map);
                let j = j_coarse_of_field(&bin)?;
                Ok(match &reg {
                    Some(r) => evaluate_regularized(j, z.sigma_low, &z.sigma_high, r, chi_c),
                    None => j,
                })
            };

            let err: std::cell::RefCell<Option<DriverError>> = Default::default();
            let mut phase_objs: Vec<f64> = Vec::new();
            let res = inner_minimize_cb(
                &from_zeta(&zeta0),
                &lower,
                &upper,
                |x| match coarse_obj(&to_zeta(x)) {
                    Ok(j) => j,
                    Err(e) => {
                        err.borrow_mut().get_or_insert(e);
                        f64::INFINITY
                    }
                },
                |x| {
                    let z = to_zeta(x);
                    let bin = binarize(&fine_ref, &z, &map);
                    budget.spend(1 + n_max); // base eval + threshold FD probes
                    let grad = (|| -> Result<Vec<f64>, DriverError> {
                        let e = evaluate(mesh, &bin, layout, &coarse_data)?;
                        let sg: SigmaGradient = misfit_gradient(
                            mesh,
                            &bin,
                            layout,
                            &coarse_data,
                            &e,
                            config.robin_variant,
                        )?;
                        let mut g = coarse_gradient(
                            mesh,
                            layout,
                            &coarse_data,
                            &fine_ref,
                            &z,
                            &map,
                            &sg,
                            e.value,
                            config.delta_zeta,
                        )?
                        .values;
                        if let Some(r) = &reg {
                            augment_coarse_gradient(&mut g, z.sigma_low, &z.sigma_high, r);
                        }
                        // chain rule to (sigma_low, gaps, thresholds):
                        // d/d sigma_low = dJ/d zeta_1 + sum_n dJ/d sigma_high_n
                        let mut out = vec![0.0; 1 + 2 * n_max];
                        out[0] = g[0] + g[1..=n_max].iter().sum::<f64>();
                        out[1..=n_max].copy_from_slice(&g[1..=n_max]);
                        out[1 + n_max..].copy_from_slice(&g[1 + n_max..]);
                        Ok(out)
                    })();
                    match grad {
                        Ok(g) => g,
                        Err(e) => {
                            err.borrow_mut().get_or_insert(e);
                            vec![0.0; 1 + 2 * n_max]
                        }
                    }
                },
                phase_budget,
                |_, fx| {
                    phase_objs.push(fx);
                    budget.exhausted()
                },
            );
            if let Some(e) = err.into_inner() {
                return Err(e);
            }
            let zeta_end = to_zeta(&res.x);
            let bin_end = binarize(&fine_ref, &zeta_end, &map);
            for (i, &j) in res.objective_history.iter().enumerate() {
                let kk = phase_start + i;
                objectives.push(j);
                history.push(HistoryRecord {
                    k: kk,
                    scale: 1,
                    j_fine: f64::NAN,
                    j_coarse: j,
                    l2_error: f64::NAN,
                    n_xi: xi.active_count,
                    alpha: f64::NAN,
                });
                if should_terminate(&objectives, &config.schedule, kk) {
                    history.last_mut().unwrap().l2_error = l2(&bin_end);
                    termination = Some(TerminationReason::CoarseTolerance);
                    zeta_prev = Some(zeta_end.clone());
                    map_prev = Some(map.clone());
                    sigma_coarse_final = Some(bin_end.clone());
                    k = kk + 1;
                    break 'phases;
                }
            }
            if let Some(last) = history.last_mut() {
                if last.scale == 1 && last.k >= phase_start {
                    last.l2_error = l2(&bin_end);
                }
            }
            if res.accepted_steps == 0 {
                stalled_phases += 1;
            } else {
                stalled_phases = 0;
            }
            sigma_coarse_final = Some(bin_end);
            zeta_prev = Some(zeta_end);
            map_prev = Some(map);
            pending_switch_from_coarse = true;
        }

        // jump to the next phase boundary even if the phase ended early
        k = phase_start + n_s;
        if stalled_phases >= 2 {
            termination = Some(TerminationReason::Stalled);
            break;
        }
        if budget.exhausted() {
            termination = Some(TerminationReason::MaxEvaluations);
            break;
        }
    }

    let termination = termination.unwrap_or(if budget.exhausted() {
        TerminationReason::MaxEvaluations
    } else {
        TerminationReason::MaxIterations
    });
    let sigma = to_sigma(&xi, basis);
    Ok(OptimizationState {
        k,
        xi,
        sigma,
        zeta: zeta_prev,
        map: map_prev,
        sigma_coarse: sigma_coarse_final,
        history,
        evaluations: evals.get(),
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_disc_mesh;
    use crate::objective::reference_base_drive;
    use crate::pca::{build_basis, generate_realizations, RealizationParams};
    use crate::phantoms::{make_circles_phantom, simulate_data, reference_three_spot_phantom};

    #[test]
    fn scale_indicator_pattern() {
        assert_eq!(scale_indicator(3, 5), 0);
        assert_eq!(scale_indicator(5, 5), 0);
        assert_eq!(scale_indicator(6, 5), 1);
        assert_eq!(scale_indicator(7, 5), 1);
        assert_eq!(scale_indicator(10, 5), 1);
        assert_eq!(scale_indicator(11, 5), 0);
    }

    #[test]
    fn termination_rules() {
        let sched = SwitchSchedule { n_s: 5, eps_f: 1e-9, eps_c: 0.0, ..Default::default() };
        // fine phase: small relative change fires
        assert!(should_terminate(&[1.0, 1.0 - 1e-10], &sched, 3));
        assert!(!should_terminate(&[1.0, 0.5], &sched, 3));
        // first iteration after a switch is excluded
        assert!(!should_terminate(&[1.0, 1.0 - 1e-12], &sched, 6));
        assert!(!should_terminate(&[1.0, 1.0 - 1e-12], &sched, 11));
        // coarse phase with eps_c = 0 never fires
        assert!(!should_terminate(&[1.0, 1.0], &sched, 8));
        // needs two records
        assert!(!should_terminate(&[1.0], &sched, 2));
    }

    #[test]
    fn integer_argmin_matches_brute_force() {
        for n in [1usize, 2, 7, 17, 32] {
            // strictly unimodal with minimum at mid
            let target = (n as f64 * 0.6).max(1.0);
            let f = |c: usize| (c as f64 - target).powi(2);
            let got = integer_argmin(n, f);
            let brute = (1..=n).min_by(|&a, &b| f(a).partial_cmp(&f(b)).unwrap()).unwrap();
            assert_eq!(got, brute, "n = {n}");
        }
        // constant objective ties break to smallest
        assert_eq!(integer_argmin(32, |_| 1.0), 1);
    }

    #[test]
    fn integer_max_feasible_matches_oracle() {
        for n in [1usize, 2, 9, 32] {
            for boundary in 0..=n {
                let got = integer_max_feasible(n, 99, |c| c <= boundary);
                let brute = (1..=n).rev().find(|&c| c <= boundary);
                assert_eq!(got, brute.unwrap_or(99), "n {n} boundary {boundary}");
            }
        }
    }

    fn setup(target_elems: usize) -> (Mesh, ElectrodeLayout, PcaBasis, ConductivityField, MeasurementSet) {
        let layout = ElectrodeLayout::equispaced(16, 0.12, 0.1, 0.0).unwrap();
        let mesh = build_disc_mesh(0.1, target_elems, &layout).unwrap();
        let ens = generate_realizations(&RealizationParams::default(), &mesh, 150, 42).unwrap();
        let basis = build_basis(&ens, 0.99).unwrap();
        let truth =
            make_circles_phantom(&reference_three_spot_phantom(0.1, [0.4, 0.4, 0.4]), &mesh)
                .unwrap();
        let data = simulate_data(&truth, &mesh, &layout, &reference_base_drive(), 16, 1).unwrap();
        (mesh, layout, basis, truth, data)
    }

    #[test]
    fn immediate_termination_with_huge_tolerance() {
        let (mesh, layout, basis, truth, data) = setup(700);
        let config = DriverConfig {
            schedule: SwitchSchedule { eps_f: 1e9, ..Default::default() },
            ..Default::default()
        };
        let state = run(&mesh, &layout, &basis, &data, &config, Some(&truth)).unwrap();
        assert_eq!(state.termination, TerminationReason::FineTolerance);
        assert!(state.k <= 3);
        assert!(!state.history.is_empty());
        assert!(state.history.iter().all(|r| r.scale == 0));
    }

    #[test]
    fn phase_alternation_and_history_shape() {
        let (mesh, layout, basis, truth, data) = setup(700);
        let config = DriverConfig {
            schedule: SwitchSchedule {
                n_s: 3,
                max_iterations: 12,
                ..Default::default()
            },
            n_max: 3,
            ..Default::default()
        };
        let state = run(&mesh, &layout, &basis, &data, &config, Some(&truth)).unwrap();
        for r in &state.history {
            assert_eq!(r.scale, scale_indicator(r.k, 3), "k {}", r.k);
            if r.scale == 0 {
                assert!(r.j_fine.is_finite() && r.j_coarse.is_nan());
            } else {
                assert!(r.j_coarse.is_finite() && r.j_fine.is_nan());
            }
        }
        // ks strictly increasing
        for w in state.history.windows(2) {
            assert!(w[1].k > w[0].k);
        }
        assert!(state.evaluations <= config.schedule.max_objective_evaluations);
        // a coarse phase ran and produced a near-binary field
        let coarse = state.sigma_coarse.expect("coarse output");
        let mut distinct: Vec<f64> = coarse.values.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        assert!(distinct.len() <= config.n_max + 1);
    }

    #[test]
    fn monotone_safety_at_switches() {
        let (mesh, layout, basis, truth, data) = setup(700);
        let config = DriverConfig {
            schedule: SwitchSchedule {
                n_s: 3,
                max_iterations: 18,
                ..Default::default()
            },
            n_max: 3,
            ..Default::default()
        };
        let state = run(&mesh, &layout, &basis, &data, &config, Some(&truth)).unwrap();
        // fine J at first record of each fine phase <= last record of the
        // previous fine phase
        let fine: Vec<&HistoryRecord> = state.history.iter().filter(|r| r.scale == 0).collect();
        for w in fine.windows(2) {
            let gap = w[1].k > w[0].k + 1; // phase boundary in between
            if gap {
                assert!(
                    w[1].j_fine <= w[0].j_fine * (1.0 + 1e-9),
                    "switch raised fine J: {} -> {}",
                    w[0].j_fine,
                    w[1].j_fine
                );
            }
        }
    }

    #[test]
    fn fine_only_never_goes_coarse() {
        let (mesh, layout, basis, truth, data) = setup(700);
        let config = DriverConfig {
            fine_only: true,
            schedule: SwitchSchedule {
                max_iterations: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let state = run(&mesh, &layout, &basis, &data, &config, Some(&truth)).unwrap();
        assert!(state.history.iter().all(|r| r.scale == 0));
        assert!(state.zeta.is_none());
    }

    #[test]
    fn history_csv_round_trip_shape() {
        let (mesh, layout, basis, truth, data) = setup(700);
        let config = DriverConfig {
            schedule: SwitchSchedule {
                n_s: 2,
                max_iterations: 6,
                ..Default::default()
            },
            n_max: 2,
            ..Default::default()
        };
        let state = run(&mesh, &layout, &basis, &data, &config, Some(&truth)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.csv");
        write_history_csv(&state.history, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("k,scale,J_fine,J_coarse,l2_error,N_xi,alpha\n"));
        assert_eq!(text.lines().count(), state.history.len() + 1);
    }
}
