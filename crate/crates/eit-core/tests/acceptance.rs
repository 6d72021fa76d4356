//! End-to-end acceptance checks. Each test prints a single
//! `[criterion N] PASS/FAIL: ...` line (visible with `--nocapture`) before
//! asserting, so a red run still reports every criterion it reached.
//!
//! The heavy inversion checks share fixtures through `OnceLock` so the
//! N≈2000 mesh, basis, and reference runs are computed once per process.

use std::sync::OnceLock;
use std::time::Instant;

use eit_core::coarse::{detect_regions, CoarseControls, PartitionMap};
use eit_core::diagnostics::{default_eps_grid, kappa_cheap, l2_error, random_direction};
use eit_core::driver::{run, scale_indicator, DriverConfig, OptimizationState};
use eit_core::forward::{extract_currents, solve_forward, ConductivityField, DriveVector};
use eit_core::geometry::{build_disc_mesh, ElectrodeLayout, Mesh};
use eit_core::objective::{
    coarse_penalty, evaluate, misfit_gradient, reference_base_drive, MeasurementSet,
    RegularizationConfig,
};
use eit_core::pca::{build_basis, generate_realizations, to_sigma, to_xi, PcaBasis, RealizationParams, XiVector};
use eit_core::phantoms::{
    add_noise, make_circles_phantom, reference_three_spot_phantom, simulate_data, NoiseMode,
    NoiseSpec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RADIUS: f64 = 0.1;

fn report(criterion: usize, pass: bool, detail: &str) -> bool {
    println!("[criterion {criterion}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn layout() -> ElectrodeLayout {
    ElectrodeLayout::equispaced(16, 0.12, 0.1, 0.0).unwrap()
}

fn mesh_of(target: usize) -> Mesh {
    build_disc_mesh(RADIUS, target, &layout()).unwrap()
}

fn spot_truth(mesh: &Mesh, values: [f64; 3]) -> ConductivityField {
    make_circles_phantom(&reference_three_spot_phantom(mesh.radius, values), mesh).unwrap()
}

fn simulate(mesh: &Mesh, truth: &ConductivityField) -> MeasurementSet {
    let base = reference_base_drive();
    simulate_data(truth, mesh, &layout(), &base, base.voltages.len(), 1).unwrap()
}

struct Fixture {
    mesh: Mesh,
    basis: PcaBasis,
    truth: ConductivityField,
    data: MeasurementSet,
}

/// Shared N≈2000 fixture for the inversion criteria.
fn fx() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let mesh = mesh_of(2000);
        let ens = generate_realizations(&RealizationParams::default(), &mesh, 1000, 42).unwrap();
        let basis = build_basis(&ens, 0.99).unwrap();
        let truth = spot_truth(&mesh, [0.4, 0.4, 0.4]);
        let data = simulate(&mesh, &truth);
        Fixture { mesh, basis, truth, data }
    })
}

fn driver_config(n_max: usize, fine_only: bool) -> DriverConfig {
    let mut cfg = DriverConfig::default();
    cfg.n_max = n_max;
    cfg.fine_only = fine_only;
    // Coarse-scale Tikhonov anchor at the assumed tissue conductivities.
    // The coarse misfit alone is nearly flat along a region-extent vs
    // region-value trade-off (an oversized region with diluted sigma_high
    // fits the 16 coarse measurements about as well as the true region with
    // the true value), so without the anchor the coarse solution drifts to
    // diluted values (~0.31 for a true 0.4). The anchor breaks that
    // degeneracy.
    cfg.regularization =
        Some(RegularizationConfig { beta_c: 1e-2, sigma_l_bar: 0.2, sigma_h_bar: 0.4 });
    cfg
}

fn run_fx(data: &MeasurementSet, n_max: usize, fine_only: bool) -> OptimizationState {
    let f = fx();
    run(&f.mesh, &layout(), &f.basis, data, &driver_config(n_max, fine_only), Some(&f.truth))
        .unwrap()
}

fn ms5() -> &'static OptimizationState {
    static S: OnceLock<OptimizationState> = OnceLock::new();
    S.get_or_init(|| run_fx(&fx().data, 5, false))
}

fn coarse_l2(state: &OptimizationState) -> f64 {
    l2_error(state.sigma_coarse.as_ref().expect("coarse field"), &fx().truth, &fx().mesh)
}

/// Min of |kappa - 1| over the tol-plateau, plus the plateau length, for a
/// fresh sigma-space kappa sweep on the given mesh.
fn kappa_stats(mesh: &Mesh, tol: f64) -> (f64, usize) {
    let lay = layout();
    let truth = spot_truth(mesh, [0.4, 0.4, 0.4]);
    let data = simulate(mesh, &truth);
    let sigma0 = ConductivityField::constant(0.3, mesh);
    let ev = evaluate(mesh, &sigma0, &lay, &data).unwrap();
    let grad = misfit_gradient(mesh, &sigma0, &lay, &data, &ev, Default::default()).unwrap();
    let obj = |x: &[f64]| {
        let f = ConductivityField { values: x.to_vec() };
        evaluate(mesh, &f, &lay, &data).unwrap().value
    };
    let dir = random_direction(mesh.num_elements(), 1);
    let rep = kappa_cheap(obj, ev.value, &grad.values, &sigma0.values, &dir, &default_eps_grid());
    let (start, len) = rep.plateau(tol);
    let min_dev = rep.kappa_values[start..start + len]
        .iter()
        .flatten()
        .map(|k| (k - 1.0).abs())
        .fold(f64::INFINITY, f64::min);
    (min_dev, len)
}

#[test]
fn criterion_1_kappa_plateau_fine_mesh() {
    let mesh = mesh_of(7726);
    let t0 = Instant::now();
    let (min_dev, len) = kappa_stats(&mesh, 1e-3);
    let secs = t0.elapsed().as_secs_f64();
    // grid has 3 points per decade; span in decades is (len-1)/3
    let decades = (len.saturating_sub(1)) as f64 / 3.0;
    let pass = decades >= 4.0 && secs < 120.0;
    assert!(report(
        1,
        pass,
        &format!(
            "plateau spans {decades:.1} decades (need >= 4) on N={} in {secs:.0}s (budget 120s); min |k-1| = {min_dev:.1e}",
            mesh.num_elements()
        )
    ));
}

// Known-red: the default gradient is the exact discrete adjoint, so the
// plateau minimum of |kappa - 1| is finite-difference/roundoff noise
// (1e-7..1e-5, direction-seed dependent) with no systematic refinement
// trend. A refinement improvement only exists for gradients carrying a
// discretization inconsistency, which this implementation deliberately
// avoids. Kept failing rather than tuned to a favorable seed.
#[test]
fn criterion_2_plateau_min_improves_with_refinement() {
    let mins: Vec<(usize, f64)> = [712, 2032, 7726]
        .iter()
        .map(|&t| {
            let mesh = mesh_of(t);
            let n = mesh.num_elements();
            (n, kappa_stats(&mesh, 1e-3).0)
        })
        .collect();
    // nonincreasing up to a factor-2 wobble per refinement step
    let pass = mins.windows(2).all(|w| w[1].1 <= 2.0 * w[0].1);
    let detail = mins
        .iter()
        .map(|(n, m)| format!("N={n}: {m:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    assert!(report(2, pass, &format!("plateau min |k-1| across meshes: {detail}")));
}

#[test]
fn criterion_3_truth_objective_vanishes() {
    let f = fx();
    let lay = layout();
    let j_true = evaluate(&f.mesh, &f.truth, &lay, &f.data).unwrap().value;
    let sigma0 = ConductivityField::constant(0.3, &f.mesh);
    let j0 = evaluate(&f.mesh, &sigma0, &lay, &f.data).unwrap().value;
    let pass = j_true <= 1e-10 * j0;
    assert!(report(
        3,
        pass,
        &format!("J(sigma_true) = {j_true:.2e} vs 1e-10 * J(sigma_0) = {:.2e}", 1e-10 * j0)
    ));
}

#[test]
fn criterion_4_multiscale_beats_fine_only() {
    let fine = run_fx(&fx().data, 1, true);
    let err_fine = l2_error(&fine.sigma, &fx().truth, &fx().mesh);
    let err_coarse = coarse_l2(ms5());
    let pass = err_coarse < err_fine;
    assert!(report(
        4,
        pass,
        &format!("coarse L2 error {err_coarse:.3e} vs fine-only {err_fine:.3e}")
    ));
}

#[test]
fn criterion_5_more_regions_no_worse() {
    let ms1 = run_fx(&fx().data, 1, false);
    let e5 = coarse_l2(ms5());
    let e1 = coarse_l2(&ms1);
    let pass = e5 <= e1;
    assert!(report(5, pass, &format!("N_max=5 error {e5:.3e} vs N_max=1 error {e1:.3e}")));
}

/// Match each truth spot to the recovered region with the largest element
/// overlap and return (recovered sigma_high, true value) pairs.
fn matched_region_values(
    state: &OptimizationState,
    mesh: &Mesh,
    values: [f64; 3],
) -> Vec<(f64, f64)> {
    let map = state.map.as_ref().expect("partition map");
    let zeta = state.zeta.as_ref().expect("coarse controls");
    let spec = reference_three_spot_phantom(mesh.radius, values);
    let mut out = Vec::new();
    for (spot, circle) in spec.circles.iter().enumerate() {
        let mut overlap = vec![0usize; map.n_max + 1];
        for e in 0..mesh.num_elements() {
            let c = mesh.centroid(e);
            let dx = c[0] - circle.center[0];
            let dy = c[1] - circle.center[1];
            if dx * dx + dy * dy <= circle.radius * circle.radius {
                overlap[map.assignment[e]] += 1;
            }
        }
        let region = (1..=map.n_max).max_by_key(|&r| overlap[r]).unwrap();
        if overlap[region] == 0 {
            // spot not detected at all: report NaN so the criterion fails loudly
            out.push((f64::NAN, values[spot]));
        } else {
            out.push((zeta.sigma_high[region - 1], values[spot]));
        }
    }
    out
}

// Known-red on the mixed phantom. The coarse stage sees only the
// first-rotation measurement rows, which cannot separate a region's extent
// from its value; the Tikhonov anchor toward sigma_h_bar = 0.4 that breaks
// that degeneracy (and makes the uniform phantom land at 0.398-0.404) also
// pins mixed-value regions near the prior: the sigma = 0.3 spot reconstructs
// at ~0.389. Weakening the anchor (beta_c 3e-3 or 1e-3) lets regions merge
// and dilute (~0.26 over 700 elements) and is strictly worse. Kept failing
// rather than loosening the tolerance or tuning the prior per phantom.
#[test]
fn criterion_6_recovered_high_values() {
    let f = fx();
    let uniform = matched_region_values(ms5(), &f.mesh, [0.4, 0.4, 0.4]);

    let mixed_truth = spot_truth(&f.mesh, [0.3, 0.4, 0.35]);
    let mixed_data = simulate(&f.mesh, &mixed_truth);
    let mixed_state =
        run(&f.mesh, &layout(), &f.basis, &mixed_data, &driver_config(5, false), Some(&mixed_truth))
            .unwrap();
    let mixed = matched_region_values(&mixed_state, &f.mesh, [0.3, 0.4, 0.35]);

    let ok = |pairs: &[(f64, f64)]| pairs.iter().all(|(got, want)| (got - want).abs() <= 0.05);
    let fmt = |pairs: &[(f64, f64)]| {
        pairs.iter().map(|(g, w)| format!("{g:.3} (true {w})")).collect::<Vec<_>>().join(", ")
    };
    let pass = ok(&uniform) && ok(&mixed);
    assert!(report(
        6,
        pass,
        &format!("uniform phantom: {}; mixed phantom: {}", fmt(&uniform), fmt(&mixed))
    ));
}

// Known-red on the 1% cap. With 16 coarse measurements, 1% multiplicative
// noise puts the coarse objective floor near 4e-4, two orders above the
// 2.5e-5 the noiseless run descends through while shrinking its initial
// oversized detection; under noise that recovery signal is submerged and
// the coarse error stays flat at ~1.37e-2 from the first region detection
// (noiseless: same 1.34e-2 start, recovers to 7.8e-3, so the 1.25x cap is
// exceeded at ~1.74x). The 5% > noiseless ordering still holds. Kept
// failing rather than raising the cap or picking a favorable noise seed.
#[test]
fn criterion_7_noise_robustness() {
    let f = fx();
    let noisy = |pct: f64| {
        add_noise(
            &f.data,
            &NoiseSpec { percent: pct / 100.0, seed: 11, mode: NoiseMode::Multiplicative },
        )
    };
    let clean = ms5();
    let s1 = run_fx(&noisy(1.0), 5, false);
    let s5 = run_fx(&noisy(5.0), 5, false);

    let regions = |s: &OptimizationState| s.map.as_ref().map(|m| m.num_regions()).unwrap_or(0);
    let (e0, e1, e5) = (coarse_l2(clean), coarse_l2(&s1), coarse_l2(&s5));
    let same_count = regions(&s1) == regions(clean);
    let pass = same_count && e1 <= 1.25 * e0 && e5 > e0;
    assert!(report(
        7,
        pass,
        &format!(
            "regions {} vs {} noiseless; L2 noiseless {e0:.3e}, 1% {e1:.3e} (cap {:.3e}), 5% {e5:.3e}",
            regions(&s1),
            regions(clean),
            1.25 * e0
        )
    ));
}

#[test]
fn criterion_8_regularization_identity() {
    // short multiscale runs on a small mesh; identical histories required bit
    // for bit between beta_c = 0 and the disabled code path
    let mesh = mesh_of(712);
    let truth = spot_truth(&mesh, [0.4, 0.4, 0.4]);
    let data = simulate(&mesh, &truth);
    let ens = generate_realizations(&RealizationParams::default(), &mesh, 300, 42).unwrap();
    let basis = build_basis(&ens, 0.99).unwrap();

    let reg = RegularizationConfig { beta_c: 0.0, sigma_l_bar: 0.2, sigma_h_bar: 0.4 };
    let mut cfg_zero = driver_config(3, false);
    cfg_zero.schedule.max_iterations = 40;
    cfg_zero.regularization = Some(reg);
    let mut cfg_off = cfg_zero.clone();
    cfg_off.regularization = None;

    let a = run(&mesh, &layout(), &basis, &data, &cfg_zero, Some(&truth)).unwrap();
    let b = run(&mesh, &layout(), &basis, &data, &cfg_off, Some(&truth)).unwrap();

    let identical = a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            x.k == y.k
                && x.scale == y.scale
                && x.j_fine.to_bits() == y.j_fine.to_bits()
                && x.j_coarse.to_bits() == y.j_coarse.to_bits()
                && x.n_xi == y.n_xi
                && x.alpha.to_bits() == y.alpha.to_bits()
        });
    let penalty = coarse_penalty(&reg, reg.sigma_l_bar, &[reg.sigma_h_bar; 5]);
    let pass = identical && penalty == 0.0;
    assert!(report(
        8,
        pass,
        &format!(
            "histories identical over {} records: {identical}; penalty at prior = {penalty:e}",
            a.history.len()
        )
    ));
}

#[test]
fn criterion_9_property_suites() {
    let t0 = Instant::now();
    let mesh = mesh_of(300);
    let n = mesh.num_elements();
    let lay = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n_max = 3;

    // partition completeness and binarize cardinality over 1000 random fields
    let mut partition_ok = true;
    let mut binarize_ok = true;
    for _ in 0..1000 {
        let fine = ConductivityField {
            values: (0..n).map(|_| rng.gen_range(0.1..0.5)).collect(),
        };
        let zeta = CoarseControls {
            sigma_low: 0.2,
            sigma_high: vec![0.4; n_max],
            sigma_th: (0..n_max).map(|_| rng.gen_range(0.05..0.95)).collect(),
        };
        let map: PartitionMap = detect_regions(&fine, &zeta, &mesh, None);
        partition_ok &= map.subset_sizes.iter().sum::<usize>() == n
            && map.assignment.iter().all(|&a| a <= n_max);
        let bin = eit_core::coarse::binarize(&fine, &zeta, &map);
        let distinct: std::collections::BTreeSet<u64> =
            bin.values.iter().map(|v| v.to_bits()).collect();
        binarize_ok &= distinct.len() <= n_max + 1;
    }

    // PCA round-trip and projection idempotence
    let ens = generate_realizations(&RealizationParams::default(), &mesh, 80, 5).unwrap();
    let basis = build_basis(&ens, 0.999).unwrap();
    let mut pca_ok = true;
    for _ in 0..20 {
        let m = basis.num_components();
        let xi = XiVector {
            coefficients: (0..m).map(|_| rng.gen_range(-1e-3..1e-3)).collect(),
            active_count: m,
        };
        let back = to_xi(&to_sigma(&xi, &basis), &basis);
        pca_ok &= xi
            .coefficients
            .iter()
            .zip(&back.coefficients)
            .all(|(a, b)| (a - b).abs() <= 1e-10);
        // projecting an already-projected field changes nothing
        let sigma = to_sigma(&xi, &basis);
        let twice = to_xi(&to_sigma(&to_xi(&sigma, &basis), &basis), &basis);
        pca_ok &= back
            .coefficients
            .iter()
            .zip(&twice.coefficients)
            .all(|(a, b)| (a - b).abs() <= 1e-10);
    }

    // charge conservation on 100 random (sigma, drive) pairs
    let mut conserve_ok = true;
    for _ in 0..100 {
        let sigma =
            ConductivityField { values: (0..n).map(|_| rng.gen_range(0.1..0.5)).collect() };
        let mut v: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mean = v.iter().sum::<f64>() / 16.0;
        for x in v.iter_mut() {
            *x -= mean;
        }
        let drive = DriveVector::new(v).unwrap();
        let u = solve_forward(&mesh, &sigma, &drive, &lay).unwrap();
        let currents = extract_currents(&u, &drive, &lay, &mesh).unwrap().currents;
        let total: f64 = currents.iter().sum();
        let scale = currents.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        conserve_ok &= total.abs() <= 1e-8 * scale;
    }

    // scale-indicator alternation pattern
    let mut indicator_ok = true;
    for n_s in [1usize, 3, 5] {
        for k in 1..=100usize {
            indicator_ok &= scale_indicator(k, n_s) == (((k - 1) / n_s) % 2) as u8;
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass =
        partition_ok && binarize_ok && pca_ok && conserve_ok && indicator_ok && secs < 600.0;
    assert!(report(
        9,
        pass,
        &format!(
            "partition {partition_ok}, binarize {binarize_ok}, pca {pca_ok}, conservation {conserve_ok}, indicator {indicator_ok}, {secs:.0}s (budget 600s)"
        )
    ));
}
