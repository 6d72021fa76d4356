//! Measurement handling for the rotation scheme and evaluation of the misfit
//! objective plus the coarse-scale regularization term.
//!
//! A single base drive vector is reused under cyclic rotation to produce `m`
//! patterns of `m` electrode currents each. Note the rotation direction: the
//! published pattern tables rotate the base vector to the *right* (last entry
//! moves to the front), which is what `rotate_drive` implements.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::adjoint::{gradient_sigma, solve_adjoint_variant, SigmaGradient};
use crate::forward::{
    assemble_system, ConductivityField, CurrentVector, DriveVector, PotentialField, RobinVariant,
    SolveError, SystemOperator,
};
use crate::geometry::{ElectrodeLayout, Mesh};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("measurement file malformed: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Rotated drive `U^j`: right cyclic rotation of the base by `j-1` positions
/// (`j` is 1-based; `j = 1` is the identity).
pub fn rotate_drive(base: &DriveVector, j: usize) -> DriveVector {
    let m = base.voltages.len();
    assert!(j >= 1 && j <= m, "rotation index {j} out of 1..={m}");
    let voltages = (0..m).map(|i| base.voltages[(i + m - (j - 1)) % m]).collect();
    DriveVector { voltages }
}

/// Targets and weights for all drive patterns of the rotation scheme.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub base_drive: DriveVector,
    /// Rotations used per base permutation (<= m).
    pub num_rotations: usize,
    /// Number of base permutations K (the rotation scheme uses 1).
    pub num_permutations: usize,
    /// `num_drives()` rows of `m` target currents.
    pub targets: Vec<Vec<f64>>,
    /// Weights `beta^j_l >= 0`, same shape as `targets`.
    pub weights: Vec<Vec<f64>>,
}

impl MeasurementSet {
    pub fn num_drives(&self) -> usize {
        self.num_rotations * self.num_permutations
    }

    pub fn num_electrodes(&self) -> usize {
        self.base_drive.voltages.len()
    }

    /// Drive vector for row `row` (0-based across permutations).
    pub fn drive(&self, row: usize) -> DriveVector {
        let j = row % self.num_rotations + 1;
        rotate_drive(&self.base_drive, j)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let m = self.num_electrodes();
        if self.num_rotations == 0 || self.num_rotations > m {
            return Err(DataError::Malformed(format!(
                "num_rotations {} not in 1..={m}",
                self.num_rotations
            )));
        }
        if self.targets.len() != self.num_drives() || self.weights.len() != self.num_drives() {
            return Err(DataError::Malformed("row count != K * rotations".into()));
        }
        for (row, (t, w)) in self.targets.iter().zip(&self.weights).enumerate() {
            if t.len() != m || w.len() != m {
                return Err(DataError::Malformed(format!("row {row} has wrong width")));
            }
            if let Some(&bad) = w.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
                return Err(DataError::Malformed(format!("row {row}: weight {bad}")));
            }
        }
        Ok(())
    }

    /// Copy with all weights beyond the first rotation of each permutation
    /// zeroed; the coarse phase fits only the unrotated pattern.
    pub fn first_rotation_only(&self) -> MeasurementSet {
        let mut out = self.clone();
        for (row, w) in out.weights.iter_mut().enumerate() {
            if row % out.num_rotations != 0 {
                w.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "j,l,target,weight")?;
        for (row, (t, w)) in self.targets.iter().zip(&self.weights).enumerate() {
            for l in 0..self.num_electrodes() {
                writeln!(f, "{},{},{:.17e},{:.17e}", row + 1, l + 1, t[l], w[l])?;
            }
        }
        Ok(())
    }

    /// Read targets/weights from CSV; drives are reconstructed from
    /// `base_drive` and the rotation rule, not stored in the file.
    pub fn read_csv(
        path: &Path,
        base_drive: DriveVector,
        num_rotations: usize,
        num_permutations: usize,
    ) -> Result<MeasurementSet, DataError> {
        let m = base_drive.voltages.len();
        let rows = num_rotations * num_permutations;
        let mut targets = vec![vec![f64::NAN; m]; rows];
        let mut weights = vec![vec![f64::NAN; m]; rows];
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| DataError::Malformed("empty file".into()))??;
        if header.trim() != "j,l,target,weight" {
            return Err(DataError::Malformed(format!("bad header: {header}")));
        }
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != 4 {
                return Err(DataError::Malformed(format!("line {}: {line}", ln + 2)));
            }
            let j: usize = parts[0].parse().map_err(|e| DataError::Malformed(format!("line {}: {e}", ln + 2)))?;
            let l: usize = parts[1].parse().map_err(|e| DataError::Malformed(format!("line {}: {e}", ln + 2)))?;
            let t: f64 = parts[2].parse().map_err(|e| DataError::Malformed(format!("line {}: {e}", ln + 2)))?;
            let w: f64 = parts[3].parse().map_err(|e| DataError::Malformed(format!("line {}: {e}", ln + 2)))?;
            if j == 0 || j > rows || l == 0 || l > m {
                return Err(DataError::Malformed(format!("line {}: indices out of range", ln + 2)));
            }
            targets[j - 1][l - 1] = t;
            weights[j - 1][l - 1] = w;
        }
        if targets.iter().flatten().any(|v| v.is_nan()) {
            return Err(DataError::Malformed("missing (j,l) entries".into()));
        }
        let set = MeasurementSet { base_drive, num_rotations, num_permutations, targets, weights };
        set.validate()?;
        Ok(set)
    }
}

/// One objective evaluation with everything needed to fund the adjoint pass.
pub struct Evaluation {
    pub value: f64,
    pub operator: SystemOperator,
    /// Forward states for rows with nonzero weight; `None` for skipped rows.
    pub states: Vec<Option<PotentialField>>,
    pub currents: Vec<Option<CurrentVector>>,
}

/// Evaluate `J(sigma) = sum_j sum_l beta^j_l (I^j_l - I*^j_l)^2`.
///
/// Rows whose weights are all zero are skipped entirely (no forward solve).
pub fn evaluate(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    data: &MeasurementSet,
) -> Result<Evaluation, DataError> {
    data.validate()?;
    let op = assemble_system(mesh, sigma, layout)?;
    let mut value = 0.0;
    let mut states = Vec::with_capacity(data.num_drives());
    let mut currents = Vec::with_capacity(data.num_drives());
    for row in 0..data.num_drives() {
        if data.weights[row].iter().all(|&w| w == 0.0) {
            states.push(None);
            currents.push(None);
            continue;
        }
        let drive = data.drive(row);
        let u = op.solve(&drive)?;
        let i = op.currents(&u, &drive);
        for l in 0..data.num_electrodes() {
            let r = i.currents[l] - data.targets[row][l];
            value += data.weights[row][l] * r * r;
        }
        states.push(Some(u));
        currents.push(Some(i));
    }
    Ok(Evaluation { value, operator: op, states, currents })
}

/// Misfit gradient with respect to element conductivities, from a completed
/// evaluation. One adjoint solve per active row, reusing the forward
/// factorization for the default Robin variant.
pub fn misfit_gradient(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    data: &MeasurementSet,
    eval: &Evaluation,
    variant: RobinVariant,
) -> Result<SigmaGradient, DataError> {
    let mut grad = SigmaGradient::zeros(mesh.num_elements());
    for row in 0..data.num_drives() {
        let (Some(u), Some(i)) = (&eval.states[row], &eval.currents[row]) else {
            continue;
        };
        let psi = solve_adjoint_variant(
            mesh,
            sigma,
            layout,
            &eval.operator,
            i,
            &data.targets[row],
            &data.weights[row],
            variant,
        )?;
        let g = gradient_sigma(mesh, std::slice::from_ref(u), &[psi]);
        grad.add(&g);
    }
    Ok(grad)
}

/// Weight and priors of the coarse-control penalization term.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RegularizationConfig {
    pub beta_c: f64,
    pub sigma_l_bar: f64,
    pub sigma_h_bar: f64,
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.beta_c >= 0.0) {
            return Err(DataError::Malformed(format!("beta_c {}", self.beta_c)));
        }
        if !(self.sigma_l_bar < self.sigma_h_bar) {
            return Err(DataError::Malformed("sigma_l_bar must be < sigma_h_bar".into()));
        }
        Ok(())
    }
}

/// Penalty `(sigma_low - sigma_l_bar)^2 + sum_n (sigma_high_n - sigma_h_bar)^2`
/// (without the `beta_c` factor).
pub fn coarse_penalty(cfg: &RegularizationConfig, sigma_low: f64, sigma_highs: &[f64]) -> f64 {
    let mut p = (sigma_low - cfg.sigma_l_bar).powi(2);
    for &h in sigma_highs {
        p += (h - cfg.sigma_h_bar).powi(2);
    }
    p
}

/// `J + chi_c * beta_c * penalty`. With `chi_c = false` or `beta_c = 0` this
/// returns `j` untouched (bit-identical; no penalty arithmetic occurs).
pub fn evaluate_regularized(
    j: f64,
    sigma_low: f64,
    sigma_highs: &[f64],
    cfg: &RegularizationConfig,
    chi_c: bool,
) -> f64 {
    if !chi_c || cfg.beta_c == 0.0 {
        return j;
    }
    j + cfg.beta_c * coarse_penalty(cfg, sigma_low, sigma_highs)
}

/// Add the penalty gradient to the first `1 + sigma_highs.len()` components of
/// a coarse gradient (value components only; thresholds untouched).
pub fn augment_coarse_gradient(
    grad: &mut [f64],
    sigma_low: f64,
    sigma_highs: &[f64],
    cfg: &RegularizationConfig,
) {
    if cfg.beta_c == 0.0 {
        return;
    }
    grad[0] += 2.0 * cfg.beta_c * (sigma_low - cfg.sigma_l_bar);
    for (n, &h) in sigma_highs.iter().enumerate() {
        grad[1 + n] += 2.0 * cfg.beta_c * (h - cfg.sigma_h_bar);
    }
}

/// The paper's 16-electrode base drive pattern.
pub fn reference_base_drive() -> DriveVector {
    DriveVector::new(vec![
        -3.0, 1.0, 2.0, -5.0, 4.0, -1.0, -3.0, 2.0, 4.0, 3.0, -3.0, 3.0, 2.0, -4.0, 1.0, -3.0,
    ])
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_disc_mesh;

    fn layout() -> ElectrodeLayout {
        ElectrodeLayout::equispaced(16, 0.12, 0.1, 0.0).unwrap()
    }

    #[test]
    fn rotation_matches_published_patterns() {
        let base = reference_base_drive();
        assert_eq!(rotate_drive(&base, 1).voltages, base.voltages);
        let u2 = rotate_drive(&base, 2);
        assert_eq!(
            u2.voltages,
            vec![-3.0, -3.0, 1.0, 2.0, -5.0, 4.0, -1.0, -3.0, 2.0, 4.0, 3.0, -3.0, 3.0, 2.0, -4.0, 1.0]
        );
    }

    #[test]
    fn full_rotation_cycle_is_identity() {
        let base = reference_base_drive();
        let mut v = base.clone();
        for _ in 0..16 {
            v = rotate_drive(&v, 2);
        }
        assert_eq!(v.voltages, base.voltages);
        for j in 1..=16 {
            let s: f64 = rotate_drive(&base, j).voltages.iter().sum();
            assert_eq!(s, 0.0);
        }
    }

    fn synth_data(mesh: &Mesh, sigma: &ConductivityField) -> MeasurementSet {
        let base = reference_base_drive();
        let op = assemble_system(mesh, sigma, &layout()).unwrap();
        let mut targets = Vec::new();
        for j in 1..=16 {
            let d = rotate_drive(&base, j);
            let u = op.solve(&d).unwrap();
            targets.push(op.currents(&u, &d).currents);
        }
        MeasurementSet {
            base_drive: base,
            num_rotations: 16,
            num_permutations: 1,
            targets,
            weights: vec![vec![1.0; 16]; 16],
        }
    }

    #[test]
    fn self_consistent_data_gives_zero_misfit() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let sigma = ConductivityField::constant(0.3, &mesh);
        let data = synth_data(&mesh, &sigma);
        let eval = evaluate(&mesh, &sigma, &layout(), &data).unwrap();
        let scale: f64 = data.targets.iter().flatten().map(|t| t * t).sum();
        assert!(eval.value <= 1e-20 * scale, "J = {} scale {scale}", eval.value);
    }

    #[test]
    fn zero_weights_zero_objective_and_no_solves() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let sigma = ConductivityField::constant(0.3, &mesh);
        let mut data = synth_data(&mesh, &sigma);
        for w in data.weights.iter_mut() {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        let eval = evaluate(&mesh, &sigma, &layout(), &data).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.states.iter().all(|s| s.is_none()));
    }

    #[test]
    fn monotone_in_weights() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let truth = ConductivityField::constant(0.35, &mesh);
        let data = synth_data(&mesh, &truth);
        let sigma = ConductivityField::constant(0.3, &mesh);
        let j1 = evaluate(&mesh, &sigma, &layout(), &data).unwrap().value;
        let mut data2 = data.clone();
        data2.weights[3][7] = 2.0;
        let j2 = evaluate(&mesh, &sigma, &layout(), &data2).unwrap().value;
        assert!(j2 >= j1);
    }

    #[test]
    fn coarse_mask_keeps_only_first_rotation() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let sigma = ConductivityField::constant(0.3, &mesh);
        let data = synth_data(&mesh, &sigma).first_rotation_only();
        for (row, w) in data.weights.iter().enumerate() {
            if row == 0 {
                assert!(w.iter().all(|&x| x == 1.0));
            } else {
                assert!(w.iter().all(|&x| x == 0.0));
            }
        }
        let eval = evaluate(&mesh, &sigma, &layout(), &data).unwrap();
        assert_eq!(eval.states.iter().filter(|s| s.is_some()).count(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let sigma = ConductivityField::constant(0.3, &mesh);
        let data = synth_data(&mesh, &sigma);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meas.csv");
        data.write_csv(&path).unwrap();
        let back = MeasurementSet::read_csv(&path, data.base_drive.clone(), 16, 1).unwrap();
        assert_eq!(back.targets, data.targets);
        assert_eq!(back.weights, data.weights);
    }

    #[test]
    fn regularization_arithmetic() {
        let cfg = RegularizationConfig { beta_c: 1.0, sigma_l_bar: 0.2, sigma_h_bar: 0.4 };
        cfg.validate().unwrap();
        let j = 5.0;
        // N_max = 1, sigma_low = 0.3, sigma_high = 0.3: penalty = 0.1^2 + 0.1^2
        let r = evaluate_regularized(j, 0.3, &[0.3], &cfg, true);
        assert!((r - (j + 0.02)).abs() < 1e-15);
        assert_eq!(evaluate_regularized(j, 0.3, &[0.3], &cfg, false), j);
        let cfg0 = RegularizationConfig { beta_c: 0.0, ..cfg };
        assert_eq!(evaluate_regularized(j, 0.3, &[0.3], &cfg0, true), j);
        // penalty exactly zero at the prior values
        assert_eq!(evaluate_regularized(j, 0.2, &[0.4, 0.4], &cfg, true), j);

        let mut g = vec![0.0; 4];
        augment_coarse_gradient(&mut g, 0.3, &[0.3], &cfg);
        assert!((g[0] - 0.2).abs() < 1e-15);
        assert!((g[1] + 0.2).abs() < 1e-15);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        let mut g0 = vec![1.0; 4];
        augment_coarse_gradient(&mut g0, 0.3, &[0.3], &cfg0);
        assert_eq!(g0, vec![1.0; 4]);
    }

    #[test]
    fn misfit_gradient_smoke() {
        let mesh = build_disc_mesh(0.1, 700, &layout()).unwrap();
        let truth = ConductivityField::constant(0.35, &mesh);
        let data = synth_data(&mesh, &truth);
        let sigma = ConductivityField::constant(0.3, &mesh);
        let eval = evaluate(&mesh, &sigma, &layout(), &data).unwrap();
        assert!(eval.value > 0.0);
        let g = misfit_gradient(&mesh, &sigma, &layout(), &data, &eval, RobinVariant::SigmaScaled)
            .unwrap();
        // uniform sigma below a uniform truth: every partial should push up
        let neg = g.values.iter().filter(|&&v| v < 0.0).count();
        assert_eq!(neg, g.values.len());
    }
}
