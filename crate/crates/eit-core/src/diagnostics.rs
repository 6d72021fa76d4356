//! Gradient verification by the kappa ratio test and solution-quality
//! metrics.
//!
//! `kappa(eps) = [J(x + eps d) - J(x)] / (eps <grad J, d>)` should plateau at
//! 1 over many decades of `eps` when the gradient is consistent with the
//! objective; deviations at small `eps` are roundoff, at large `eps`
//! nonlinearity.

use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::forward::ConductivityField;
use crate::geometry::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaMode {
    /// One random direction, swept over an epsilon grid.
    Cheap,
    /// Unit-coordinate perturbations, one kappa per component at fixed
    /// epsilon.
    Expensive,
}

#[derive(Debug, Clone)]
pub struct KappaReport {
    pub mode: KappaMode,
    /// Cheap: the epsilon grid. Expensive: component indices as f64.
    pub abscissae: Vec<f64>,
    /// `None` marks an undefined ratio (zero denominator).
    pub kappa_values: Vec<Option<f64>>,
}

impl KappaReport {
    pub fn log_deviation(&self) -> Vec<Option<f64>> {
        self.kappa_values
            .iter()
            .map(|k| k.map(|k| (k - 1.0).abs().max(f64::MIN_POSITIVE).log10()))
            .collect()
    }

    /// Longest run of consecutive grid points with `|kappa - 1| <= tol`,
    /// returned as (start index, length).
    pub fn plateau(&self, tol: f64) -> (usize, usize) {
        let mut best = (0, 0);
        let mut start = 0;
        let mut len = 0;
        for (i, k) in self.kappa_values.iter().enumerate() {
            match k {
                Some(k) if (k - 1.0).abs() <= tol => {
                    if len == 0 {
                        start = i;
                    }
                    len += 1;
                    if len > best.1 {
                        best = (start, len);
                    }
                }
                _ => len = 0,
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match self.mode {
            KappaMode::Cheap => {
                writeln!(f, "epsilon,kappa,log10_abs_dev")?;
                let devs = self.log_deviation();
                for ((e, k), d) in self.abscissae.iter().zip(&self.kappa_values).zip(&devs) {
                    match (k, d) {
                        (Some(k), Some(d)) => writeln!(f, "{e:e},{k:.17e},{d:.6}")?,
                        _ => writeln!(f, "{e:e},nan,nan")?,
                    }
                }
            }
            KappaMode::Expensive => {
                writeln!(f, "component,kappa")?;
                for (c, k) in self.abscissae.iter().zip(&self.kappa_values) {
                    match k {
                        Some(k) => writeln!(f, "{},{k:.17e}", *c as usize)?,
                        None => writeln!(f, "{},nan", *c as usize)?,
                    }
                }
            }
        }
        Ok(())
    }
}

/// Default epsilon grid: 1e-12 to 1e-1, one point per third of a decade.
pub fn default_eps_grid() -> Vec<f64> {
    let mut grid = Vec::new();
    let mut e = -12.0;
    while e <= -1.0 + 1e-9 {
        grid.push(10f64.powf(e));
        e += 1.0 / 3.0;
    }
    grid
}

/// Seeded unit-norm standard-normal direction.
pub fn random_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(normal)).collect();
    let norm = d.iter().fold(0.0f64, |a, &b| a + b * b).sqrt();
    for v in d.iter_mut() {
        *v /= norm;
    }
    d
}

/// Kappa sweep along one direction over an epsilon grid. `j0` and `grad` are
/// the objective and gradient at `point`; each grid entry costs one objective
/// evaluation.
pub fn kappa_cheap(
    mut objective: impl FnMut(&[f64]) -> f64,
    j0: f64,
    grad: &[f64],
    point: &[f64],
    direction: &[f64],
    eps_grid: &[f64],
) -> KappaReport {
    let slope: f64 = grad.iter().zip(direction).map(|(g, d)| g * d).sum();
    let mut kappa_values = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if slope == 0.0 {
            kappa_values.push(None);
            continue;
        }
        let x: Vec<f64> = point.iter().zip(direction).map(|(p, d)| p + eps * d).collect();
        let je = objective(&x);
        kappa_values.push(Some((je - j0) / (eps * slope)));
    }
    KappaReport { mode: KappaMode::Cheap, abscissae: eps_grid.to_vec(), kappa_values }
}

/// Per-component kappa at fixed epsilon with unit-coordinate perturbations.
pub fn kappa_expensive(
    mut objective: impl FnMut(&[f64]) -> f64,
    j0: f64,
    grad: &[f64],
    point: &[f64],
    epsilon: f64,
) -> KappaReport {
    let n = point.len();
    let mut kappa_values = Vec::with_capacity(n);
    let mut x = point.to_vec();
    for i in 0..n {
        if grad[i] == 0.0 {
            let je = {
                x[i] = point[i] + epsilon;
                let v = objective(&x);
                x[i] = point[i];
                v
            };
            // zero gradient with nonzero difference is undefined, with zero
            // difference it is vacuously fine but still unreportable
            let _ = je;
            kappa_values.push(None);
            continue;
        }
        x[i] = point[i] + epsilon;
        let je = objective(&x);
        x[i] = point[i];
        kappa_values.push(Some((je - j0) / (epsilon * grad[i])));
    }
    KappaReport {
        mode: KappaMode::Expensive,
        abscissae: (1..=n).map(|i| i as f64).collect(),
        kappa_values,
    }
}

/// `sqrt(sum_i (sigma_i - truth_i)^2 * area_i)`, the discrete L2 distance.
pub fn l2_error(field: &ConductivityField, truth: &ConductivityField, mesh: &Mesh) -> f64 {
    assert_eq!(field.values.len(), mesh.num_elements());
    assert_eq!(truth.values.len(), mesh.num_elements());
    field
        .values
        .iter()
        .zip(&truth.values)
        .zip(&mesh.element_areas)
        .map(|((a, b), da)| (a - b) * (a - b) * da)
        .sum::<f64>()
        .sqrt()
}
