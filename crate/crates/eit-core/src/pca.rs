//! PCA control-space reduction: random near-binary realizations, basis
//! construction by the snapshot method, and the sigma <-> xi maps.
//!
//! The basis solves the eigenproblem of the small Gram matrix `X^T X`
//! (`N_r x N_r`) instead of a full SVD of the `N x N_r` snapshot matrix;
//! left singular vectors are recovered as `X v / s`. Orthogonality is plain
//! Euclidean on element coefficients.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adjoint::SigmaGradient;
use crate::forward::ConductivityField;
use crate::geometry::Mesh;

/// Values below this are clamped before any forward solve: the affine PCA map
/// can produce nonpositive conductivities.
pub const POSITIVITY_FLOOR: f64 = 1e-4;

const BASIS_MAGIC: &[u8; 8] = b"EITPCA01";

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("basis file malformed: {0}")]
    MalformedFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Generation parameters for the random spot realizations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RealizationParams {
    pub min_spots: usize,
    pub max_spots: usize,
    /// Spot radii are uniform in `(0, max_radius_frac * radius]`.
    pub max_radius_frac: f64,
    /// Background conductivity.
    pub sigma_background: f64,
    /// Spot conductivity.
    pub sigma_spot: f64,
}

impl Default for RealizationParams {
    fn default() -> Self {
        Self {
            min_spots: 1,
            max_spots: 7,
            max_radius_frac: 0.3,
            sigma_background: 0.2,
            sigma_spot: 0.4,
        }
    }
}

impl RealizationParams {
    pub fn validate(&self) -> Result<(), PcaError> {
        if self.min_spots < 1 || self.max_spots < self.min_spots {
            return Err(PcaError::InvalidParameter(format!(
                "spot count range {}..={} (at least one spot required)",
                self.min_spots, self.max_spots
            )));
        }
        if !(self.max_radius_frac > 0.0 && self.max_radius_frac <= 1.0) {
            return Err(PcaError::InvalidParameter("max_radius_frac out of (0,1]".into()));
        }
        if !(self.sigma_background > 0.0 && self.sigma_spot > 0.0) {
            return Err(PcaError::InvalidParameter("conductivities must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RealizationEnsemble {
    pub fields: Vec<ConductivityField>,
    pub seed: u64,
    pub params: RealizationParams,
}

/// Draw `count` random spot fields on `mesh`. Element values are assigned by
/// centroid membership; spot centers are uniform over the disc and overlaps
/// are allowed.
pub fn generate_realizations(
    params: &RealizationParams,
    mesh: &Mesh,
    count: usize,
    seed: u64,
) -> Result<RealizationEnsemble, PcaError> {
    params.validate()?;
    if count == 0 {
        return Err(PcaError::EmptyEnsemble);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_max = params.max_radius_frac * mesh.radius;
    let centroids: Vec<[f64; 2]> = (0..mesh.num_elements()).map(|e| mesh.centroid(e)).collect();
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let n_spots = rng.gen_range(params.min_spots..=params.max_spots);
        let mut values = vec![params.sigma_background; mesh.num_elements()];
        for _ in 0..n_spots {
            // uniform over the disc: r = R * sqrt(u)
            let rc = mesh.radius * rng.gen::<f64>().sqrt();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            let cx = rc * theta.cos();
            let cy = rc * theta.sin();
            let rs = rng.gen::<f64>() * r_max;
            let rs2 = rs * rs;
            for (e, c) in centroids.iter().enumerate() {
                let dx = c[0] - cx;
                let dy = c[1] - cy;
                if dx * dx + dy * dy <= rs2 {
                    values[e] = params.sigma_spot;
                }
            }
        }
        fields.push(ConductivityField { values });
    }
    Ok(RealizationEnsemble { fields, seed, params: params.clone() })
}

/// Orthonormal PCA basis with the ensemble mean.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `N x N_xi`, columns orthonormal, ordered by descending singular value.
    pub columns: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl PcaBasis {
    pub fn num_components(&self) -> usize {
        self.columns.ncols()
    }

    pub fn num_elements(&self) -> usize {
        self.mean.len()
    }
}

/// Reduced control vector; entries beyond `active_count` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct XiVector {
    pub coefficients: Vec<f64>,
    pub active_count: usize,
}

impl XiVector {
    pub fn zeros(n: usize) -> Self {
        Self { coefficients: vec![0.0; n], active_count: n }
    }
}

/// Snapshot-method PCA of the centered ensemble, keeping the smallest
/// component count whose cumulative energy (squared singular values) reaches
/// `energy_fraction` of the total.
pub fn build_basis(ensemble: &RealizationEnsemble, energy_fraction: f64) -> Result<PcaBasis, PcaError> {
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(PcaError::InvalidParameter(format!("energy_fraction {energy_fraction}")));
    }
    let n_r = ensemble.fields.len();
    if n_r == 0 {
        return Err(PcaError::EmptyEnsemble);
    }
    let n = ensemble.fields[0].values.len();
    let mut mean = vec![0.0; n];
    for f in &ensemble.fields {
        for (m, &v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n_r as f64;
    }
    let mut x = DMatrix::zeros(n, n_r);
    for (c, f) in ensemble.fields.iter().enumerate() {
        for r in 0..n {
            x[(r, c)] = f.values[r] - mean[r];
        }
    }
    let gram = x.transpose() * &x;
    let eig = SymmetricEigen::new(gram);
    // sort eigenpairs descending
    let mut order: Vec<usize> = (0..n_r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    if total <= 0.0 {
        return Ok(PcaBasis { mean, columns: DMatrix::zeros(n, 0), singular_values: vec![] });
    }
    let rank_tol = 1e-12 * total;
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &idx in &order {
        let lam = eig.eigenvalues[idx].max(0.0);
        if lam <= rank_tol {
            break;
        }
        kept.push(idx);
        cum += lam;
        if cum >= energy_fraction * total - 1e-12 * total {
            break;
        }
    }
    let n_xi = kept.len();
    let mut columns = DMatrix::zeros(n, n_xi);
    let mut singular_values = Vec::with_capacity(n_xi);
    for (a, &idx) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        let s = lam.sqrt();
        singular_values.push(s);
        let v = eig.eigenvectors.column(idx);
        let col = &x * DVector::from_iterator(n_r, v.iter().copied()) / s;
        columns.set_column(a, &col);
    }
    Ok(PcaBasis { mean, columns, singular_values })
}

/// `sigma = Phi xi + mean`, clamped below at [`POSITIVITY_FLOOR`].
pub fn to_sigma(xi: &XiVector, basis: &PcaBasis) -> ConductivityField {
    assert_eq!(xi.coefficients.len(), basis.num_components());
    let mut values = basis.mean.clone();
    for a in 0..xi.active_count {
        let c = xi.coefficients[a];
        if c == 0.0 {
            continue;
        }
        let col = basis.columns.column(a);
        for (v, phi) in values.iter_mut().zip(col.iter()) {
            *v += c * phi;
        }
    }
    for v in values.iter_mut() {
        if *v < POSITIVITY_FLOOR {
            *v = POSITIVITY_FLOOR;
        }
    }
    ConductivityField { values }
}

/// Least-squares coefficients `Phi^T (sigma - mean)`; with orthonormal
/// columns the transpose is the pseudo-inverse.
pub fn to_xi(sigma: &ConductivityField, basis: &PcaBasis) -> XiVector {
    assert_eq!(sigma.values.len(), basis.num_elements());
    let n_xi = basis.num_components();
    let mut coefficients = vec![0.0; n_xi];
    for a in 0..n_xi {
        let col = basis.columns.column(a);
        coefficients[a] = col
            .iter()
            .zip(sigma.values.iter().zip(&basis.mean))
            .map(|(phi, (s, m))| phi * (s - m))
            .sum();
    }
    XiVector { coefficients, active_count: n_xi }
}

/// Projection of a field onto the PCA manifold: `to_sigma(to_xi(sigma))`.
pub fn pca_project(sigma: &ConductivityField, basis: &PcaBasis) -> ConductivityField {
    to_sigma(&to_xi(sigma, basis), basis)
}

/// `grad_xi = Phi^T grad_sigma`, restricted to the first `active` components
/// (the rest are zero).
pub fn project_gradient(grad: &SigmaGradient, basis: &PcaBasis, active: usize) -> Vec<f64> {
    let n_xi = basis.num_components();
    assert!(active <= n_xi);
    let mut out = vec![0.0; n_xi];
    for a in 0..active {
        let col = basis.columns.column(a);
        out[a] = col.iter().zip(&grad.values).map(|(phi, g)| phi * g).sum();
    }
    out
}

/// Zero all components beyond `n_t`.
pub fn truncate(xi: &XiVector, n_t: usize) -> XiVector {
    assert!(n_t >= 1 && n_t <= xi.coefficients.len(), "N_t {n_t} out of range");
    let mut coefficients = xi.coefficients.clone();
    for c in coefficients.iter_mut().skip(n_t) {
        *c = 0.0;
    }
    XiVector { coefficients, active_count: n_t }
}

pub fn save_basis(basis: &PcaBasis, path: &Path) -> Result<(), PcaError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(BASIS_MAGIC)?;
    f.write_all(&(basis.num_elements() as u64).to_le_bytes())?;
    f.write_all(&(basis.num_components() as u64).to_le_bytes())?;
    for &v in &basis.mean {
        f.write_all(&v.to_le_bytes())?;
    }
    for &s in &basis.singular_values {
        f.write_all(&s.to_le_bytes())?;
    }
    for c in 0..basis.num_components() {
        for r in 0..basis.num_elements() {
            f.write_all(&basis.columns[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_basis(path: &Path) -> Result<PcaBasis, PcaError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| PcaError::MalformedFile("short file".into()))?;
    if &magic != BASIS_MAGIC {
        return Err(PcaError::MalformedFile("bad magic".into()));
    }
    let mut buf8 = [0u8; 8];
    let mut read_u64 = |f: &mut dyn std::io::Read| -> Result<u64, PcaError> {
        f.read_exact(&mut buf8).map_err(|_| PcaError::MalformedFile("truncated".into()))?;
        Ok(u64::from_le_bytes(buf8))
    };
    let n = read_u64(&mut f)? as usize;
    let n_xi = read_u64(&mut f)? as usize;
    let read_f64s = |f: &mut dyn std::io::Read, count: usize| -> Result<Vec<f64>, PcaError> {
        let mut out = vec![0.0; count];
        let mut b = [0u8; 8];
        for v in out.iter_mut() {
            f.read_exact(&mut b).map_err(|_| PcaError::MalformedFile("truncated".into()))?;
            *v = f64::from_le_bytes(b);
        }
        Ok(out)
    };
    let mean = read_f64s(&mut f, n)?;
    let singular_values = read_f64s(&mut f, n_xi)?;
    let flat = read_f64s(&mut f, n * n_xi)?;
    let columns = DMatrix::from_column_slice(n, n_xi, &flat);
    Ok(PcaBasis { mean, columns, singular_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_disc_mesh, ElectrodeLayout};

    fn mesh() -> Mesh {
        let layout = ElectrodeLayout::equispaced(16, 0.12, 0.1, 0.0).unwrap();
        build_disc_mesh(0.1, 700, &layout).unwrap()
    }

    fn small_ensemble(mesh: &Mesh) -> RealizationEnsemble {
        generate_realizations(&RealizationParams::default(), mesh, 120, 42).unwrap()
    }

    #[test]
    fn realizations_deterministic_and_binary() {
        let mesh = mesh();
        let a = small_ensemble(&mesh);
        let b = small_ensemble(&mesh);
        assert_eq!(a.fields.len(), b.fields.len());
        for (fa, fb) in a.fields.iter().zip(&b.fields) {
            assert_eq!(fa.values, fb.values);
        }
        for f in &a.fields {
            assert!(f.values.iter().all(|&v| v == 0.2 || v == 0.4));
        }
        // at least one field actually contains a spot
        assert!(a.fields.iter().any(|f| f.values.iter().any(|&v| v == 0.4)));
    }

    #[test]
    fn zero_spot_params_rejected() {
        let mesh = mesh();
        let params = RealizationParams { min_spots: 0, max_spots: 0, ..Default::default() };
        assert!(generate_realizations(&params, &mesh, 10, 1).is_err());
    }

    #[test]
    fn basis_orthonormal_and_ordered() {
        let mesh = mesh();
        let basis = build_basis(&small_ensemble(&mesh), 0.99).unwrap();
        assert!(basis.num_components() >= 2);
        for a in 0..basis.num_components() {
            for b in a..basis.num_components() {
                let dot: f64 = basis
                    .columns
                    .column(a)
                    .iter()
                    .zip(basis.columns.column(b).iter())
                    .map(|(x, y)| x * y)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "gram[{a}][{b}] = {dot}");
            }
        }
        for w in basis.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn energy_one_keeps_rank() {
        let mesh = mesh();
        let ens = small_ensemble(&mesh);
        let full = build_basis(&ens, 1.0).unwrap();
        let partial = build_basis(&ens, 0.9).unwrap();
        assert!(partial.num_components() < full.num_components());
        // rank of the centered matrix is at most N_r - 1
        assert!(full.num_components() <= ens.fields.len() - 1 + 1);
    }

    #[test]
    fn identical_fields_degenerate() {
        let mesh = mesh();
        let field = ConductivityField::constant(0.2, &mesh);
        let ens = RealizationEnsemble {
            fields: vec![field; 5],
            seed: 0,
            params: RealizationParams::default(),
        };
        let basis = build_basis(&ens, 0.99).unwrap();
        assert_eq!(basis.num_components(), 0);
        assert!(basis.mean.iter().all(|&m| (m - 0.2).abs() < 1e-15));
    }

    #[test]
    fn round_trips() {
        let mesh = mesh();
        let ens = small_ensemble(&mesh);
        let basis = build_basis(&ens, 1.0).unwrap();
        // sigma = mean at xi = 0
        let s0 = to_sigma(&XiVector::zeros(basis.num_components()), &basis);
        for (a, b) in s0.values.iter().zip(&basis.mean) {
            assert!((a - b).abs() < 1e-14);
        }
        // realization in span recovers itself
        let target = &ens.fields[3];
        let xi = to_xi(target, &basis);
        let back = to_sigma(&xi, &basis);
        let scale = target.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (a, b) in back.values.iter().zip(&target.values) {
            assert!((a - b).abs() < 1e-8 * scale);
        }
        // coefficient-space round trip
        let xi2 = to_xi(&to_sigma(&xi, &basis), &basis);
        for (a, b) in xi.coefficients.iter().zip(&xi2.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }
        // projection idempotent
        let p1 = pca_project(&ConductivityField::constant(0.3, &mesh), &basis);
        let p2 = pca_project(&p1, &basis);
        for (a, b) in p1.values.iter().zip(&p2.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn positivity_floor_applies() {
        let mesh = mesh();
        let basis = build_basis(&small_ensemble(&mesh), 0.99).unwrap();
        let mut xi = XiVector::zeros(basis.num_components());
        xi.coefficients[0] = -1e4;
        let s = to_sigma(&xi, &basis);
        assert!(s.values.iter().all(|&v| v >= POSITIVITY_FLOOR));
        assert!(s.values.iter().any(|&v| v == POSITIVITY_FLOOR));
    }

    #[test]
    fn truncation_lattice() {
        let xi = XiVector { coefficients: (1..=8).map(|i| i as f64).collect(), active_count: 8 };
        let t1 = truncate(&xi, 3);
        assert_eq!(t1.active_count, 3);
        assert_eq!(t1.coefficients, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let a = truncate(&truncate(&xi, 5), 3);
        let b = truncate(&xi, 3);
        assert_eq!(a, b);
        assert_eq!(truncate(&xi, 8).coefficients, xi.coefficients);
    }

    #[test]
    fn gradient_projection_adjointness() {
        let mesh = mesh();
        let basis = build_basis(&small_ensemble(&mesh), 0.99).unwrap();
        let n = mesh.num_elements();
        let grad = SigmaGradient {
            values: (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect(),
        };
        let n_xi = basis.num_components();
        let gxi = project_gradient(&grad, &basis, n_xi);
        let delta: Vec<f64> = (0..n_xi).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
        // <grad_xi, delta> == <grad_sigma, Phi delta>
        let lhs: f64 = gxi.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let mut phid = vec![0.0; n];
        for a in 0..n_xi {
            let col = basis.columns.column(a);
            for (p, phi) in phid.iter_mut().zip(col.iter()) {
                *p += delta[a] * phi;
            }
        }
        let rhs: f64 = phid.iter().zip(&grad.values).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-30));
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_components() {
        let mesh = mesh();
        let ens = small_ensemble(&mesh);
        let basis = build_basis(&ens, 1.0).unwrap();
        let target = &ens.fields[7];
        let xi = to_xi(target, &basis);
        let mut prev = f64::INFINITY;
        for n_t in (1..=basis.num_components()).step_by(7) {
            let rec = to_sigma(&truncate(&xi, n_t), &basis);
            let err: f64 = rec
                .values
                .iter()
                .zip(&target.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= prev + 1e-10, "error rose at N_t {n_t}");
            prev = err;
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let mesh = mesh();
        let basis = build_basis(&small_ensemble(&mesh), 0.95).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        save_basis(&basis, &path).unwrap();
        let back = load_basis(&path).unwrap();
        assert_eq!(back.mean, basis.mean);
        assert_eq!(back.singular_values, basis.singular_values);
        assert_eq!(back.columns, basis.columns);
        assert!(load_basis(&dir.path().join("missing.bin")).is_err());
        std::fs::write(dir.path().join("junk.bin"), b"notabasis").unwrap();
        assert!(load_basis(&dir.path().join("junk.bin")).is_err());
    }
}
