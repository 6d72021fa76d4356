//! Forward problem: assemble and solve the elliptic conductivity equation
//! with Robin electrode conditions, and extract electrode currents.
//!
//! State `u` is piecewise quadratic (P2), conductivity is piecewise constant
//! (P0). The system operator is `K(sigma) + sum_l (1/Z_l) M_l` where `K` is
//! the stiffness form and `M_l` the boundary mass on electrode arc `l`. It is
//! symmetric positive definite and factored once per conductivity; solves for
//! different drives reuse the factorization.

use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};
use thiserror::Error;

use crate::geometry::{BoundaryTag, ElectrodeLayout, Mesh};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("conductivity field invalid: {0}")]
    InvalidField(String),
    #[error("drive vector invalid: {0}")]
    InvalidDrive(String),
    #[error("layout does not match mesh tags: {0}")]
    LayoutMismatch(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("linear solve residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Residual { residual: f64, tol: f64 },
}

/// Per-element conductivity coefficients (P0), all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    pub values: Vec<f64>,
}

impl ConductivityField {
    pub fn constant(value: f64, mesh: &Mesh) -> Self {
        Self { values: vec![value; mesh.num_elements()] }
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), SolveError> {
        if self.values.len() != mesh.num_elements() {
            return Err(SolveError::InvalidField(format!(
                "field length {} != element count {}",
                self.values.len(),
                mesh.num_elements()
            )));
        }
        if let Some((i, &v)) = self.values.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(SolveError::InvalidField(format!("sigma[{i}] = {v} not positive")));
        }
        Ok(())
    }
}

/// Electrode voltages, one per electrode, summing to zero (ground condition).
#[derive(Debug, Clone, PartialEq)]
pub struct DriveVector {
    pub voltages: Vec<f64>,
}

impl DriveVector {
    pub fn new(voltages: Vec<f64>) -> Result<Self, SolveError> {
        let d = Self { voltages };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let sum: f64 = self.voltages.iter().sum();
        let scale = self.voltages.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        if sum.abs() > 1e-12 * scale.max(1.0) {
            return Err(SolveError::InvalidDrive(format!("voltages sum to {sum}, not grounded")));
        }
        Ok(())
    }
}

/// Nodal values of the electrical potential at all quadratic nodes.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub nodal_values: Vec<f64>,
}

/// Electrode currents, one per electrode.
#[derive(Debug, Clone)]
pub struct CurrentVector {
    pub currents: Vec<f64>,
}

/// 3-point Gauss rule on [0, 1], exact through degree 5.
const GAUSS_1D: [(f64, f64); 3] = [
    (0.112701665379258311, 0.277777777777777778),
    (0.5, 0.444444444444444444),
    (0.887298334620741689, 0.277777777777777778),
];

/// Edge-midpoint quadrature on the reference triangle, exact through degree 2.
const TRI_MIDPOINTS: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

/// Gradients of the six P2 shape functions at barycentric point `lam`,
/// given the (constant) barycentric gradients `grad_lam`.
fn p2_gradients(lam: [f64; 3], grad_lam: [[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let mut g = [[0.0; 2]; 6];
    for i in 0..3 {
        let c = 4.0 * lam[i] - 1.0;
        g[i] = [c * grad_lam[i][0], c * grad_lam[i][1]];
    }
    for l in 0..3 {
        let a = (l + 1) % 3;
        let b = (l + 2) % 3;
        g[3 + l] = [
            4.0 * (lam[a] * grad_lam[b][0] + lam[b] * grad_lam[a][0]),
            4.0 * (lam[a] * grad_lam[b][1] + lam[b] * grad_lam[a][1]),
        ];
    }
    g
}

/// P2 trace values on an edge at parameter `t` in [0, 1]:
/// (start vertex, end vertex, midpoint).
fn edge_trace(t: f64) -> [f64; 3] {
    [(1.0 - t) * (1.0 - 2.0 * t), t * (2.0 * t - 1.0), 4.0 * t * (1.0 - t)]
}

/// Constant barycentric gradients and the signed doubled area of an element.
pub(crate) fn barycentric_gradients(mesh: &Mesh, element: usize) -> ([[f64; 2]; 3], f64) {
    let t = mesh.triangles[element];
    let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
    let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let a = p[(i + 1) % 3];
        let b = p[(i + 2) % 3];
        g[i] = [(a[1] - b[1]) / two_a, (b[0] - a[0]) / two_a];
    }
    (g, two_a)
}

/// Element stiffness matrix for unit conductivity: `int_T grad N_a . grad N_b`.
pub(crate) fn element_stiffness(mesh: &Mesh, element: usize) -> [[f64; 6]; 6] {
    let (grad_lam, two_a) = barycentric_gradients(mesh, element);
    let w = two_a / 2.0 / 3.0;
    let mut k = [[0.0; 6]; 6];
    for lam in TRI_MIDPOINTS {
        let g = p2_gradients(lam, grad_lam);
        for a in 0..6 {
            for b in 0..6 {
                k[a][b] += w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
            }
        }
    }
    k
}

/// Factored system operator plus the boundary integral bookkeeping needed for
/// right-hand sides and current extraction.
pub struct SystemOperator {
    ldl: LdlNumeric<f64, usize>,
    matrix: CsMat<f64>,
    pub n_dofs: usize,
    /// Per electrode: sparse trace-load vector entries `(node, int_E N ds)`.
    pub electrode_load: Vec<Vec<(usize, f64)>>,
    /// Per electrode: arc length `|E_l|`.
    pub arc_lengths: Vec<f64>,
    pub impedances: Vec<f64>,
}

/// Per-electrode trace loads `(node, weight)` and arc lengths.
fn electrode_traces(mesh: &Mesh, layout: &ElectrodeLayout) -> Result<(Vec<Vec<(usize, f64)>>, Vec<f64>), SolveError> {
    let m = layout.count;
    let mut loads: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut lengths = vec![0.0; m];
    for be in &mesh.boundary_edges {
        let l = match be.tag {
            BoundaryTag::Electrode(l) => l,
            BoundaryTag::Insulated => continue,
        };
        if l >= m {
            return Err(SolveError::LayoutMismatch(format!(
                "mesh references electrode {} but layout has {}",
                l + 1,
                m
            )));
        }
        let [v0, v1] = be.vertices;
        let mid = mesh
            .edge_midpoint_node(v0, v1)
            .ok_or_else(|| SolveError::LayoutMismatch("boundary edge not part of any triangle".into()))?;
        let a = mesh.vertices[v0];
        let b = mesh.vertices[v1];
        let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        lengths[l] += len;
        let nodes = [v0, v1, mid];
        let mut w = [0.0; 3];
        for (t, wq) in GAUSS_1D {
            let n = edge_trace(t);
            for i in 0..3 {
                w[i] += wq * n[i] * len;
            }
        }
        for i in 0..3 {
            loads[l].push((nodes[i], w[i]));
        }
    }
    // merge duplicate node entries (shared vertices of adjacent edges)
    for load in &mut loads {
        load.sort_unstable_by_key(|&(n, _)| n);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(load.len());
        for &(n, w) in load.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == n => last.1 += w,
                _ => merged.push((n, w)),
            }
        }
        *load = merged;
    }
    Ok((loads, lengths))
}

/// Edge mass contributions `int_E N_a N_b ds` accumulated into the triplet set.
fn add_electrode_mass(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    scale_per_electrode: &[f64],
    triplets: &mut TriMat<f64>,
) -> Result<(), SolveError> {
    for be in &mesh.boundary_edges {
        let l = match be.tag {
            BoundaryTag::Electrode(l) => l,
            BoundaryTag::Insulated => continue,
        };
        if l >= layout.count {
            return Err(SolveError::LayoutMismatch("electrode tag out of range".into()));
        }
        let scale = scale_per_electrode[l];
        if scale == 0.0 {
            continue;
        }
        let [v0, v1] = be.vertices;
        let mid = mesh
            .edge_midpoint_node(v0, v1)
            .ok_or_else(|| SolveError::LayoutMismatch("boundary edge not part of any triangle".into()))?;
        let a = mesh.vertices[v0];
        let b = mesh.vertices[v1];
        let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let nodes = [v0, v1, mid];
        let mut mass = [[0.0; 3]; 3];
        for (t, wq) in GAUSS_1D {
            let n = edge_trace(t);
            for i in 0..3 {
                for j in 0..3 {
                    mass[i][j] += wq * n[i] * n[j] * len;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                triplets.add_triplet(nodes[i], nodes[j], scale * mass[i][j]);
            }
        }
    }
    Ok(())
}

/// How the adjoint Robin boundary term is scaled; see [`crate::adjoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum RobinVariant {
    /// Boundary coefficient `1/Z_l`, identical to the forward operator.
    /// This is the discretely adjoint-consistent choice.
    #[default]
    SigmaScaled,
    /// Boundary coefficient `sigma_e/Z_l` with the element-local conductivity,
    /// the literal reading of the adjoint boundary condition.
    Unscaled,
}

/// Assemble the sparse operator for conductivity `sigma`.
///
/// `boundary_sigma` selects the Robin scaling; forward solves always use
/// [`RobinVariant::SigmaScaled`] (coefficient `1/Z_l`).
pub fn assemble_matrix(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    boundary_sigma: RobinVariant,
) -> Result<CsMat<f64>, SolveError> {
    sigma.validate(mesh)?;
    layout.validate().map_err(|e| SolveError::LayoutMismatch(e.to_string()))?;
    let n = mesh.num_p2_nodes;
    let mut triplets = TriMat::new((n, n));
    for e in 0..mesh.num_elements() {
        let k = element_stiffness(mesh, e);
        let s = sigma.values[e];
        let nodes = mesh.p2_nodes[e];
        for a in 0..6 {
            for b in 0..6 {
                triplets.add_triplet(nodes[a], nodes[b], s * k[a][b]);
            }
        }
    }
    match boundary_sigma {
        RobinVariant::SigmaScaled => {
            let scales: Vec<f64> = layout.impedances.iter().map(|z| 1.0 / z).collect();
            add_electrode_mass(mesh, layout, &scales, &mut triplets)?;
        }
        RobinVariant::Unscaled => {
            // per-edge element conductivity: scale each edge separately
            let edge_tri = boundary_edge_elements(mesh);
            for (idx, be) in mesh.boundary_edges.iter().enumerate() {
                let l = match be.tag {
                    BoundaryTag::Electrode(l) => l,
                    BoundaryTag::Insulated => continue,
                };
                let e = edge_tri[idx];
                let scale = sigma.values[e] / layout.impedances[l];
                let [v0, v1] = be.vertices;
                let mid = mesh.edge_midpoint_node(v0, v1).unwrap();
                let a = mesh.vertices[v0];
                let b = mesh.vertices[v1];
                let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                let nodes = [v0, v1, mid];
                for (t, wq) in GAUSS_1D {
                    let nsh = edge_trace(t);
                    for i in 0..3 {
                        for j in 0..3 {
                            triplets.add_triplet(nodes[i], nodes[j], scale * wq * nsh[i] * nsh[j] * len);
                        }
                    }
                }
            }
        }
    }
    Ok(triplets.to_csr())
}

/// Element adjacent to each boundary edge, in boundary-edge order.
pub fn boundary_edge_elements(mesh: &Mesh) -> Vec<usize> {
    use std::collections::HashMap;
    let mut edge_to_tri: HashMap<(usize, usize), usize> = HashMap::new();
    for (e, tri) in mesh.triangles.iter().enumerate() {
        for l in 0..3 {
            let a = tri[l];
            let b = tri[(l + 1) % 3];
            let key = if a < b { (a, b) } else { (b, a) };
            edge_to_tri.insert(key, e); // boundary edges appear once
        }
    }
    mesh.boundary_edges
        .iter()
        .map(|be| {
            let [a, b] = be.vertices;
            let key = if a < b { (a, b) } else { (b, a) };
            edge_to_tri[&key]
        })
        .collect()
}

impl SystemOperator {
    pub fn solve_raw(&self, rhs: &[f64]) -> Result<Vec<f64>, SolveError> {
        let x = self.ldl.solve(rhs);
        // verify the residual against the assembled matrix
        let mut res = rhs.to_vec();
        for (val, (r, c)) in self.matrix.iter() {
            res[r] -= val * x[c];
        }
        let rhs_norm = rhs.iter().fold(0.0f64, |a, &b| a + b * b).sqrt();
        let res_norm = res.iter().fold(0.0f64, |a, &b| a + b * b).sqrt();
        if rhs_norm > 0.0 && res_norm > 1e-10 * rhs_norm {
            return Err(SolveError::Residual { residual: res_norm / rhs_norm, tol: 1e-10 });
        }
        Ok(x)
    }

    /// Right-hand side for a drive vector: `sum_l (U_l/Z_l) s_l`.
    pub fn drive_rhs(&self, drive: &DriveVector) -> Vec<f64> {
        let mut rhs = vec![0.0; self.n_dofs];
        for (l, load) in self.electrode_load.iter().enumerate() {
            let c = drive.voltages[l] / self.impedances[l];
            for &(node, w) in load {
                rhs[node] += c * w;
            }
        }
        rhs
    }

    pub fn solve(&self, drive: &DriveVector) -> Result<PotentialField, SolveError> {
        drive.validate()?;
        if drive.voltages.len() != self.electrode_load.len() {
            return Err(SolveError::InvalidDrive("drive length != electrode count".into()));
        }
        let rhs = self.drive_rhs(drive);
        Ok(PotentialField { nodal_values: self.solve_raw(&rhs)? })
    }

    /// Robin-form currents: `I_l = int_E (U_l - u)/Z_l ds`.
    pub fn currents(&self, u: &PotentialField, drive: &DriveVector) -> CurrentVector {
        let currents = (0..self.electrode_load.len())
            .map(|l| {
                let trace: f64 = self.electrode_load[l]
                    .iter()
                    .map(|&(node, w)| w * u.nodal_values[node])
                    .sum();
                (drive.voltages[l] * self.arc_lengths[l] - trace) / self.impedances[l]
            })
            .collect();
        CurrentVector { currents }
    }
}

/// Assemble and factor the forward operator for `sigma`.
pub fn assemble_system(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
) -> Result<SystemOperator, SolveError> {
    assemble_system_variant(mesh, sigma, layout, RobinVariant::SigmaScaled)
}

pub fn assemble_system_variant(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    variant: RobinVariant,
) -> Result<SystemOperator, SolveError> {
    let matrix = assemble_matrix(mesh, sigma, layout, variant)?;
    let ldl = Ldl::new()
        .check_symmetry(sprs::DontCheckSymmetry)
        .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
        .numeric(matrix.view())
        .map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
    let (electrode_load, arc_lengths) = electrode_traces(mesh, layout)?;
    Ok(SystemOperator {
        ldl,
        n_dofs: mesh.num_p2_nodes,
        matrix,
        electrode_load,
        arc_lengths,
        impedances: layout.impedances.clone(),
    })
}

/// One-shot forward solve.
pub fn solve_forward(
    mesh: &Mesh,
    sigma: &ConductivityField,
    drive: &DriveVector,
    layout: &ElectrodeLayout,
) -> Result<PotentialField, SolveError> {
    assemble_system(mesh, sigma, layout)?.solve(drive)
}

/// Robin-form current extraction from a solved state.
pub fn extract_currents(
    u: &PotentialField,
    drive: &DriveVector,
    layout: &ElectrodeLayout,
    mesh: &Mesh,
) -> Result<CurrentVector, SolveError> {
    let (loads, lengths) = electrode_traces(mesh, layout)?;
    let currents = (0..layout.count)
        .map(|l| {
            let trace: f64 = loads[l].iter().map(|&(node, w)| w * u.nodal_values[node]).sum();
            (drive.voltages[l] * lengths[l] - trace) / layout.impedances[l]
        })
        .collect();
    Ok(CurrentVector { currents })
}

/// Flux-form currents `int_E sigma du/dn ds`, used as an independent check
/// against the Robin form.
pub fn flux_currents(
    u: &PotentialField,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    mesh: &Mesh,
) -> CurrentVector {
    let edge_tri = boundary_edge_elements(mesh);
    let mut currents = vec![0.0; layout.count];
    for (idx, be) in mesh.boundary_edges.iter().enumerate() {
        let l = match be.tag {
            BoundaryTag::Electrode(l) => l,
            BoundaryTag::Insulated => continue,
        };
        let e = edge_tri[idx];
        let (grad_lam, _) = barycentric_gradients(mesh, e);
        let tri = mesh.triangles[e];
        let nodes = mesh.p2_nodes[e];
        let [v0, v1] = be.vertices;
        let a = mesh.vertices[v0];
        let b = mesh.vertices[v1];
        let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        // outward normal: boundary edges run counter-clockwise, so the
        // outward normal is the tangent rotated by -90 degrees
        let tx = (b[0] - a[0]) / len;
        let ty = (b[1] - a[1]) / len;
        let n = [ty, -tx];
        // local barycentric indices of the edge endpoints
        let loc0 = tri.iter().position(|&v| v == v0).unwrap();
        let loc1 = tri.iter().position(|&v| v == v1).unwrap();
        for (t, wq) in GAUSS_1D {
            let mut lam = [0.0; 3];
            lam[loc0] = 1.0 - t;
            lam[loc1] = t;
            let g = p2_gradients(lam, grad_lam);
            let mut grad_u = [0.0, 0.0];
            for i in 0..6 {
                grad_u[0] += u.nodal_values[nodes[i]] * g[i][0];
                grad_u[1] += u.nodal_values[nodes[i]] * g[i][1];
            }
            currents[l] += wq * len * sigma.values[e] * (grad_u[0] * n[0] + grad_u[1] * n[1]);
        }
    }
    CurrentVector { currents }
}
