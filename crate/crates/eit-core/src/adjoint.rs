//! Adjoint states and the conductivity gradient of the misfit functional.
//!
//! For the misfit `J = sum_l beta_l (I_l - I*_l)^2` the discrete adjoint of
//! the forward system `A(sigma) psi = sum_l (2 beta_l r_l / Z_l) s_l` uses the
//! same operator as the forward problem, so its factorization is reused. The
//! exact partial is then `dJ/dsigma_i = psi^T (dA/dsigma_i) u`, the stiffness
//! form restricted to element `i`.
//!
//! An alternative Robin scaling multiplies the boundary coefficient by the
//! element conductivity. That operator differs from the forward one (separate
//! factorization, gradient only approximately consistent) and is kept as an
//! opt-in variant.

use crate::forward::{
    assemble_system_variant, element_stiffness, ConductivityField, CurrentVector, PotentialField,
    RobinVariant, SolveError, SystemOperator,
};
use crate::geometry::{ElectrodeLayout, Mesh};

/// Exact partial derivatives of the objective with respect to each element
/// conductivity.
#[derive(Debug, Clone)]
pub struct SigmaGradient {
    pub values: Vec<f64>,
}

impl SigmaGradient {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn add(&mut self, other: &SigmaGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Adjoint right-hand side `sum_l (2 beta_l r_l / Z_l) s_l` where
/// `r_l = I_l - I*_l`.
pub fn adjoint_rhs(
    op: &SystemOperator,
    currents: &CurrentVector,
    targets: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    let mut rhs = vec![0.0; op.n_dofs];
    for (l, load) in op.electrode_load.iter().enumerate() {
        let r = currents.currents[l] - targets[l];
        let c = 2.0 * weights[l] * r / op.impedances[l];
        for &(node, w) in load {
            rhs[node] += c * w;
        }
    }
    rhs
}

/// Solve the adjoint system reusing the forward factorization.
pub fn solve_adjoint(
    op: &SystemOperator,
    currents: &CurrentVector,
    targets: &[f64],
    weights: &[f64],
) -> Result<PotentialField, SolveError> {
    let rhs = adjoint_rhs(op, currents, targets, weights);
    Ok(PotentialField { nodal_values: op.solve_raw(&rhs)? })
}

/// Solve the adjoint with an explicitly chosen Robin scaling. The
/// [`RobinVariant::Unscaled`] choice assembles and factors its own operator.
pub fn solve_adjoint_variant(
    mesh: &Mesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    forward_op: &SystemOperator,
    currents: &CurrentVector,
    targets: &[f64],
    weights: &[f64],
    variant: RobinVariant,
) -> Result<PotentialField, SolveError> {
    match variant {
        RobinVariant::SigmaScaled => solve_adjoint(forward_op, currents, targets, weights),
        RobinVariant::Unscaled => {
            let adj_op = assemble_system_variant(mesh, sigma, layout, RobinVariant::Unscaled)?;
            let rhs = adjoint_rhs(forward_op, currents, targets, weights);
            Ok(PotentialField { nodal_values: adj_op.solve_raw(&rhs)? })
        }
    }
}

/// Accumulate `psi^T K_i u` per element for one forward/adjoint state pair.
pub fn accumulate_gradient(
    mesh: &Mesh,
    u: &PotentialField,
    psi: &PotentialField,
    grad: &mut SigmaGradient,
) {
    for e in 0..mesh.num_elements() {
        let k = element_stiffness(mesh, e);
        let nodes = mesh.p2_nodes[e];
        let mut acc = 0.0;
        for a in 0..6 {
            let pa = psi.nodal_values[nodes[a]];
            if pa == 0.0 {
                continue;
            }
            for b in 0..6 {
                acc += pa * k[a][b] * u.nodal_values[nodes[b]];
            }
        }
        grad.values[e] += acc;
    }
}

/// Gradient from matched lists of forward and adjoint states (one per drive).
pub fn gradient_sigma(
    mesh: &Mesh,
    forward_states: &[PotentialField],
    adjoint_states: &[PotentialField],
) -> SigmaGradient {
    assert_eq!(forward_states.len(), adjoint_states.len());
    let mut grad = SigmaGradient::zeros(mesh.num_elements());
    for (u, psi) in forward_states.iter().zip(adjoint_states) {
        accumulate_gradient(mesh, u, psi, &mut grad);
    }
    grad
}
