//! Reconstruction of near-binary 2D conductivity fields from boundary
//! electrode measurements, via multiscale adjoint-gradient optimization with
//! PCA control-space reduction.

pub mod adjoint;
pub mod coarse;
pub mod diagnostics;
pub mod driver;
pub mod forward;
pub mod geometry;
pub mod objective;
pub mod optimize;
pub mod pca;
pub mod phantoms;

pub use forward::{
    assemble_system, solve_forward, ConductivityField, CurrentVector, DriveVector, PotentialField,
    SystemOperator,
};
pub use geometry::{build_disc_mesh, coverage_fraction, ElectrodeLayout, Mesh};
