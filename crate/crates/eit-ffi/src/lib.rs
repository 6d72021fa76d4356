//! C ABI surface for the EIT reconstruction library.
//!
//! All functions return an [`EitStatus`]; results come back through out
//! pointers to opaque handles. Handles are freed with the matching `_free`
//! function and must not be shared across threads without external locking.
//! On failure a thread-local message is retrievable with
//! [`eit_last_error_message`]. Panics are caught at the boundary and reported
//! as `EIT_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::CStr;
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::{c_char, c_double, size_t};

use eit_core::driver::{DriverConfig, OptimizationState};
use eit_core::forward::ConductivityField;
use eit_core::geometry::{build_disc_mesh, load_mesh, BoundaryTag, ElectrodeLayout, Mesh};
use eit_core::objective::{evaluate, reference_base_drive, MeasurementSet};
use eit_core::pca::{build_basis, generate_realizations, load_basis, PcaBasis, RealizationParams};

/// Result code of every API call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EitStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument was null or a scalar argument out of range.
    InvalidArgument = 1,
    /// File could not be read, written, or parsed.
    Io = 2,
    /// The computation itself failed (singular system, dimension mismatch, ...).
    Compute = 3,
    /// A panic was caught at the FFI boundary; state may be inconsistent.
    Internal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: EitStatus, msg: impl Into<String>) -> EitStatus {
    set_error(msg);
    status
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, excluding
/// the terminator. Passing a null `buf` just queries the length.
#[no_mangle]
pub extern "C" fn eit_last_error_message(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

fn guard(f: impl FnOnce() -> EitStatus) -> EitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across FFI boundary".into());
            fail(EitStatus::Internal, msg)
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, EitStatus> {
    if p.is_null() {
        return Err(fail(EitStatus::InvalidArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EitStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Opaque mesh + electrode layout.
pub struct EitMesh {
    mesh: Mesh,
    layout: ElectrodeLayout,
}

/// Opaque measurement set.
pub struct EitData {
    data: MeasurementSet,
}

/// Opaque PCA basis.
pub struct EitBasis {
    basis: PcaBasis,
}

/// Opaque inversion result.
pub struct EitSolution {
    state: OptimizationState,
}

fn layout_of(mesh: &Mesh) -> Result<ElectrodeLayout, String> {
    let m = mesh
        .boundary_edges
        .iter()
        .filter_map(|e| match e.tag {
            BoundaryTag::Electrode(l) => Some(l + 1),
            _ => None,
        })
        .max()
        .ok_or("mesh has no electrode tags")?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in &mesh.boundary_edges {
        if e.tag == BoundaryTag::Electrode(0) {
            for &v in &e.vertices {
                let ang = mesh.vertices[v][1].atan2(mesh.vertices[v][0]);
                lo = lo.min(ang);
                hi = hi.max(ang);
            }
        }
    }
    ElectrodeLayout::equispaced(m, 0.5 * (hi - lo), 0.1, 0.0).map_err(|e| e.to_string())
}

/// Build a disc mesh with `electrodes` equispaced boundary electrodes.
///
/// `half_width` is the electrode half-arc in radians, `impedance` the contact
/// impedance shared by all electrodes.
#[no_mangle]
pub extern "C" fn eit_mesh_build(
    radius: c_double,
    electrodes: size_t,
    half_width: c_double,
    impedance: c_double,
    target_elements: size_t,
    out: *mut *mut EitMesh,
) -> EitStatus {
    guard(|| {
        if out.is_null() {
            return fail(EitStatus::InvalidArgument, "null out pointer");
        }
        let layout = match ElectrodeLayout::equispaced(electrodes, half_width, impedance, 0.0) {
            Ok(l) => l,
            Err(e) => return fail(EitStatus::InvalidArgument, e.to_string()),
        };
        match build_disc_mesh(radius, target_elements, &layout) {
            Ok(mesh) => {
                unsafe { *out = Box::into_raw(Box::new(EitMesh { mesh, layout })) };
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Compute, e.to_string()),
        }
    })
}

/// Load a mesh saved by the CLI `mesh` command.
#[no_mangle]
pub unsafe extern "C" fn eit_mesh_load(path: *const c_char, out: *mut *mut EitMesh) -> EitStatus {
    guard(|| {
        if out.is_null() {
            return fail(EitStatus::InvalidArgument, "null out pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mesh = match load_mesh(std::path::Path::new(path)) {
            Ok(m) => m,
            Err(e) => return fail(EitStatus::Io, e.to_string()),
        };
        let layout = match layout_of(&mesh) {
            Ok(l) => l,
            Err(e) => return fail(EitStatus::Compute, e),
        };
        *out = Box::into_raw(Box::new(EitMesh { mesh, layout }));
        EitStatus::Ok
    })
}

/// Number of triangular elements in the mesh; 0 if `mesh` is null.
#[no_mangle]
pub extern "C" fn eit_mesh_num_elements(mesh: *const EitMesh) -> size_t {
    if mesh.is_null() {
        return 0;
    }
    unsafe { (*mesh).mesh.num_elements() }
}

#[no_mangle]
pub extern "C" fn eit_mesh_free(mesh: *mut EitMesh) {
    if !mesh.is_null() {
        drop(unsafe { Box::from_raw(mesh) });
    }
}

/// Load measurement data (CSV written by the CLI `simulate` command) using
/// the reference 16-electrode base drive with `num_rotations` rotations.
#[no_mangle]
pub unsafe extern "C" fn eit_data_load(
    path: *const c_char,
    num_rotations: size_t,
    out: *mut *mut EitData,
) -> EitStatus {
    guard(|| {
        if out.is_null() {
            return fail(EitStatus::InvalidArgument, "null out pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match MeasurementSet::read_csv(std::path::Path::new(path), reference_base_drive(), num_rotations, 1) {
            Ok(data) => {
                *out = Box::into_raw(Box::new(EitData { data }));
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Io, e.to_string()),
        }
    })
}

#[no_mangle]
pub extern "C" fn eit_data_free(data: *mut EitData) {
    if !data.is_null() {
        drop(unsafe { Box::from_raw(data) });
    }
}

/// Load a PCA basis saved by the CLI `pca-build` command.
#[no_mangle]
pub unsafe extern "C" fn eit_basis_load(path: *const c_char, out: *mut *mut EitBasis) -> EitStatus {
    guard(|| {
        if out.is_null() {
            return fail(EitStatus::InvalidArgument, "null out pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_basis(std::path::Path::new(path)) {
            Ok(basis) => {
                *out = Box::into_raw(Box::new(EitBasis { basis }));
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Io, e.to_string()),
        }
    })
}

/// Build a PCA basis from `realizations` random conductivity fields on `mesh`,
/// keeping components up to the cumulative `energy` fraction (0 < energy ≤ 1).
#[no_mangle]
pub extern "C" fn eit_basis_build(
    mesh: *const EitMesh,
    realizations: size_t,
    energy: c_double,
    seed: u64,
    out: *mut *mut EitBasis,
) -> EitStatus {
    guard(|| {
        if mesh.is_null() || out.is_null() {
            return fail(EitStatus::InvalidArgument, "null pointer");
        }
        if !(energy > 0.0 && energy <= 1.0) {
            return fail(EitStatus::InvalidArgument, "energy must be in (0, 1]");
        }
        let mesh = unsafe { &(*mesh).mesh };
        let ens = match generate_realizations(&RealizationParams::default(), mesh, realizations, seed)
        {
            Ok(e) => e,
            Err(e) => return fail(EitStatus::Compute, e.to_string()),
        };
        match build_basis(&ens, energy) {
            Ok(basis) => {
                unsafe { *out = Box::into_raw(Box::new(EitBasis { basis })) };
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Compute, e.to_string()),
        }
    })
}

/// Number of retained PCA components; 0 if `basis` is null.
#[no_mangle]
pub extern "C" fn eit_basis_num_components(basis: *const EitBasis) -> size_t {
    if basis.is_null() {
        return 0;
    }
    unsafe { (*basis).basis.num_components() }
}

#[no_mangle]
pub extern "C" fn eit_basis_free(basis: *mut EitBasis) {
    if !basis.is_null() {
        drop(unsafe { Box::from_raw(basis) });
    }
}

/// Evaluate the measurement-misfit objective for the per-element conductivity
/// in `sigma` (length `sigma_len`, which must equal the element count).
#[no_mangle]
pub extern "C" fn eit_objective_value(
    mesh: *const EitMesh,
    data: *const EitData,
    sigma: *const c_double,
    sigma_len: size_t,
    out_value: *mut c_double,
) -> EitStatus {
    guard(|| {
        if mesh.is_null() || data.is_null() || sigma.is_null() || out_value.is_null() {
            return fail(EitStatus::InvalidArgument, "null pointer");
        }
        let h = unsafe { &*mesh };
        if sigma_len != h.mesh.num_elements() {
            return fail(
                EitStatus::InvalidArgument,
                format!("sigma length {} != element count {}", sigma_len, h.mesh.num_elements()),
            );
        }
        let values = unsafe { std::slice::from_raw_parts(sigma, sigma_len) }.to_vec();
        let field = ConductivityField { values };
        match evaluate(&h.mesh, &field, &h.layout, unsafe { &(*data).data }) {
            Ok(ev) => {
                unsafe { *out_value = ev.value };
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Compute, e.to_string()),
        }
    })
}

/// Run the inversion driver. `fine_only != 0` disables the coarse scale;
/// `n_max` is the maximum number of coarse regions (ignored when fine-only).
#[no_mangle]
pub extern "C" fn eit_invert(
    mesh: *const EitMesh,
    basis: *const EitBasis,
    data: *const EitData,
    fine_only: i32,
    n_max: size_t,
    max_iterations: size_t,
    out: *mut *mut EitSolution,
) -> EitStatus {
    guard(|| {
        if mesh.is_null() || basis.is_null() || data.is_null() || out.is_null() {
            return fail(EitStatus::InvalidArgument, "null pointer");
        }
        if n_max == 0 && fine_only == 0 {
            return fail(EitStatus::InvalidArgument, "n_max must be >= 1");
        }
        let h = unsafe { &*mesh };
        let mut config = DriverConfig::default();
        config.fine_only = fine_only != 0;
        config.n_max = n_max.max(1);
        if max_iterations > 0 {
            config.schedule.max_iterations = max_iterations;
        }
        match eit_core::driver::run(
            &h.mesh,
            &h.layout,
            unsafe { &(*basis).basis },
            unsafe { &(*data).data },
            &config,
            None,
        ) {
            Ok(state) => {
                unsafe { *out = Box::into_raw(Box::new(EitSolution { state })) };
                EitStatus::Ok
            }
            Err(e) => fail(EitStatus::Compute, e.to_string()),
        }
    })
}

/// Copy the recovered fine-scale conductivity into `buf` (length `len` must
/// equal the element count).
#[no_mangle]
pub extern "C" fn eit_solution_fine_field(
    solution: *const EitSolution,
    buf: *mut c_double,
    len: size_t,
) -> EitStatus {
    guard(|| {
        if solution.is_null() || buf.is_null() {
            return fail(EitStatus::InvalidArgument, "null pointer");
        }
        let values = unsafe { &(*solution).state.sigma.values };
        if len != values.len() {
            return fail(
                EitStatus::InvalidArgument,
                format!("buffer length {} != element count {}", len, values.len()),
            );
        }
        unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), buf, len) };
        EitStatus::Ok
    })
}

/// Final objective value of the fine-scale iterate.
#[no_mangle]
pub extern "C" fn eit_solution_objective(solution: *const EitSolution) -> c_double {
    if solution.is_null() {
        return f64::NAN;
    }
    let state = unsafe { &(*solution).state };
    state
        .history
        .iter()
        .rev()
        .find(|r| r.scale == 0)
        .map(|r| r.j_fine)
        .unwrap_or(f64::NAN)
}

/// Total forward-solve-equivalent objective evaluations consumed.
#[no_mangle]
pub extern "C" fn eit_solution_evaluations(solution: *const EitSolution) -> size_t {
    if solution.is_null() {
        return 0;
    }
    unsafe { (*solution).state.evaluations }
}

#[no_mangle]
pub extern "C" fn eit_solution_free(solution: *mut EitSolution) {
    if !solution.is_null() {
        drop(unsafe { Box::from_raw(solution) });
    }
}
