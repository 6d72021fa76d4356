//! Command-line driver: mesh generation, phantom construction, PCA basis
//! building, data simulation, inversion, and gradient diagnostics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eit_core::diagnostics::{
    default_eps_grid, kappa_cheap, kappa_expensive, l2_error, random_direction,
};
use eit_core::driver::{self, DriverConfig, SwitchSchedule};
use eit_core::forward::{ConductivityField, RobinVariant};
use eit_core::geometry::{build_disc_mesh, coverage_fraction, load_mesh, save_mesh, ElectrodeLayout, Mesh};
use eit_core::objective::{
    evaluate, misfit_gradient, reference_base_drive, MeasurementSet, RegularizationConfig,
};
use eit_core::pca::{
    build_basis, generate_realizations, load_basis, project_gradient, save_basis, to_sigma, to_xi,
    truncate, PcaBasis, RealizationParams, XiVector,
};
use eit_core::phantoms::{
    add_noise, export_field_csv, export_field_pgm, import_raster, make_circles_phantom,
    reference_three_spot_phantom, simulate_data, CirclesPhantom, NoiseMode, NoiseSpec,
};

#[derive(Parser)]
#[command(name = "eit", version, about = "Multiscale PCA-reduced EIT inversion")]
struct Cli {
    /// Cap on worker threads. The numerical kernels currently run on a
    /// single thread, so any value >= 1 is accepted and recorded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct MeshArgs {
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    #[arg(long, default_value_t = 16)]
    electrodes: usize,
    /// Electrode half-width in radians.
    #[arg(long, default_value_t = 0.12)]
    half_width: f64,
    #[arg(long, default_value_t = 0.1)]
    impedance: f64,
    #[arg(long, default_value_t = 7726)]
    target_elements: usize,
}

impl MeshArgs {
    fn layout(&self) -> Result<ElectrodeLayout, CliError> {
        ElectrodeLayout::equispaced(self.electrodes, self.half_width, self.impedance, 0.0)
            .map_err(|e| CliError::Runtime(e.to_string()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a disc mesh with boundary electrodes.
    Mesh {
        #[command(flatten)]
        geom: MeshArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paint a phantom onto a mesh and export it.
    Phantom {
        #[arg(long)]
        mesh: PathBuf,
        /// JSON circles spec; defaults to the built-in three-spot phantom.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Binary raster (PGM + .extent sidecar) instead of circles.
        #[arg(long, conflicts_with = "spec")]
        raster: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        low: f64,
        #[arg(long, default_value_t = 0.4)]
        high: f64,
        /// Output stem; writes <out>.csv and <out>.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a PCA basis from random realizations.
    PcaBuild {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 1000)]
        realizations: usize,
        #[arg(long, default_value_t = 0.99)]
        energy: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate measurement data for a phantom.
    Simulate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, conflicts_with = "spec")]
        raster: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        noise_pct: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the multiscale inversion.
    Invert {
        /// JSON run configuration; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        fine_only: bool,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        alpha_max: Option<f64>,
        #[arg(long)]
        beta_c: Option<f64>,
        /// Threshold finite-difference step in the normalized coordinate.
        #[arg(long)]
        delta_zeta: Option<f64>,
        /// Write the final element-to-region partition as partition.csv.
        #[arg(long)]
        dump_partition: bool,
        /// Phantom spec used only to report L2 errors against the truth.
        #[arg(long)]
        truth_spec: Option<PathBuf>,
    },
    /// Gradient verification reports.
    Kappa {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["cheap", "expensive"], default_value = "cheap")]
        mode: String,
        #[arg(long, value_parser = ["sigma", "xi"], default_value = "sigma")]
        space: String,
        /// Adjoint boundary-term variant: exact discrete adjoint or the
        /// sigma-free (continuous-form) coefficient.
        #[arg(long, value_parser = ["sigma-scaled", "unscaled"], default_value = "sigma-scaled")]
        variant: String,
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Restrict the xi space to its leading components.
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        sigma0: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    eit_core::geometry::GeometryError,
    eit_core::forward::SolveError,
    eit_core::objective::DataError,
    eit_core::pca::PcaError,
    eit_core::phantoms::PhantomError,
    eit_core::driver::DriverError,
    std::io::Error
);

/// JSON run configuration for `invert`; unknown keys are rejected.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    mesh: Option<PathBuf>,
    basis: Option<PathBuf>,
    data: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    n_s: usize,
    n_max: usize,
    alpha_max: f64,
    eps_f: f64,
    eps_c: f64,
    delta_zeta: f64,
    max_iterations: usize,
    max_objective_evaluations: usize,
    beta_c: f64,
    sigma_l_bar: f64,
    sigma_h_bar: f64,
    sigma0: f64,
    fine_only: bool,
    tuned_pca: bool,
    /// "sigma-scaled" (default) or "unscaled".
    robin_variant: String,
    num_rotations: usize,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            mesh: None,
            basis: None,
            data: None,
            output_dir: None,
            n_s: 5,
            n_max: 5,
            alpha_max: 1.0,
            eps_f: 1e-9,
            eps_c: 0.0,
            delta_zeta: 1e-2,
            max_iterations: 2000,
            max_objective_evaluations: 100_000,
            beta_c: 0.0,
            sigma_l_bar: 0.2,
            sigma_h_bar: 0.4,
            sigma0: 0.3,
            fine_only: false,
            tuned_pca: true,
            robin_variant: "sigma-scaled".into(),
            num_rotations: 16,
        }
    }
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    artifact_version: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

/// Atomic write (tmp + rename) so a crash never leaves a torn manifest.
fn write_manifest_at(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest).unwrap())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    write_manifest_at(&dir.join("manifest.json"), manifest)
}

/// Manifest next to a single-file output: `<out>.manifest.json`.
fn write_sidecar_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: std::time::Instant,
) -> Result<(), CliError> {
    let path = PathBuf::from(format!("{}.manifest.json", out.display()));
    write_manifest_at(
        &path,
        &RunManifest {
            command: command.into(),
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            inputs,
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn load_phantom_field(
    mesh: &Mesh,
    spec: &Option<PathBuf>,
    raster: &Option<PathBuf>,
    low: f64,
    high: f64,
) -> Result<ConductivityField, CliError> {
    if let Some(r) = raster {
        return Ok(import_raster(r, mesh, low, high)?);
    }
    let circles: CirclesPhantom = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Config(format!("phantom spec {}: {e}", p.display())))?,
        None => reference_three_spot_phantom(mesh.radius, [0.4, 0.4, 0.4]),
    };
    Ok(make_circles_phantom(&circles, mesh)?)
}

fn out_root() -> PathBuf {
    std::env::var_os("EIT_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    match cli.command {
        Command::Mesh { geom, out } => {
            let started = std::time::Instant::now();
            let layout = geom.layout()?;
            let mesh = build_disc_mesh(geom.radius, geom.target_elements, &layout)?;
            save_mesh(&mesh, &out)?;
            println!(
                "mesh: {} elements, {} vertices, {} boundary edges, coverage {:.1}%",
                mesh.num_elements(),
                mesh.num_vertices(),
                mesh.boundary_edges.len(),
                100.0 * coverage_fraction(&layout)
            );
            write_sidecar_manifest(
                &out,
                "mesh",
                serde_json::json!({
                    "radius": geom.radius,
                    "electrodes": geom.electrodes,
                    "half_width": geom.half_width,
                    "impedance": geom.impedance,
                    "target_elements": geom.target_elements,
                }),
                vec![],
                vec![],
                vec![out.display().to_string()],
                started,
            )?;
            Ok(())
        }
        Command::Phantom { mesh, spec, raster, low, high, out } => {
            let started = std::time::Instant::now();
            let mesh_loaded = load_mesh(&mesh)?;
            let field = load_phantom_field(&mesh_loaded, &spec, &raster, low, high)?;
            export_field_csv(&field, &mesh_loaded, &out.with_extension("csv"))?;
            export_field_pgm(&field, &mesh_loaded, &out.with_extension("pgm"), 256)?;
            println!("phantom: {} elements written", field.values.len());
            let mut inputs = vec![mesh.display().to_string()];
            inputs.extend(spec.iter().chain(raster.iter()).map(|p| p.display().to_string()));
            write_sidecar_manifest(
                &out,
                "phantom",
                serde_json::json!({ "low": low, "high": high }),
                vec![],
                inputs,
                vec![
                    out.with_extension("csv").display().to_string(),
                    out.with_extension("pgm").display().to_string(),
                ],
                started,
            )?;
            Ok(())
        }
        Command::PcaBuild { mesh, realizations, energy, seed, out } => {
            let started = std::time::Instant::now();
            let mesh_loaded = load_mesh(&mesh)?;
            let ens =
                generate_realizations(&RealizationParams::default(), &mesh_loaded, realizations, seed)?;
            let basis = build_basis(&ens, energy)?;
            save_basis(&basis, &out)?;
            println!(
                "basis: {} components from {} realizations at {:.0}% energy",
                basis.num_components(),
                realizations,
                100.0 * energy
            );
            write_sidecar_manifest(
                &out,
                "pca-build",
                serde_json::json!({ "realizations": realizations, "energy": energy }),
                vec![seed],
                vec![mesh.display().to_string()],
                vec![out.display().to_string()],
                started,
            )?;
            Ok(())
        }
        Command::Simulate { mesh, spec, raster, noise_pct, seed, out } => {
            let started = std::time::Instant::now();
            let mesh_loaded = load_mesh(&mesh)?;
            let layout = layout_from_mesh(&mesh_loaded)?;
            let field = load_phantom_field(&mesh_loaded, &spec, &raster, 0.2, 0.4)?;
            let base = reference_base_drive();
            let clean = simulate_data(&field, &mesh_loaded, &layout, &base, base.voltages.len(), 1)?;
            let data = add_noise(
                &clean,
                &NoiseSpec { percent: noise_pct / 100.0, seed, mode: NoiseMode::Multiplicative },
            );
            data.write_csv(&out)?;
            println!(
                "data: {} rows x {} electrodes, noise {noise_pct}%",
                data.num_drives(),
                data.num_electrodes()
            );
            let mut inputs = vec![mesh.display().to_string()];
            inputs.extend(spec.iter().chain(raster.iter()).map(|p| p.display().to_string()));
            write_sidecar_manifest(
                &out,
                "simulate",
                serde_json::json!({ "noise_pct": noise_pct }),
                vec![seed],
                inputs,
                vec![out.display().to_string()],
                started,
            )?;
            Ok(())
        }
        Command::Invert {
            config,
            mesh,
            basis,
            data,
            out_dir,
            fine_only,
            n_max,
            alpha_max,
            beta_c,
            delta_zeta,
            dump_partition,
            truth_spec,
        } => {
            let started = std::time::Instant::now();
            let mut cfg: RunConfigFile = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                None => Default::default(),
            };
            if let Some(m) = mesh {
                cfg.mesh = Some(m);
            }
            if let Some(b) = basis {
                cfg.basis = Some(b);
            }
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(o) = out_dir {
                cfg.output_dir = Some(o);
            }
            if fine_only {
                cfg.fine_only = true;
            }
            if let Some(n) = n_max {
                cfg.n_max = n;
            }
            if let Some(a) = alpha_max {
                cfg.alpha_max = a;
            }
            if let Some(b) = beta_c {
                cfg.beta_c = b;
            }
            if let Some(d) = delta_zeta {
                cfg.delta_zeta = d;
            }
            let mesh_path = cfg.mesh.clone().ok_or(CliError::Config("mesh path missing".into()))?;
            let basis_path =
                cfg.basis.clone().ok_or(CliError::Config("basis path missing".into()))?;
            let data_path = cfg.data.clone().ok_or(CliError::Config("data path missing".into()))?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| out_root().join("run"));
            std::fs::create_dir_all(&dir)?;

            let mesh = load_mesh(&mesh_path)?;
            let layout = layout_from_mesh(&mesh)?;
            let basis = load_basis(&basis_path)?;
            let base = reference_base_drive();
            let data_set =
                MeasurementSet::read_csv(&data_path, base.clone(), cfg.num_rotations, 1)?;
            let truth = match &truth_spec {
                Some(p) => Some(load_phantom_field(&mesh, &Some(p.clone()), &None, 0.2, 0.4)?),
                None => None,
            };

            let robin_variant = match cfg.robin_variant.as_str() {
                "sigma-scaled" => RobinVariant::SigmaScaled,
                "unscaled" => RobinVariant::Unscaled,
                other => return Err(CliError::Config(format!("robin_variant {other}"))),
            };
            let driver_cfg = DriverConfig {
                schedule: SwitchSchedule {
                    n_s: cfg.n_s,
                    eps_f: cfg.eps_f,
                    eps_c: cfg.eps_c,
                    max_iterations: cfg.max_iterations,
                    max_objective_evaluations: cfg.max_objective_evaluations,
                    alpha_max: cfg.alpha_max,
                },
                n_max: cfg.n_max,
                delta_zeta: cfg.delta_zeta,
                regularization: if cfg.beta_c > 0.0 {
                    Some(RegularizationConfig {
                        beta_c: cfg.beta_c,
                        sigma_l_bar: cfg.sigma_l_bar,
                        sigma_h_bar: cfg.sigma_h_bar,
                    })
                } else {
                    None
                },
                robin_variant,
                fine_only: cfg.fine_only,
                sigma0: cfg.sigma0,
                tuned_pca: cfg.tuned_pca,
            };

            let state = driver::run(&mesh, &layout, &basis, &data_set, &driver_cfg, truth.as_ref())?;
            driver::write_history_csv(&state.history, &dir.join("history.csv"))?;
            export_field_csv(&state.sigma, &mesh, &dir.join("fine_field.csv"))?;
            export_field_pgm(&state.sigma, &mesh, &dir.join("fine_field.pgm"), 256)?;
            let mut outputs =
                vec!["history.csv".into(), "fine_field.csv".into(), "fine_field.pgm".to_string()];
            if let Some(zeta) = &state.zeta {
                std::fs::write(
                    dir.join("coarse_controls.json"),
                    serde_json::to_string_pretty(zeta).unwrap(),
                )?;
                outputs.push("coarse_controls.json".into());
            }
            if dump_partition {
                if let Some(map) = &state.map {
                    let mut s = String::from("element,subset\n");
                    for (e, a) in map.assignment.iter().enumerate() {
                        s.push_str(&format!("{e},{a}\n"));
                    }
                    std::fs::write(dir.join("partition.csv"), s)?;
                    outputs.push("partition.csv".into());
                }
            }
            if let Some(coarse) = &state.sigma_coarse {
                export_field_csv(coarse, &mesh, &dir.join("coarse_field.csv"))?;
                export_field_pgm(coarse, &mesh, &dir.join("coarse_field.pgm"), 256)?;
                outputs.push("coarse_field.csv".into());
                outputs.push("coarse_field.pgm".into());
                if let Some(t) = &truth {
                    println!("final coarse l2 error: {:e}", l2_error(coarse, t, &mesh));
                }
            }
            if let Some(t) = &truth {
                println!("final fine l2 error: {:e}", l2_error(&state.sigma, t, &mesh));
            }
            println!(
                "terminated: {:?} after k={} with {} evaluations",
                state.termination, state.k, state.evaluations
            );
            write_manifest(
                &dir,
                &RunManifest {
                    command: "invert".into(),
                    artifact_version: env!("CARGO_PKG_VERSION").into(),
                    config: serde_json::to_value(&cfg).unwrap(),
                    // the inversion itself draws no random numbers
                    seeds: vec![],
                    inputs: vec![
                        mesh_path.display().to_string(),
                        basis_path.display().to_string(),
                        data_path.display().to_string(),
                    ],
                    outputs,
                    wall_clock_seconds: started.elapsed().as_secs_f64(),
                },
            )?;
            Ok(())
        }
        Command::Kappa {
            mesh,
            data,
            mode,
            space,
            variant,
            basis,
            components,
            epsilon,
            seed,
            sigma0,
            out,
        } => {
            let started = std::time::Instant::now();
            let variant_name = variant.clone();
            let variant = match variant.as_str() {
                "unscaled" => RobinVariant::Unscaled,
                _ => RobinVariant::SigmaScaled,
            };
            let mesh_path_str = mesh.display().to_string();
            let data_path_str = data.display().to_string();
            let basis_path_str: Option<String> = basis.as_ref().map(|p| p.display().to_string());
            let mesh = load_mesh(&mesh)?;
            let layout = layout_from_mesh(&mesh)?;
            let base = reference_base_drive();
            let data = MeasurementSet::read_csv(&data, base.clone(), base.voltages.len(), 1)?;
            let report = match space.as_str() {
                "sigma" => {
                    let point = vec![sigma0; mesh.num_elements()];
                    let obj = |x: &[f64]| -> f64 {
                        let f = ConductivityField { values: x.to_vec() };
                        evaluate(&mesh, &f, &layout, &data).map(|e| e.value).unwrap_or(f64::NAN)
                    };
                    let f0 = ConductivityField { values: point.clone() };
                    let ev = evaluate(&mesh, &f0, &layout, &data)?;
                    let grad =
                        misfit_gradient(&mesh, &f0, &layout, &data, &ev, variant)?;
                    if mode == "cheap" {
                        let dir = random_direction(point.len(), seed);
                        kappa_cheap(obj, ev.value, &grad.values, &point, &dir, &default_eps_grid())
                    } else {
                        kappa_expensive(obj, ev.value, &grad.values, &point, epsilon)
                    }
                }
                "xi" => {
                    let basis_path =
                        basis.ok_or(CliError::Config("xi space requires --basis".into()))?;
                    let b: PcaBasis = load_basis(&basis_path)?;
                    let active = components.unwrap_or(b.num_components()).min(b.num_components());
                    if active == 0 {
                        return Err(CliError::Config("basis has no components".into()));
                    }
                    let xi0 = truncate(
                        &to_xi(&ConductivityField::constant(sigma0, &mesh), &b),
                        active,
                    );
                    let point = xi0.coefficients[..active].to_vec();
                    let full = |x: &[f64]| {
                        let mut c = vec![0.0; b.num_components()];
                        c[..active].copy_from_slice(x);
                        XiVector { coefficients: c, active_count: active }
                    };
                    let obj = |x: &[f64]| -> f64 {
                        let f = to_sigma(&full(x), &b);
                        evaluate(&mesh, &f, &layout, &data).map(|e| e.value).unwrap_or(f64::NAN)
                    };
                    let f0 = to_sigma(&full(&point), &b);
                    let ev = evaluate(&mesh, &f0, &layout, &data)?;
                    let grad =
                        misfit_gradient(&mesh, &f0, &layout, &data, &ev, variant)?;
                    let gxi = project_gradient(&grad, &b, active)[..active].to_vec();
                    if mode == "cheap" {
                        let dir = random_direction(active, seed);
                        kappa_cheap(obj, ev.value, &gxi, &point, &dir, &default_eps_grid())
                    } else {
                        kappa_expensive(obj, ev.value, &gxi, &point, epsilon)
                    }
                }
                _ => unreachable!(),
            };
            report.write_csv(&out)?;
            let (start, len) = report.plateau(1e-3);
            println!(
                "kappa: {} points, plateau |k-1|<=1e-3 of length {len} starting at {start}",
                report.kappa_values.len()
            );
            let mut inputs = vec![mesh_path_str, data_path_str];
            inputs.extend(basis_path_str);
            write_sidecar_manifest(
                &out,
                "kappa",
                serde_json::json!({
                    "mode": mode,
                    "space": space,
                    "variant": variant_name,
                    "components": components,
                    "epsilon": epsilon,
                    "sigma0": sigma0,
                }),
                vec![seed],
                inputs,
                vec![out.display().to_string()],
                started,
            )?;
            Ok(())
        }
        Command::Report { dir } => {
            let text = std::fs::read_to_string(dir.join("history.csv"))?;
            let mut last_fine: Option<Vec<String>> = None;
            let mut last_coarse: Option<Vec<String>> = None;
            let mut rows = 0usize;
            for line in text.lines().skip(1) {
                let parts: Vec<String> = line.split(',').map(str::to_string).collect();
                if parts.len() != 7 {
                    continue;
                }
                rows += 1;
                if parts[1] == "0" {
                    last_fine = Some(parts);
                } else {
                    last_coarse = Some(parts);
                }
            }
            println!("iterations recorded: {rows}");
            if let Some(f) = last_fine {
                println!("last fine:   k={} J={} l2={} N_xi={}", f[0], f[2], f[4], f[5]);
            }
            if let Some(c) = last_coarse {
                println!("last coarse: k={} J={} l2={}", c[0], c[3], c[4]);
            }
            if dir.join("manifest.json").exists() {
                println!("manifest: {}", dir.join("manifest.json").display());
            }
            Ok(())
        }
    }
}

/// Recover the electrode layout implied by a mesh's tagged boundary edges.
fn layout_from_mesh(mesh: &Mesh) -> Result<ElectrodeLayout, CliError> {
    let m = mesh
        .boundary_edges
        .iter()
        .filter_map(|e| match e.tag {
            eit_core::geometry::BoundaryTag::Electrode(l) => Some(l + 1),
            _ => None,
        })
        .max()
        .ok_or(CliError::Runtime("mesh has no electrode tags".into()))?;
    // electrode arcs are stored geometry; width is recovered from the tagged
    // arc span of electrode 0
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in &mesh.boundary_edges {
        if e.tag == eit_core::geometry::BoundaryTag::Electrode(0) {
            for &v in &e.vertices {
                let ang = mesh.vertices[v][1].atan2(mesh.vertices[v][0]);
                lo = lo.min(ang);
                hi = hi.max(ang);
            }
        }
    }
    let half_width = 0.5 * (hi - lo);
    ElectrodeLayout::equispaced(m, half_width, 0.1, 0.0).map_err(|e| CliError::Runtime(e.to_string()))
}
