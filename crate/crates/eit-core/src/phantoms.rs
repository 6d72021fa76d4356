//! Ground-truth phantoms, synthetic data generation, noise injection, and
//! raster import/export.
//!
//! Rasters are plain portable graymaps (P2 ascii or P5 binary) with a sidecar
//! text file `<path>.extent` holding `x_min y_min x_max y_max`; row 0 of the
//! image is the top of the physical extent.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::forward::{assemble_system, ConductivityField, DriveVector};
use crate::geometry::{ElectrodeLayout, Mesh};
use crate::objective::{rotate_drive, MeasurementSet};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("raster malformed: {0}")]
    MalformedRaster(String),
    #[error("raster does not cover the mesh: {0}")]
    RasterCoverage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solve(#[from] crate::forward::SolveError),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CircleSpec {
    pub center: [f64; 2],
    pub radius: f64,
    pub value: f64,
}

/// Circles phantom: `background` everywhere, each circle painting its value
/// (later circles override earlier ones).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CirclesPhantom {
    pub background: f64,
    pub circles: Vec<CircleSpec>,
}

impl CirclesPhantom {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.background > 0.0) {
            return Err(PhantomError::InvalidSpec(format!("background {}", self.background)));
        }
        for (i, c) in self.circles.iter().enumerate() {
            if !(c.radius > 0.0) || !(c.value > 0.0) {
                return Err(PhantomError::InvalidSpec(format!("circle {i}")));
            }
        }
        Ok(())
    }
}

/// The three-spot reference phantom used throughout the experiments. The
/// published geometry exists only as figures, so the exact coordinates here
/// are a documented stand-in: three non-overlapping spots of distinct radii,
/// the largest near 0.3 of the domain radius.
pub fn reference_three_spot_phantom(radius: f64, spot_values: [f64; 3]) -> CirclesPhantom {
    CirclesPhantom {
        background: 0.2,
        circles: vec![
            CircleSpec { center: [0.45 * radius, 0.2 * radius], radius: 0.30 * radius, value: spot_values[0] },
            CircleSpec { center: [-0.45 * radius, 0.35 * radius], radius: 0.22 * radius, value: spot_values[1] },
            CircleSpec { center: [-0.1 * radius, -0.5 * radius], radius: 0.20 * radius, value: spot_values[2] },
        ],
    }
}

/// Paint the phantom onto the mesh by element-centroid membership.
pub fn make_circles_phantom(spec: &CirclesPhantom, mesh: &Mesh) -> Result<ConductivityField, PhantomError> {
    spec.validate()?;
    let values = (0..mesh.num_elements())
        .map(|e| {
            let c = mesh.centroid(e);
            let mut v = spec.background;
            for circ in &spec.circles {
                let dx = c[0] - circ.center[0];
                let dy = c[1] - circ.center[1];
                if dx * dx + dy * dy <= circ.radius * circ.radius {
                    v = circ.value;
                }
            }
            v
        })
        .collect();
    Ok(ConductivityField { values })
}

struct Pgm {
    width: usize,
    height: usize,
    maxval: u16,
    pixels: Vec<u16>,
}

fn read_pgm(path: &Path) -> Result<Pgm, PhantomError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Result<String, PhantomError> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(PhantomError::MalformedRaster("unexpected end of file".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&bytes, &mut pos)?;
    let width: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| PhantomError::MalformedRaster("bad width".into()))?;
    let height: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| PhantomError::MalformedRaster("bad height".into()))?;
    let maxval: u16 = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| PhantomError::MalformedRaster("bad maxval".into()))?;
    if width == 0 || height == 0 || maxval == 0 {
        return Err(PhantomError::MalformedRaster("degenerate dimensions".into()));
    }
    let n = width * height;
    let pixels = match magic.as_str() {
        "P2" => {
            let mut px = Vec::with_capacity(n);
            for _ in 0..n {
                px.push(
                    token(&bytes, &mut pos)?
                        .parse()
                        .map_err(|_| PhantomError::MalformedRaster("bad pixel".into()))?,
                );
            }
            px
        }
        "P5" => {
            pos += 1; // single whitespace after maxval
            if maxval > 255 {
                return Err(PhantomError::MalformedRaster("P5 maxval > 255 unsupported".into()));
            }
            if bytes.len() < pos + n {
                return Err(PhantomError::MalformedRaster("truncated pixel data".into()));
            }
            bytes[pos..pos + n].iter().map(|&b| b as u16).collect()
        }
        other => return Err(PhantomError::MalformedRaster(format!("magic {other}"))),
    };
    Ok(Pgm { width, height, maxval, pixels })
}

fn read_extent(path: &Path) -> Result<[f64; 4], PhantomError> {
    let sidecar = path.with_extension(
        path.extension()
            .map(|e| format!("{}.extent", e.to_string_lossy()))
            .unwrap_or_else(|| "extent".into()),
    );
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| PhantomError::MalformedRaster(format!("extent sidecar {sidecar:?}: {e}")))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| PhantomError::MalformedRaster("extent not four numbers".into()))?;
    if vals.len() != 4 || !(vals[0] < vals[2] && vals[1] < vals[3]) {
        return Err(PhantomError::MalformedRaster("extent must be x_min y_min x_max y_max".into()));
    }
    Ok([vals[0], vals[1], vals[2], vals[3]])
}

/// Binary mask to conductivity: element value is `high` when the grid cell
/// containing its centroid is foreground (pixel > maxval/2), else `low`.
pub fn import_raster(path: &Path, mesh: &Mesh, low: f64, high: f64) -> Result<ConductivityField, PhantomError> {
    let pgm = read_pgm(path)?;
    let [x0, y0, x1, y1] = read_extent(path)?;
    let values = (0..mesh.num_elements())
        .map(|e| {
            let c = mesh.centroid(e);
            if c[0] < x0 || c[0] > x1 || c[1] < y0 || c[1] > y1 {
                return Err(PhantomError::RasterCoverage(format!(
                    "centroid ({}, {}) outside extent",
                    c[0], c[1]
                )));
            }
            let col = (((c[0] - x0) / (x1 - x0)) * pgm.width as f64) as usize;
            let col = col.min(pgm.width - 1);
            // row 0 is the top of the extent
            let row = (((y1 - c[1]) / (y1 - y0)) * pgm.height as f64) as usize;
            let row = row.min(pgm.height - 1);
            let fg = pgm.pixels[row * pgm.width + col] > pgm.maxval / 2;
            Ok(if fg { high } else { low })
        })
        .collect::<Result<_, _>>()?;
    Ok(ConductivityField { values })
}

/// Render a field to an ascii graymap (min -> 0, max -> 255, pixels outside
/// the disc -> 0) with its extent sidecar. Pixels take the value of the
/// nearest element centroid.
pub fn export_field_pgm(field: &ConductivityField, mesh: &Mesh, path: &Path, size: usize) -> Result<(), PhantomError> {
    let r = mesh.radius;
    let lo = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    // bucket element centroids on a coarse grid for nearest lookup
    let nb = 32usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nb * nb];
    let bucket_of = |x: f64, y: f64| {
        let bx = (((x + r) / (2.0 * r)) * nb as f64).clamp(0.0, nb as f64 - 1.0) as usize;
        let by = (((y + r) / (2.0 * r)) * nb as f64).clamp(0.0, nb as f64 - 1.0) as usize;
        by * nb + bx
    };
    let centroids: Vec<[f64; 2]> = (0..mesh.num_elements()).map(|e| mesh.centroid(e)).collect();
    for (e, c) in centroids.iter().enumerate() {
        buckets[bucket_of(c[0], c[1])].push(e);
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P2")?;
    writeln!(f, "{size} {size}")?;
    writeln!(f, "255")?;
    for row in 0..size {
        let mut line = String::new();
        for col in 0..size {
            let x = -r + (col as f64 + 0.5) / size as f64 * 2.0 * r;
            let y = r - (row as f64 + 0.5) / size as f64 * 2.0 * r;
            let pix = if x * x + y * y > r * r {
                0
            } else {
                // search the surrounding bucket ring, growing until hit
                let mut best: Option<(f64, usize)> = None;
                let bx = (((x + r) / (2.0 * r)) * nb as f64).clamp(0.0, nb as f64 - 1.0) as isize;
                let by = (((y + r) / (2.0 * r)) * nb as f64).clamp(0.0, nb as f64 - 1.0) as isize;
                let mut ring = 0isize;
                while best.is_none() && ring < nb as isize {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dx.abs() != ring && dy.abs() != ring {
                                continue;
                            }
                            let (cx, cy) = (bx + dx, by + dy);
                            if cx < 0 || cy < 0 || cx >= nb as isize || cy >= nb as isize {
                                continue;
                            }
                            for &e in &buckets[cy as usize * nb + cx as usize] {
                                let d = (centroids[e][0] - x).powi(2) + (centroids[e][1] - y).powi(2);
                                if best.map_or(true, |(bd, _)| d < bd) {
                                    best = Some((d, e));
                                }
                            }
                        }
                    }
                    ring += 1;
                }
                // widen by one ring so the nearest is not missed at a border
                let (_, e) = best.unwrap();
                (((field.values[e] - lo) / span) * 255.0).round() as u32
            };
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&pix.to_string());
        }
        writeln!(f, "{line}")?;
    }
    drop(f);
    let sidecar = path.with_extension(
        path.extension()
            .map(|e| format!("{}.extent", e.to_string_lossy()))
            .unwrap_or_else(|| "extent".into()),
    );
    std::fs::write(sidecar, format!("{} {} {} {}\n", -r, -r, r, r))?;
    Ok(())
}

/// Per-element CSV export `element,x,y,value`.
pub fn export_field_csv(field: &ConductivityField, mesh: &Mesh, path: &Path) -> Result<(), PhantomError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "element,x,y,value")?;
    for e in 0..mesh.num_elements() {
        let c = mesh.centroid(e);
        writeln!(f, "{e},{:.17e},{:.17e},{:.17e}", c[0], c[1], field.values[e])?;
    }
    Ok(())
}

/// Noiseless synthetic measurements: forward solves over all rotated drives,
/// unit weights.
pub fn simulate_data(
    field: &ConductivityField,
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    base_drive: &DriveVector,
    rotations: usize,
    permutations: usize,
) -> Result<MeasurementSet, PhantomError> {
    let op = assemble_system(mesh, field, layout)?;
    let mut targets = Vec::with_capacity(rotations * permutations);
    for _k in 0..permutations {
        for j in 1..=rotations {
            let d = rotate_drive(base_drive, j);
            let u = op.solve(&d)?;
            targets.push(op.currents(&u, &d).currents);
        }
    }
    let m = base_drive.voltages.len();
    Ok(MeasurementSet {
        base_drive: base_drive.clone(),
        num_rotations: rotations,
        num_permutations: permutations,
        targets,
        weights: vec![vec![1.0; m]; rotations * permutations],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum NoiseMode {
    /// Each target multiplied by `(1 + p * eta)`, `eta` standard normal.
    #[default]
    Multiplicative,
    /// Each target shifted by `p * max|target| * eta`.
    AdditiveRelMax,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub percent: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: NoiseMode,
}

/// Contaminate targets with seeded Gaussian noise; `percent = 0` returns the
/// data unchanged (no RNG draws).
pub fn add_noise(data: &MeasurementSet, spec: &NoiseSpec) -> MeasurementSet {
    assert!(spec.percent >= 0.0, "noise percent must be nonnegative");
    if spec.percent == 0.0 {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = rand_distr::StandardNormal;
    let mut out = data.clone();
    let max_abs = data
        .targets
        .iter()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    for row in out.targets.iter_mut() {
        for t in row.iter_mut() {
            let eta: f64 = rng.sample(normal);
            match spec.mode {
                NoiseMode::Multiplicative => *t *= 1.0 + spec.percent * eta,
                NoiseMode::AdditiveRelMax => *t += spec.percent * max_abs * eta,
            }
        }
    }
    out
}
