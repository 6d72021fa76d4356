//! Disc domain discretization with electrode-tagged boundary arcs.
//!
//! The mesh is a structured polar-ring triangulation: concentric rings of
//! vertices with counts growing toward the boundary, a center fan, and an
//! annulus triangulation between consecutive rings. Boundary vertices are
//! snapped to the electrode arc endpoints so that every boundary edge lies
//! entirely inside or outside an electrode arc.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("electrode layout infeasible: {0}")]
    InfeasibleLayout(String),
    #[error("target element count {target} too small to resolve {m} electrode arcs (minimum ~{min})")]
    TargetTooSmall { target: usize, m: usize, min: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mesh file malformed: {0}")]
    MalformedFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Equispaced electrodes on the disc boundary.
#[derive(Debug, Clone)]
pub struct ElectrodeLayout {
    /// Number of electrodes.
    pub count: usize,
    /// Arc half-width in radians.
    pub half_width: f64,
    /// Arc center angles, strictly increasing.
    pub center_angles: Vec<f64>,
    /// Contact impedances, one per electrode, all positive.
    pub impedances: Vec<f64>,
}

impl ElectrodeLayout {
    /// Equispaced layout with common impedance and a global rotation offset.
    pub fn equispaced(
        count: usize,
        half_width: f64,
        impedance: f64,
        offset: f64,
    ) -> Result<Self, GeometryError> {
        let layout = Self {
            count,
            half_width,
            center_angles: (0..count)
                .map(|l| offset + 2.0 * PI * l as f64 / count as f64)
                .collect(),
            impedances: vec![impedance; count],
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.count == 0 {
            return Err(GeometryError::InvalidParameter("electrode count is zero".into()));
        }
        if self.center_angles.len() != self.count || self.impedances.len() != self.count {
            return Err(GeometryError::InvalidParameter(
                "layout field lengths disagree with electrode count".into(),
            ));
        }
        if self.half_width <= 0.0 {
            return Err(GeometryError::InvalidParameter("half_width must be positive".into()));
        }
        if self.count > 1 && 2.0 * self.half_width >= 2.0 * PI / self.count as f64 {
            return Err(GeometryError::InfeasibleLayout(format!(
                "arc width {} >= electrode spacing {}",
                2.0 * self.half_width,
                2.0 * PI / self.count as f64
            )));
        }
        if self.count == 1 && self.half_width >= PI {
            return Err(GeometryError::InfeasibleLayout("single arc spans full circle".into()));
        }
        for w in self.center_angles.windows(2) {
            if w[1] <= w[0] {
                return Err(GeometryError::InvalidParameter(
                    "center angles not strictly increasing".into(),
                ));
            }
        }
        if self.impedances.iter().any(|&z| z <= 0.0) {
            return Err(GeometryError::InvalidParameter("contact impedances must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of the boundary covered by electrode arcs.
pub fn coverage_fraction(layout: &ElectrodeLayout) -> f64 {
    layout.count as f64 * 2.0 * layout.half_width / (2.0 * PI)
}

/// Boundary edge tag: electrode index (0-based) or insulated gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Electrode(usize),
    Insulated,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // 1-based in the text format
            BoundaryTag::Electrode(l) => write!(f, "{}", l + 1),
            BoundaryTag::Insulated => write!(f, "insulated"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    /// Vertex indices, ordered counter-clockwise along the boundary.
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

/// Triangulated disc with quadratic-node bookkeeping.
///
/// Quadratic (P2) nodes are numbered globally: the mesh vertices first,
/// then one node per unique edge (its midpoint).
#[derive(Debug, Clone)]
pub struct Mesh {
    pub radius: f64,
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub element_areas: Vec<f64>,
    /// Per-triangle six-node table: local 0..2 are the vertices, local 3..5
    /// are the midpoints of the edges opposite those vertices.
    pub p2_nodes: Vec<[usize; 6]>,
    /// Total quadratic node count (vertices + unique edges).
    pub num_p2_nodes: usize,
}

impl Mesh {
    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn total_area(&self) -> f64 {
        self.element_areas.iter().sum()
    }

    pub fn centroid(&self, element: usize) -> [f64; 2] {
        let t = self.triangles[element];
        let mut c = [0.0, 0.0];
        for &v in &t {
            c[0] += self.vertices[v][0];
            c[1] += self.vertices[v][1];
        }
        [c[0] / 3.0, c[1] / 3.0]
    }

    /// Coordinates of a P2 node (vertex or edge midpoint).
    pub fn p2_coords(&self) -> Vec<[f64; 2]> {
        let mut coords = vec![[0.0, 0.0]; self.num_p2_nodes];
        for (i, v) in self.vertices.iter().enumerate() {
            coords[i] = *v;
        }
        for (e, tri) in self.triangles.iter().enumerate() {
            for l in 0..3 {
                let a = tri[(l + 1) % 3];
                let b = tri[(l + 2) % 3];
                let mid = self.p2_nodes[e][3 + l];
                coords[mid] = [
                    0.5 * (self.vertices[a][0] + self.vertices[b][0]),
                    0.5 * (self.vertices[a][1] + self.vertices[b][1]),
                ];
            }
        }
        coords
    }

    /// Map each vertex to the elements touching it (shared-vertex adjacency).
    pub fn vertex_elements(&self) -> Vec<Vec<usize>> {
        let mut map = vec![Vec::new(); self.vertices.len()];
        for (e, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                map[v].push(e);
            }
        }
        map
    }

    /// Global P2 node index for the midpoint of the boundary edge `(a, b)`.
    pub fn edge_midpoint_node(&self, a: usize, b: usize) -> Option<usize> {
        let key = if a < b { (a, b) } else { (b, a) };
        for (e, tri) in self.triangles.iter().enumerate() {
            for l in 0..3 {
                let va = tri[(l + 1) % 3];
                let vb = tri[(l + 2) % 3];
                let k = if va < vb { (va, vb) } else { (vb, va) };
                if k == key {
                    return Some(self.p2_nodes[e][3 + l]);
                }
            }
        }
        None
    }
}

fn triangle_area(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> f64 {
    0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
}

/// Subdivide the boundary circle into edges honoring electrode arc endpoints.
/// Returns (angles sorted ascending from the first arc start, per-angle flag
/// telling whether the following edge lies inside an electrode arc and which).
fn boundary_angles(layout: &ElectrodeLayout, target_h: f64) -> (Vec<f64>, Vec<BoundaryTag>) {
    let m = layout.count;
    let w = layout.half_width;
    let mut angles = Vec::new();
    let mut tags = Vec::new();
    for l in 0..m {
        let start = layout.center_angles[l] - w;
        let end = layout.center_angles[l] + w;
        let nseg = ((end - start) / target_h).round().max(2.0) as usize;
        for s in 0..nseg {
            angles.push(start + (end - start) * s as f64 / nseg as f64);
            tags.push(BoundaryTag::Electrode(l));
        }
        // gap to next electrode
        let next_start = if l + 1 < m {
            layout.center_angles[l + 1] - w
        } else {
            layout.center_angles[0] - w + 2.0 * PI
        };
        let gap = next_start - end;
        if gap > 1e-12 {
            let nseg = ((gap / target_h).round().max(1.0)) as usize;
            for s in 0..nseg {
                angles.push(end + gap * s as f64 / nseg as f64);
                tags.push(BoundaryTag::Insulated);
            }
        }
    }
    (angles, tags)
}

/// Triangulate the annulus between two vertex rings sorted by angle.
/// Both rings run counter-clockwise; `inner` may be a single center vertex.
fn triangulate_annulus(
    inner: &[usize],
    inner_ang: &[f64],
    outer: &[usize],
    outer_ang: &[f64],
    tris: &mut Vec<[usize; 3]>,
) {
    let na = inner.len();
    let nb = outer.len();
    if na == 1 {
        // center fan
        for j in 0..nb {
            tris.push([inner[0], outer[j], outer[(j + 1) % nb]]);
        }
        return;
    }
    // Align the outer pointer with the first inner vertex.
    let a0 = inner_ang[0];
    let mut j0 = 0;
    let mut best = f64::INFINITY;
    for (j, &b) in outer_ang.iter().enumerate() {
        let mut d = (b - a0) % (2.0 * PI);
        if d < 0.0 {
            d += 2.0 * PI;
        }
        if d < best {
            best = d;
            j0 = j;
        }
    }
    // Unwrapped angle of inner step i / outer step j.
    let ia = |i: usize| inner_ang[i % na] + 2.0 * PI * (i / na) as f64;
    let ob = |j: usize| {
        let jj = (j0 + j) % nb;
        let wraps = (j0 + j) / nb;
        let mut b = outer_ang[jj] + 2.0 * PI * wraps as f64;
        // normalize relative to a0 so comparisons are monotone
        while b < a0 - PI {
            b += 2.0 * PI;
        }
        b
    };
    let mut i = 0usize;
    let mut j = 0usize;
    while i < na || j < nb {
        let advance_outer = if j >= nb {
            false
        } else if i >= na {
            true
        } else {
            ob(j + 1) <= ia(i + 1)
        };
        if advance_outer {
            tris.push([inner[i % na], outer[(j0 + j) % nb], outer[(j0 + j + 1) % nb]]);
            j += 1;
        } else {
            tris.push([inner[i % na], outer[(j0 + j) % nb], inner[(i + 1) % na]]);
            i += 1;
        }
    }
}

/// Build the quadratic-node table: vertices keep their indices, each unique
/// edge gets one node after them.
fn build_p2_nodes(vertices: usize, triangles: &[[usize; 3]]) -> (Vec<[usize; 6]>, usize) {
    let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut p2 = Vec::with_capacity(triangles.len());
    for tri in triangles {
        let mut nodes = [0usize; 6];
        nodes[..3].copy_from_slice(tri);
        for l in 0..3 {
            let a = tri[(l + 1) % 3];
            let b = tri[(l + 2) % 3];
            let key = if a < b { (a, b) } else { (b, a) };
            let next = vertices + edge_ids.len();
            let id = *edge_ids.entry(key).or_insert(next);
            nodes[3 + l] = id;
        }
        p2.push(nodes);
    }
    (p2, vertices + edge_ids.len())
}

fn build_with_rings(
    radius: f64,
    layout: &ElectrodeLayout,
    n_rings: usize,
    target_h: f64,
) -> Result<Mesh, GeometryError> {
    let (bnd_angles, bnd_tags) = boundary_angles(layout, target_h);
    let n_b = bnd_angles.len();

    let mut vertices: Vec<[f64; 2]> = vec![[0.0, 0.0]]; // center
    let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(n_rings);
    let mut ring_angles: Vec<Vec<f64>> = Vec::with_capacity(n_rings);
    for k in 1..=n_rings {
        let r = radius * k as f64 / n_rings as f64;
        let (angles, ids): (Vec<f64>, Vec<usize>) = if k == n_rings {
            let ids = bnd_angles
                .iter()
                .map(|&a| {
                    vertices.push([r * a.cos(), r * a.sin()]);
                    vertices.len() - 1
                })
                .collect();
            (bnd_angles.clone(), ids)
        } else {
            let count = ((n_b as f64 * k as f64 / n_rings as f64).round() as usize).max(6);
            let mut angles = Vec::with_capacity(count);
            let mut ids = Vec::with_capacity(count);
            for s in 0..count {
                let a = 2.0 * PI * s as f64 / count as f64;
                angles.push(a);
                vertices.push([r * a.cos(), r * a.sin()]);
                ids.push(vertices.len() - 1);
            }
            (angles, ids)
        };
        ring_ids.push(ids);
        ring_angles.push(angles);
    }

    let mut triangles = Vec::new();
    triangulate_annulus(&[0], &[0.0], &ring_ids[0], &ring_angles[0], &mut triangles);
    for k in 1..n_rings {
        triangulate_annulus(
            &ring_ids[k - 1],
            &ring_angles[k - 1],
            &ring_ids[k],
            &ring_angles[k],
            &mut triangles,
        );
    }

    let element_areas: Vec<f64> = triangles
        .iter()
        .map(|t| triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]))
        .collect();
    if let Some(a) = element_areas.iter().find(|&&a| a <= 0.0) {
        return Err(GeometryError::InvalidParameter(format!(
            "degenerate element produced (area {a}); ring configuration unsuitable"
        )));
    }

    let boundary_edges: Vec<BoundaryEdge> = (0..n_b)
        .map(|s| BoundaryEdge {
            vertices: [ring_ids[n_rings - 1][s], ring_ids[n_rings - 1][(s + 1) % n_b]],
            tag: bnd_tags[s],
        })
        .collect();

    let (p2_nodes, num_p2_nodes) = build_p2_nodes(vertices.len(), &triangles);

    Ok(Mesh {
        radius,
        vertices,
        triangles,
        boundary_edges,
        element_areas,
        p2_nodes,
        num_p2_nodes,
    })
}

/// Estimated triangle count for a ring configuration, without building it.
fn estimate_count(layout: &ElectrodeLayout, n_rings: usize, target_h: f64) -> usize {
    let (bnd_angles, _) = boundary_angles(layout, target_h);
    let n_b = bnd_angles.len();
    let ring_count = |k: usize| -> usize {
        if k == n_rings {
            n_b
        } else {
            ((n_b as f64 * k as f64 / n_rings as f64).round() as usize).max(6)
        }
    };
    let mut total = ring_count(1); // center fan
    for k in 1..n_rings {
        total += ring_count(k) + ring_count(k + 1);
    }
    total
}

/// Build a disc mesh with approximately `target_element_count` triangles.
pub fn build_disc_mesh(
    radius: f64,
    target_element_count: usize,
    layout: &ElectrodeLayout,
) -> Result<Mesh, GeometryError> {
    if radius <= 0.0 {
        return Err(GeometryError::InvalidParameter("radius must be positive".into()));
    }
    if target_element_count < 8 {
        return Err(GeometryError::InvalidParameter(
            "target_element_count must be at least 8".into(),
        ));
    }
    layout.validate()?;

    // Feasibility: the coarsest mesh honoring >= 2 edges per arc.
    let min_count = estimate_count(layout, 2, 2.0 * PI);
    if min_count as f64 > 1.15 * target_element_count as f64 {
        return Err(GeometryError::TargetTooSmall {
            target: target_element_count,
            m: layout.count,
            min: min_count,
        });
    }

    // T ~ 2*pi*n*(n+1) for isotropic grading; solve for ring count.
    let t = target_element_count as f64;
    let mut n_rings = (((1.0 + 4.0 * t / (2.0 * PI)).sqrt() - 1.0) / 2.0).round() as usize;
    n_rings = n_rings.max(2);
    let mut target_h = 2.0 * PI * n_rings as f64 / t.max(1.0);

    // One correction pass to land near the target.
    for _ in 0..4 {
        let count = estimate_count(layout, n_rings, target_h);
        let ratio = count as f64 / t;
        if (0.9..=1.1).contains(&ratio) {
            break;
        }
        target_h *= ratio;
        if ratio > 1.3 && n_rings > 2 {
            n_rings -= 1;
        } else if ratio < 0.7 {
            n_rings += 1;
        }
    }

    build_with_rings(radius, layout, n_rings, target_h)
}

/// Plain-text mesh export: `V vertices T triangles B boundary_edges` header,
/// then coordinate rows, triangle rows, and `v0 v1 tag` boundary rows.
pub fn write_mesh<W: Write>(mesh: &Mesh, mut out: W) -> Result<(), GeometryError> {
    writeln!(
        out,
        "{} vertices {} triangles {} boundary_edges",
        mesh.num_vertices(),
        mesh.num_elements(),
        mesh.boundary_edges.len()
    )?;
    for v in &mesh.vertices {
        writeln!(out, "{:.17e} {:.17e}", v[0], v[1])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "{} {} {}", t[0], t[1], t[2])?;
    }
    for e in &mesh.boundary_edges {
        writeln!(out, "{} {} {}", e.vertices[0], e.vertices[1], e.tag)?;
    }
    Ok(())
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<(), GeometryError> {
    let f = std::fs::File::create(path)?;
    write_mesh(mesh, std::io::BufWriter::new(f))
}

pub fn read_mesh<R: BufRead>(reader: R) -> Result<Mesh, GeometryError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| GeometryError::MalformedFile("empty file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[1] != "vertices" || parts[3] != "triangles" || parts[5] != "boundary_edges" {
        return Err(GeometryError::MalformedFile(format!("bad header: {header}")));
    }
    let nv: usize = parts[0].parse().map_err(|_| GeometryError::MalformedFile("bad vertex count".into()))?;
    let nt: usize = parts[2].parse().map_err(|_| GeometryError::MalformedFile("bad triangle count".into()))?;
    let nb: usize = parts[4].parse().map_err(|_| GeometryError::MalformedFile("bad boundary count".into()))?;

    let mut next_line = || -> Result<String, GeometryError> {
        lines
            .next()
            .ok_or_else(|| GeometryError::MalformedFile("unexpected end of file".into()))?
            .map_err(GeometryError::from)
    };

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = next_line()?;
        let mut it = line.split_whitespace();
        let x: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GeometryError::MalformedFile("bad vertex row".into()))?;
        let y: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GeometryError::MalformedFile("bad vertex row".into()))?;
        vertices.push([x, y]);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let line = next_line()?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| GeometryError::MalformedFile("bad triangle row".into()))?;
        if idx.len() != 3 || idx.iter().any(|&i| i >= nv) {
            return Err(GeometryError::MalformedFile("bad triangle row".into()));
        }
        triangles.push([idx[0], idx[1], idx[2]]);
    }
    let mut boundary_edges = Vec::with_capacity(nb);
    for _ in 0..nb {
        let line = next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(GeometryError::MalformedFile("bad boundary row".into()));
        }
        let v0: usize = parts[0].parse().map_err(|_| GeometryError::MalformedFile("bad boundary row".into()))?;
        let v1: usize = parts[1].parse().map_err(|_| GeometryError::MalformedFile("bad boundary row".into()))?;
        let tag = if parts[2] == "insulated" {
            BoundaryTag::Insulated
        } else {
            let l: usize = parts[2]
                .parse()
                .map_err(|_| GeometryError::MalformedFile("bad boundary tag".into()))?;
            if l == 0 {
                return Err(GeometryError::MalformedFile("electrode tags are 1-based".into()));
            }
            BoundaryTag::Electrode(l - 1)
        };
        boundary_edges.push(BoundaryEdge { vertices: [v0, v1], tag });
    }

    let element_areas: Vec<f64> = triangles
        .iter()
        .map(|t| triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]))
        .collect();
    if element_areas.iter().any(|&a| a <= 0.0) {
        return Err(GeometryError::MalformedFile("non-positive element area".into()));
    }
    let radius = vertices
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0, f64::max);
    let (p2_nodes, num_p2_nodes) = build_p2_nodes(vertices.len(), &triangles);
    Ok(Mesh {
        radius,
        vertices,
        triangles,
        boundary_edges,
        element_areas,
        p2_nodes,
        num_p2_nodes,
    })
}

pub fn load_mesh(path: &Path) -> Result<Mesh, GeometryError> {
    let f = std::fs::File::open(path)?;
    read_mesh(std::io::BufReader::new(f))
}
