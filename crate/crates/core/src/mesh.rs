//! Triangle meshes, mesh file formats, parametric test surfaces and the
//! lumped mass matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Sentinel for the missing second face of a boundary edge.
pub const NO_FACE: usize = usize::MAX;

/// Faces with area below this fraction of the mean face area are rejected.
const DEGENERATE_AREA_FRACTION: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("edge ({0}, {1}) bounds more than two faces")]
    NonManifoldEdge(usize, usize),
    #[error("faces {first} and {second} traverse edge ({a}, {b}) in the same direction")]
    InconsistentOrientation {
        first: usize,
        second: usize,
        a: usize,
        b: usize,
    },
    #[error("mesh has no faces")]
    Empty,
    #[error("surface resolution {0}x{1} is below the 2x2 minimum")]
    ResolutionTooSmall(usize, usize),
    #[error("unsupported mesh format `{0}`")]
    UnsupportedFormat(String),
    #[error("invalid surface spec: {0}")]
    Spec(String),
}

impl MeshError {
    /// Stable short code for each failure class, used as CLI exit diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            MeshError::Io(_) => "io",
            MeshError::Parse { .. } => "parse",
            MeshError::IndexOutOfRange { .. } => "index-out-of-range",
            MeshError::DegenerateFace { .. } => "degenerate-face",
            MeshError::NonManifoldEdge(..) => "non-manifold-edge",
            MeshError::InconsistentOrientation { .. } => "inconsistent-orientation",
            MeshError::Empty => "empty",
            MeshError::ResolutionTooSmall(..) => "resolution-too-small",
            MeshError::UnsupportedFormat(_) => "unsupported-format",
            MeshError::Spec(_) => "spec",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self, MeshError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        match ext.as_str() {
            "off" => Ok(MeshFormat::Off),
            "obj" => Ok(MeshFormat::Obj),
            _ => Err(MeshError::UnsupportedFormat(ext)),
        }
    }
}

/// An undirected mesh edge and the (one or two) faces it bounds.
///
/// `faces[0]` traverses the edge as `vertices[0] -> vertices[1]` when the
/// edge was first seen in that direction; orientation consistency guarantees
/// `faces[1]` (if any) traverses it the other way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub faces: [usize; 2],
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.faces[1] == NO_FACE
    }

    /// The face across this edge from `face`, if there is one.
    pub fn other_face(&self, face: usize) -> Option<usize> {
        let other = if self.faces[0] == face {
            self.faces[1]
        } else {
            self.faces[0]
        };
        (other != NO_FACE).then_some(other)
    }
}

/// A validated, edge-manifold, consistently oriented triangle mesh.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    uv: Option<Vec<[f64; 2]>>,
    edges: Vec<Edge>,
    edge_lookup: HashMap<(usize, usize), usize>,
    // face_edges[f][k] is the edge from corner k to corner k + 1.
    face_edges: Vec<[usize; 3]>,
    vertex_faces: Vec<Vec<usize>>,
    vertex_neighbors: Vec<Vec<usize>>,
    face_normals: Vec<Vec3>,
    face_areas: Vec<f64>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let count = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            if let Some(&index) = face.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { face: f, index, count });
            }
        }

        let mut face_normals = Vec::with_capacity(faces.len());
        let mut face_areas = Vec::with_capacity(faces.len());
        for face in &faces {
            let [a, b, c] = face.map(|i| vertices[i]);
            let cross = (b - a).cross(&(c - a));
            let norm = cross.norm();
            face_areas.push(0.5 * norm);
            face_normals.push(if norm > 0.0 { cross / norm } else { Vec3::zeros() });
        }
        let mean_area = face_areas.iter().sum::<f64>() / faces.len() as f64;
        for (f, &area) in face_areas.iter().enumerate() {
            if !(area > DEGENERATE_AREA_FRACTION * mean_area) {
                return Err(MeshError::DegenerateFace { face: f, area });
            }
        }

        let mut edges: Vec<Edge> = Vec::new();
        let mut edge_lookup = HashMap::with_capacity(faces.len() * 3 / 2 + 3);
        let mut face_edges = Vec::with_capacity(faces.len());
        for (f, face) in faces.iter().enumerate() {
            let mut fe = [0; 3];
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match edge_lookup.get(&key) {
                    None => {
                        edge_lookup.insert(key, edges.len());
                        fe[k] = edges.len();
                        edges.push(Edge {
                            vertices: [a, b],
                            faces: [f, NO_FACE],
                        });
                    }
                    Some(&e) => {
                        let edge = &mut edges[e];
                        if !edge.is_boundary() {
                            return Err(MeshError::NonManifoldEdge(key.0, key.1));
                        }
                        if edge.vertices == [a, b] {
                            return Err(MeshError::InconsistentOrientation {
                                first: edge.faces[0],
                                second: f,
                                a,
                                b,
                            });
                        }
                        edge.faces[1] = f;
                        fe[k] = e;
                    }
                }
            }
            face_edges.push(fe);
        }

        let mut vertex_faces = vec![Vec::new(); count];
        for (f, face) in faces.iter().enumerate() {
            for &v in face {
                vertex_faces[v].push(f);
            }
        }
        let mut vertex_neighbors = vec![Vec::new(); count];
        for edge in &edges {
            let [a, b] = edge.vertices;
            vertex_neighbors[a].push(b);
            vertex_neighbors[b].push(a);
        }
        for nbrs in &mut vertex_neighbors {
            nbrs.sort_unstable();
        }

        Ok(TriangleMesh {
            vertices,
            faces,
            uv: None,
            edges,
            edge_lookup,
            face_edges,
            vertex_faces,
            vertex_neighbors,
            face_normals,
            face_areas,
        })
    }

    /// Attach per-vertex surface parameters (used to sample images).
    pub fn with_uv(mut self, uv: Vec<[f64; 2]>) -> Result<Self, MeshError> {
        if uv.len() != self.vertices.len() {
            return Err(MeshError::Spec(format!(
                "{} uv pairs for {} vertices",
                uv.len(),
                self.vertices.len()
            )));
        }
        self.uv = Some(uv);
        Ok(self)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Vec3 {
        self.vertices[v]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face(&self, f: usize) -> [usize; 3] {
        self.faces[f]
    }

    pub fn uv(&self) -> Option<&[[f64; 2]]> {
        self.uv.as_deref()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&Edge> {
        self.edge_lookup
            .get(&(a.min(b), a.max(b)))
            .map(|&e| &self.edges[e])
    }

    pub fn face_edges(&self, f: usize) -> [usize; 3] {
        self.face_edges[f]
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.is_boundary())
    }

    pub fn n_boundary_edges(&self) -> usize {
        self.boundary_edges().count()
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.vertex_neighbors[v]
            .iter()
            .any(|&w| self.edge_between(v, w).is_some_and(Edge::is_boundary))
    }

    /// Faces sharing an edge with `f`.
    pub fn face_neighbors(&self, f: usize) -> impl Iterator<Item = usize> + '_ {
        self.face_edges[f]
            .iter()
            .filter_map(move |&e| self.edges[e].other_face(f))
    }

    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    pub fn vertex_neighbors(&self, v: usize) -> &[usize] {
        &self.vertex_neighbors[v]
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        self.face_normals[f]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        self.face_areas[f]
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    /// Interior angle of face `f` at its corner `v`.
    pub fn corner_angle(&self, f: usize, v: usize) -> f64 {
        let face = self.faces[f];
        let k = face.iter().position(|&i| i == v).expect("vertex not in face");
        let p = self.vertices[v];
        let a = self.vertices[face[(k + 1) % 3]] - p;
        let b = self.vertices[face[(k + 2) % 3]] - p;
        a.angle(&b)
    }

    pub fn mean_edge_length(&self) -> f64 {
        let total: f64 = self
            .edges
            .iter()
            .map(|e| (self.vertices[e.vertices[0]] - self.vertices[e.vertices[1]]).norm())
            .sum();
        total / self.edges.len() as f64
    }

    /// Angle-weighted vertex normal.
    pub fn vertex_normal(&self, v: usize) -> Vec3 {
        let n: Vec3 = self.vertex_faces[v]
            .iter()
            .map(|&f| self.face_normals[f] * self.corner_angle(f, v))
            .sum();
        n.normalize()
    }

    /// The vertex nearest to `uv` in parameter space, for meshes carrying uv.
    pub fn nearest_uv_vertex(&self, uv: [f64; 2]) -> Option<usize> {
        let params = self.uv.as_ref()?;
        params
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a[0] - uv[0]).powi(2) + (a[1] - uv[1]).powi(2);
                let db = (b[0] - uv[0]).powi(2) + (b[1] - uv[1]).powi(2);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
    }
}

/// Diagonal (lumped) mass matrix: one third of each incident face area.
#[derive(Clone, Debug, PartialEq)]
pub struct MassMatrix {
    weights: Vec<f64>,
}

impl MassMatrix {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        MassMatrix { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `M ⊙ f`.
    pub fn scale(&self, f: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(f).map(|(m, x)| m * x).collect()
    }
}

pub fn mass_matrix(mesh: &TriangleMesh) -> MassMatrix {
    let mut weights = vec![0.0; mesh.n_vertices()];
    for (f, face) in mesh.faces().iter().enumerate() {
        let third = mesh.face_area(f) / 3.0;
        for &v in face {
            weights[v] += third;
        }
    }
    MassMatrix { weights }
}

// ---------------------------------------------------------------------------
// Parametric surfaces
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub height: f64,
    pub sigma: f64,
}

/// Height field `z = f(u, v)` over the unit parameter square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum HeightFunction {
    Flat,
    /// Sum of `h * exp(-|p - c|^2 / sigma^2)` terms.
    GaussianBumps { bumps: Vec<Bump> },
    /// `a * sin(2π (fu u + fv v) + phase)`.
    Ripple {
        amplitude: f64,
        frequency: [f64; 2],
        #[serde(default)]
        phase: f64,
    },
    /// `a * (u - 1/2) * (v - 1/2)`.
    Saddle { amplitude: f64 },
}

impl HeightFunction {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            HeightFunction::Flat => 0.0,
            HeightFunction::GaussianBumps { bumps } => bumps
                .iter()
                .map(|b| {
                    let d2 = (u - b.center[0]).powi(2) + (v - b.center[1]).powi(2);
                    b.height * (-d2 / (b.sigma * b.sigma)).exp()
                })
                .sum(),
            HeightFunction::Ripple {
                amplitude,
                frequency,
                phase,
            } => {
                let t = std::f64::consts::TAU * (frequency[0] * u + frequency[1] * v) + phase;
                amplitude * t.sin()
            }
            HeightFunction::Saddle { amplitude } => amplitude * (u - 0.5) * (v - 0.5),
        }
    }
}

fn default_extent() -> f64 {
    1.0
}

/// A graph surface sampled on a regular `n_u x n_v` vertex grid.
///
/// The embedding is `extent * (u, v, f(u, v))`, so `extent` rescales the
/// whole surface uniformly (an extent of `n - 1` gives unit grid spacing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    #[serde(flatten)]
    pub height: HeightFunction,
    pub resolution: [usize; 2],
    #[serde(default = "default_extent")]
    pub extent: f64,
}

impl SurfaceSpec {
    pub fn flat(n_u: usize, n_v: usize) -> Self {
        SurfaceSpec {
            height: HeightFunction::Flat,
            resolution: [n_u, n_v],
            extent: 1.0,
        }
    }

    pub fn gaussian_bump(n_u: usize, n_v: usize, center: [f64; 2], height: f64, sigma: f64) -> Self {
        SurfaceSpec {
            height: HeightFunction::GaussianBumps {
                bumps: vec![Bump {
                    center,
                    height,
                    sigma,
                }],
            },
            resolution: [n_u, n_v],
            extent: 1.0,
        }
    }

    pub fn with_extent(mut self, extent: f64) -> Self {
        self.extent = extent;
        self
    }

    pub fn from_json(text: &str) -> Result<Self, MeshError> {
        serde_json::from_str(text).map_err(|e| MeshError::Spec(e.to_string()))
    }

    /// Grid index of parameter sample `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.resolution[0] + i
    }
}

pub fn generate_surface(spec: &SurfaceSpec) -> Result<TriangleMesh, MeshError> {
    let [nu, nv] = spec.resolution;
    if nu < 2 || nv < 2 {
        return Err(MeshError::ResolutionTooSmall(nu, nv));
    }
    if !(spec.extent > 0.0) {
        return Err(MeshError::Spec(format!("extent must be positive, got {}", spec.extent)));
    }
    let mut vertices = Vec::with_capacity(nu * nv);
    let mut uv = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        let v = j as f64 / (nv - 1) as f64;
        for i in 0..nu {
            let u = i as f64 / (nu - 1) as f64;
            let z = spec.height.eval(u, v);
            vertices.push(spec.extent * Vec3::new(u, v, z));
            uv.push([u, v]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (nu - 1) * (nv - 1));
    for j in 0..nv - 1 {
        for i in 0..nu - 1 {
            let a = spec.index(i, j);
            let b = spec.index(i + 1, j);
            let c = spec.index(i + 1, j + 1);
            let d = spec.index(i, j + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriangleMesh::new(vertices, faces)?.with_uv(uv)
}

/// Regular icosahedron inscribed in a sphere, with vertex 0 at the north
/// pole `(0, 0, r)` and vertex 11 at the south pole.
pub fn icosahedron(radius: f64) -> TriangleMesh {
    let (vertices, faces) = icosahedron_parts(radius);
    TriangleMesh::new(vertices, faces).expect("icosahedron is a valid mesh")
}

fn icosahedron_parts(radius: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    use std::f64::consts::PI;
    let z = 1.0 / 5f64.sqrt();
    let rho = 2.0 / 5f64.sqrt();
    let mut vertices = vec![Vec3::new(0.0, 0.0, 1.0)];
    for k in 0..5 {
        let t = 2.0 * PI * k as f64 / 5.0;
        vertices.push(Vec3::new(rho * t.cos(), rho * t.sin(), z));
    }
    for k in 0..5 {
        let t = 2.0 * PI * k as f64 / 5.0 + PI / 5.0;
        vertices.push(Vec3::new(rho * t.cos(), rho * t.sin(), -z));
    }
    vertices.push(Vec3::new(0.0, 0.0, -1.0));
    let upper = |k: usize| 1 + k % 5;
    let lower = |k: usize| 6 + k % 5;
    let mut faces = Vec::with_capacity(20);
    for k in 0..5 {
        faces.push([0, upper(k), upper(k + 1)]);
        faces.push([upper(k), lower(k), upper(k + 1)]);
        faces.push([upper(k + 1), lower(k), lower(k + 1)]);
        faces.push([11, lower(k + 1), lower(k)]);
    }
    orient_outward(&vertices, &mut faces);
    (vertices.into_iter().map(|p| p * radius).collect(), faces)
}

fn orient_outward(vertices: &[Vec3], faces: &mut [[usize; 3]]) {
    for face in faces.iter_mut() {
        let [a, b, c] = face.map(|i| vertices[i]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            face.swap(1, 2);
        }
    }
}

/// Loop-style midpoint subdivision of the icosahedron, projected to the
/// sphere. `subdivisions = 5` gives 10,242 vertices.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let (mut vertices, mut faces) = icosahedron_parts(1.0);
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut mid = |i: usize, j: usize| {
                *midpoints.entry((i.min(j), i.max(j))).or_insert_with(|| {
                    vertices.push(((vertices[i] + vertices[j]) * 0.5).normalize());
                    vertices.len() - 1
                })
            };
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            next.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|p| p * radius).collect();
    TriangleMesh::new(vertices, faces).expect("icosphere is a valid mesh")
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh, MeshError> {
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::Off => parse_off(&text),
        MeshFormat::Obj => parse_obj(&text),
    }
}

/// Load a mesh, picking the format from the file extension.
pub fn load_mesh_auto(path: &Path) -> Result<TriangleMesh, MeshError> {
    load_mesh(path, MeshFormat::from_path(path)?)
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, line)| {
                let line = line.split('#').next().unwrap_or("");
                line.split_whitespace().map(move |t| (i + 1, t))
            })
            .collect();
        Tokens { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or(self.items.last())
            .map_or(0, |t| t.0)
    }

    fn next_str(&mut self) -> Result<&'a str, MeshError> {
        let line = self.line();
        let t = self.items.get(self.pos).ok_or(MeshError::Parse {
            line,
            message: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(t.1)
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, MeshError> {
        let line = self.line();
        let s = self.next_str()?;
        s.parse().map_err(|_| MeshError::Parse {
            line,
            message: format!("expected {what}, found `{s}`"),
        })
    }
}

pub fn parse_off(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut tokens = Tokens::new(text);
    let header = tokens.next_str()?;
    if header != "OFF" {
        return Err(MeshError::Parse {
            line: 1,
            message: format!("expected `OFF` header, found `{header}`"),
        });
    }
    let nv: usize = tokens.next("vertex count")?;
    let nf: usize = tokens.next("face count")?;
    let _ne: usize = tokens.next("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = tokens.next("coordinate")?;
        let y = tokens.next("coordinate")?;
        let z = tokens.next("coordinate")?;
        vertices.push(Vec3::new(x, y, z));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = tokens.line();
        let k: usize = tokens.next("face arity")?;
        if k < 3 {
            return Err(MeshError::Parse {
                line,
                message: format!("face with {k} vertices"),
            });
        }
        let poly: Vec<usize> = (0..k)
            .map(|_| tokens.next("vertex index"))
            .collect::<Result<_, _>>()?;
        // Skip optional per-face colour values up to the end of the line.
        while tokens.items.get(tokens.pos).is_some_and(|t| t.0 == line) {
            tokens.pos += 1;
        }
        fan(&poly, &mut faces);
    }
    TriangleMesh::new(vertices, faces)
}

fn fan(poly: &[usize], faces: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len() - 1 {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("");
        let mut parts = line.split_whitespace();
        let err = |message: String| MeshError::Parse {
            line: line_no,
            message,
        };
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse().map_err(|_| err(format!("bad coordinate `{s}`"))))
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(err("vertex needs three coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let poly: Vec<usize> = parts
                    .map(|s| {
                        let idx = s.split('/').next().unwrap_or("");
                        let k: i64 = idx.parse().map_err(|_| err(format!("bad index `{s}`")))?;
                        match k {
                            0 => Err(err("OBJ indices are 1-based".into())),
                            k if k < 0 => usize::try_from(vertices.len() as i64 + k)
                                .map_err(|_| err(format!("relative index {k} out of range"))),
                            k => Ok(k as usize - 1),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if poly.len() < 3 {
                    return Err(err(format!("face with {} vertices", poly.len())));
                }
                fan(&poly, &mut faces);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn off_string(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF\n{} {} {}", mesh.n_vertices(), mesh.n_faces(), mesh.edges().len());
    for p in mesh.vertices() {
        // `Display` for f64 prints the shortest string that parses back exactly.
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in mesh.faces() {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    out
}

pub fn save_off(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    fs::write(path, off_string(mesh))?;
    Ok(())
}

pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for p in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
    }
    out
}

pub fn save_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    fs::write(path, obj_string(mesh))?;
    Ok(())
}

/// Map `t` in [0, 1] to an RGB colour (blue → cyan → yellow → red).
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [
        [0.10, 0.15, 0.60],
        [0.10, 0.75, 0.85],
        [0.95, 0.90, 0.20],
        [0.80, 0.10, 0.10],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let s = t * (STOPS.len() - 1) as f64;
    let k = (s.floor() as usize).min(STOPS.len() - 2);
    let w = s - k as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (255.0 * (STOPS[k][c] * (1.0 - w) + STOPS[k + 1][c] * w)).round() as u8;
    }
    rgb
}

/// ASCII PLY with named per-vertex scalar properties. When `color_by` names
/// one of the scalars, vertices are also coloured by its normalised value.
pub fn write_ply<W: Write>(
    mesh: &TriangleMesh,
    scalars: &[(&str, &[f64])],
    color_by: Option<usize>,
    out: W,
) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    let n = mesh.n_vertices();
    for (name, values) in scalars {
        if values.len() != n {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("scalar `{name}` has {} values for {n} vertices", values.len()),
            ));
        }
    }
    let range = color_by.map(|k| {
        let values = scalars[k].1;
        let finite = values.iter().copied().filter(|x| x.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        (k, lo, if hi > lo { hi - lo } else { 1.0 })
    });
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {n}")?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    for (name, _) in scalars {
        writeln!(w, "property double {name}")?;
    }
    if range.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header", mesh.n_faces())?;
    for (v, p) in mesh.vertices().iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        for (_, values) in scalars {
            write!(w, " {}", values[v])?;
        }
        if let Some((k, lo, span)) = range {
            let [r, g, b] = colormap((scalars[k].1[v] - lo) / span);
            write!(w, " {r} {g} {b}")?;
        }
        writeln!(w)?;
    }
    for [a, b, c] in mesh.faces() {
        writeln!(w, "3 {a} {b} {c}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_right_triangle() -> TriangleMesh {
        TriangleMesh::new(
            vec![Vec3::new(0., 0., 0.), Vec3::new(1., 0., 0.), Vec3::new(0., 1., 0.)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn single_triangle_off() {
        let mesh = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(mesh.n_faces(), 1);
        assert_eq!(mesh.n_boundary_edges(), 3);
    }

    #[test]
    fn off_index_out_of_range() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n").unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { face: 0, index: 3, count: 3 }));
        assert_eq!(err.code(), "index-out-of-range");
    }

    #[test]
    fn off_parse_errors_carry_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 zero\n").unwrap_err();
        assert!(matches!(err, MeshError::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_off("PLY\n"), Err(MeshError::Parse { .. })));
    }

    #[test]
    fn non_manifold_edge_rejected() {
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 1., 0.),
            Vec3::new(0., -1., 0.),
            Vec3::new(0., 0., 1.),
        ];
        let err = TriangleMesh::new(v, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]).unwrap_err();
        assert!(matches!(err, MeshError::NonManifoldEdge(0, 1)), "{err}");
    }

    #[test]
    fn inconsistent_orientation_rejected() {
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 1., 0.),
            Vec3::new(0., -1., 0.),
        ];
        let err = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3]]).unwrap_err();
        assert_eq!(err.code(), "inconsistent-orientation");
    }

    #[test]
    fn degenerate_face_rejected() {
        let v = vec![
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 1., 0.),
            Vec3::new(2., 0., 0.),
        ];
        let err = TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1]]).unwrap_err();
        assert!(matches!(err, MeshError::DegenerateFace { face: 1, .. }));
    }

    #[test]
    fn obj_quads_and_relative_indices() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let mesh = parse_obj(text).unwrap();
        assert_eq!(mesh.n_faces(), 2);
        let rel = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(rel.face(0), [0, 1, 2]);
        assert!(parse_obj("v 0 0 0\nf 0 1 2\n").is_err());
    }

    #[test]
    fn right_triangle_mass() {
        let m = mass_matrix(&unit_right_triangle());
        for &w in m.weights() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_unit_grid_mass() {
        let mesh = generate_surface(&SurfaceSpec::flat(2, 2)).unwrap();
        assert!((mass_matrix(&mesh).total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_surface_normals_point_up() {
        let mesh = generate_surface(&SurfaceSpec::flat(28, 28)).unwrap();
        assert_eq!(mesh.n_vertices(), 784);
        for f in 0..mesh.n_faces() {
            assert!((mesh.face_normal(f) - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn flat_grid_cell_areas() {
        let spec = SurfaceSpec::flat(5, 4);
        let mass = mass_matrix(&generate_surface(&spec).unwrap());
        let (hu, hv) = (1.0 / 4.0, 1.0 / 3.0);
        // Interior vertices touch six half-cells.
        assert!((mass.weights()[spec.index(2, 1)] - hu * hv).abs() < 1e-15);
        // The split diagonal starts at (0, 0), so that corner touches both halves
        // of its cell while the (n_u - 1, 0) corner touches only one.
        assert!((mass.weights()[0] - hu * hv / 3.0).abs() < 1e-15);
        assert!((mass.weights()[spec.index(4, 0)] - hu * hv / 6.0).abs() < 1e-15);
    }

    #[test]
    fn bump_peak_at_nearest_grid_point() {
        let spec = SurfaceSpec::gaussian_bump(21, 21, [0.5, 0.5], 0.3, 0.2);
        let mesh = generate_surface(&spec).unwrap();
        let (arg, zmax) = mesh
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.z.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(arg, spec.index(10, 10));
        assert!((zmax - 0.3).abs() < 1e-15);
    }

    #[test]
    fn resolution_too_small() {
        let err = generate_surface(&SurfaceSpec::flat(1, 5)).unwrap_err();
        assert!(matches!(err, MeshError::ResolutionTooSmall(1, 5)));
    }

    #[test]
    fn surface_spec_json() {
        let spec = SurfaceSpec::from_json(
            r#"{"function": "gaussian_bumps",
                "bumps": [{"center": [0.3, 0.3], "height": 0.2, "sigma": 0.15}],
                "resolution": [16, 12]}"#,
        )
        .unwrap();
        assert_eq!(spec.resolution, [16, 12]);
        assert_eq!(spec.extent, 1.0);
        let back: SurfaceSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(SurfaceSpec::from_json(r#"{"function": "torus", "resolution": [4, 4]}"#).is_err());
    }

    #[test]
    fn icosahedron_topology() {
        let ico = icosahedron(1.0);
        assert_eq!((ico.n_vertices(), ico.n_faces(), ico.n_boundary_edges()), (12, 20, 0));
        assert!((ico.vertex(0) - Vec3::z()).norm() < 1e-15);
        assert!((ico.vertex(11) + Vec3::z()).norm() < 1e-15);
        for f in 0..20 {
            assert!(ico.face_normal(f).dot(&ico.face_centroid(f)) > 0.0);
        }
    }

    #[test]
    fn ply_has_colour_channels() {
        let mesh = unit_right_triangle();
        let d = [0.0, 1.0, 2.0];
        let mut buf = Vec::new();
        write_ply(&mesh, &[("distance", &d)], Some(0), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("property double distance"));
        assert!(text.contains("property uchar red"));
        assert_eq!(text.lines().count(), 13 + 3 + 1);
    }
}
