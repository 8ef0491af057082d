//! Field-aligned frames, edge transition matrices, and the discrete
//! parallel transport and log maps built on them.
//!
//! Every face carries an orthonormal frame `(b1, b2, n)` whose first axis
//! follows the transport direction field. Transport along the field is then
//! coefficient preservation: a vector with coordinates `(a1, a2)` in the
//! anchor's frame is carried to the vector with the same coordinates in the
//! destination frame.

use std::io::{self, BufWriter, Write};

use nalgebra::{Matrix3, Rotation3, Unit};
use thiserror::Error;

use crate::geodesic::{distance_between, GeodesicField};
use crate::mesh::{TriangleMesh, Vec3};

/// Columns are `b1`, `b2`, `n`.
pub type Frame = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("face {0} has no transport direction after singular fill-in")]
    ZeroDirection(usize),
    #[error("faces {0} and {1} do not share an edge")]
    NotAdjacent(usize, usize),
}

/// Coordinates of a tangent vector in a vertex frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TangentCoords {
    pub a1: f64,
    pub a2: f64,
}

impl TangentCoords {
    pub const ZERO: TangentCoords = TangentCoords { a1: 0.0, a2: 0.0 };

    pub fn new(a1: f64, a2: f64) -> Self {
        TangentCoords { a1, a2 }
    }

    pub fn from_polar(r: f64, phi: f64) -> Self {
        TangentCoords {
            a1: r * phi.cos(),
            a2: r * phi.sin(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.a1.hypot(self.a2)
    }

    /// Angle in `(-π, π]` measured from `b1` towards `b2`.
    pub fn angle(&self) -> f64 {
        self.a2.atan2(self.a1)
    }

    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        TangentCoords {
            a1: c * self.a1 - s * self.a2,
            a2: s * self.a1 + c * self.a2,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        TangentCoords {
            a1: s * self.a1,
            a2: s * self.a2,
        }
    }
}

/// Per-face frames aligned with a direction field, plus vertex frames
/// obtained from angle-weighted face averages.
#[derive(Clone, Debug)]
pub struct FrameField {
    face_frames: Vec<Frame>,
    vertex_frames: Vec<Frame>,
}

impl FrameField {
    pub fn face_frame(&self, f: usize) -> &Frame {
        &self.face_frames[f]
    }

    pub fn vertex_frame(&self, v: usize) -> &Frame {
        &self.vertex_frames[v]
    }

    pub fn face_frames(&self) -> &[Frame] {
        &self.face_frames
    }

    pub fn vertex_frames(&self) -> &[Frame] {
        &self.vertex_frames
    }

    pub fn b1(&self, v: usize) -> Vec3 {
        self.vertex_frames[v].column(0).into()
    }

    pub fn b2(&self, v: usize) -> Vec3 {
        self.vertex_frames[v].column(1).into()
    }

    pub fn normal(&self, v: usize) -> Vec3 {
        self.vertex_frames[v].column(2).into()
    }

    /// The 3D tangent vector with coordinates `c` at vertex `v`.
    pub fn to_world(&self, v: usize, c: TangentCoords) -> Vec3 {
        self.b1(v) * c.a1 + self.b2(v) * c.a2
    }

    /// Coordinates of the tangential part of `w` at vertex `v`.
    pub fn to_coords(&self, v: usize, w: &Vec3) -> TangentCoords {
        TangentCoords::new(self.b1(v).dot(w), self.b2(v).dot(w))
    }
}

/// ASCII PLY of the vertex frames as line glyphs: from every vertex a red
/// segment of length `scale` along `b1` and a green one of half that length
/// along `b2`.
pub fn write_frame_glyphs<W: Write>(mesh: &TriangleMesh, frames: &FrameField, scale: f64, out: W) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    let n = mesh.n_vertices();
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", 3 * n)?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(w, "element edge {}", 2 * n)?;
    writeln!(w, "property int vertex1\nproperty int vertex2")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for v in 0..n {
        let p = mesh.vertex(v);
        for (q, rgb) in [
            (p, "255 255 255"),
            (p + frames.b1(v) * scale, "220 40 40"),
            (p + frames.b2(v) * (0.5 * scale), "40 180 60"),
        ] {
            writeln!(w, "{} {} {} {rgb}", q.x, q.y, q.z)?;
        }
    }
    for v in 0..n {
        writeln!(w, "{} {} 220 40 40", 3 * v, 3 * v + 1)?;
        writeln!(w, "{} {} 40 180 60", 3 * v, 3 * v + 2)?;
    }
    w.flush()
}

fn frame_from(b1: Vec3, n: Vec3) -> Frame {
    let b2 = n.cross(&b1);
    Matrix3::from_columns(&[b1, b2, n])
}

/// Nearest rotation to `m` (polar factor), forced to be proper.
fn polar_rotation(m: &Matrix3<f64>) -> Frame {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the axis belonging to the smallest singular value.
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap();
        let mut u = u;
        u.column_mut(k).neg_mut();
        r = u * v_t;
    }
    r
}

pub fn build_frames(mesh: &TriangleMesh, field: &GeodesicField) -> Result<FrameField, TransportError> {
    let grad = field.face_gradient();
    let mut face_frames = Vec::with_capacity(mesh.n_faces());
    for f in 0..mesh.n_faces() {
        let n = mesh.face_normal(f);
        let t = grad[f] - n * n.dot(&grad[f]);
        let len = t.norm();
        if len < 1e-12 {
            return Err(TransportError::ZeroDirection(f));
        }
        face_frames.push(frame_from(t / len, n));
    }
    let vertex_frames = (0..mesh.n_vertices())
        .map(|v| {
            let sum: Matrix3<f64> = mesh
                .vertex_faces(v)
                .iter()
                .map(|&f| face_frames[f] * mesh.corner_angle(f, v))
                .sum();
            polar_rotation(&sum)
        })
        .collect();
    Ok(FrameField {
        face_frames,
        vertex_frames,
    })
}

/// The rotation about the shared edge of `from` and `to` that unfolds face
/// `from` into the plane of `to` (the discrete Levi-Civita transport across
/// the edge).
pub fn hinge_rotation(mesh: &TriangleMesh, from: usize, to: usize) -> Matrix3<f64> {
    let shared = mesh.face_edges(from).into_iter().find(|&e| {
        let edge = &mesh.edges()[e];
        edge.faces.contains(&to)
    });
    let Some(e) = shared else {
        return Matrix3::identity();
    };
    let [a, b] = mesh.edges()[e].vertices;
    let axis = Unit::new_normalize(mesh.vertex(b) - mesh.vertex(a));
    let n_from = mesh.face_normal(from);
    let n_to = mesh.face_normal(to);
    let angle = n_from.cross(&n_to).dot(&axis).atan2(n_from.dot(&n_to));
    Rotation3::from_axis_angle(&axis, angle).into_inner()
}

/// Orthonormal transition matrices `R_st` with `R_st F_t = F_s` for every
/// interior edge.
#[derive(Clone, Debug)]
pub struct TransitionSet {
    // (s, t, R_st) with s = edge.faces[0], t = edge.faces[1].
    transitions: Vec<(usize, usize, Matrix3<f64>)>,
    by_edge: Vec<Option<usize>>,
}

impl TransitionSet {
    pub fn build(mesh: &TriangleMesh, frames: &FrameField) -> Self {
        let mut transitions = Vec::new();
        let mut by_edge = vec![None; mesh.edges().len()];
        for (e, edge) in mesh.edges().iter().enumerate() {
            if edge.is_boundary() {
                continue;
            }
            let [s, t] = edge.faces;
            let r = frames.face_frame(s) * frames.face_frame(t).transpose();
            by_edge[e] = Some(transitions.len());
            transitions.push((s, t, r));
        }
        TransitionSet { transitions, by_edge }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize, Matrix3<f64>)> {
        self.transitions.iter()
    }

    /// `R_st` for adjacent faces `s`, `t`.
    pub fn get(&self, mesh: &TriangleMesh, s: usize, t: usize) -> Result<Matrix3<f64>, TransportError> {
        let e = mesh
            .face_edges(s)
            .into_iter()
            .find(|&e| mesh.edges()[e].faces.contains(&t) && s != t)
            .ok_or(TransportError::NotAdjacent(s, t))?;
        let k = self.by_edge[e].ok_or(TransportError::NotAdjacent(s, t))?;
        let (s0, _, r) = &self.transitions[k];
        Ok(if *s0 == s { *r } else { r.transpose() })
    }
}

/// Parallel transport of `v` from the field anchor to vertex `x`: in the
/// aligned frame field the coefficients are unchanged.
pub fn transport_vector(_frames: &FrameField, v: TangentCoords, _x: usize) -> TangentCoords {
    v
}

/// Result of the discrete log map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMap {
    pub coords: TangentCoords,
    /// Set when `y - x` was (nearly) normal to the surface at `x` and the
    /// direction came from the first edge towards `y` instead.
    pub fallback: bool,
}

/// `exp_x^{-1}(y)` in the vertex frame of `x`; the magnitude is the geodesic
/// distance, solved here by a fast march from `x` stopped at `y`.
pub fn log_map(mesh: &TriangleMesh, frames: &FrameField, x: usize, y: usize) -> LogMap {
    if x == y {
        return LogMap {
            coords: TangentCoords::ZERO,
            fallback: false,
        };
    }
    let d = distance_between(mesh, x, y);
    log_map_with_distance(mesh, frames, x, y, d)
}

/// [`log_map`] with the geodesic distance `d(x, y)` supplied by the caller.
pub fn log_map_with_distance(mesh: &TriangleMesh, frames: &FrameField, x: usize, y: usize, distance: f64) -> LogMap {
    if x == y {
        return LogMap {
            coords: TangentCoords::ZERO,
            fallback: false,
        };
    }
    let px = mesh.vertex(x);
    let chord = mesh.vertex(y) - px;
    let mut dir = frames.to_coords(x, &chord);
    let mut fallback = false;
    if dir.norm() <= 1e-9 * chord.norm() {
        // Direction of the edge out of x that heads most directly to y.
        let py = mesh.vertex(y);
        let w = mesh
            .vertex_neighbors(x)
            .iter()
            .copied()
            .min_by(|&a, &b| (mesh.vertex(a) - py).norm().total_cmp(&(mesh.vertex(b) - py).norm()))
            .expect("vertex has neighbours");
        dir = frames.to_coords(x, &(mesh.vertex(w) - px));
        fallback = true;
    }
    let len = dir.norm();
    let coords = if len > 0.0 { dir.scaled(distance / len) } else { TangentCoords::ZERO };
    LogMap { coords, fallback }
}
