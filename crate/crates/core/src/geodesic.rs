//! Geodesic distance by fast marching, the per-face direction field derived
//! from it, singularity detection and multi-field filter assignment.
//!
//! The marcher accepts vertices in nondecreasing distance order. Each newly
//! accepted vertex updates its untouched neighbours through every incident
//! triangle whose third corner is already accepted. Two local solvers are
//! used:
//!
//! * a point-source update: when both known corners inherit their value from
//!   the same source vertex, the triangle is unfolded into the plane and the
//!   source is placed at the intersection of the two distance circles. This
//!   is exact on developable patches and removes the large first-ring error
//!   of the planar update around point sources.
//! * the classical planar-wave update (a unit-gradient linear function
//!   through both corners), with an upwind check, otherwise.
//!
//! Both fall back to the edge update `D(a) + |a - c|` when their causality
//! test fails (obtuse corners, fronts arriving from outside the triangle).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::Matrix2;
use ordered_float::OrderedFloat;
use thiserror::Error;

use crate::mesh::{TriangleMesh, Vec3};
use crate::transport::hinge_rotation;

/// Raw per-face gradients shorter than this are treated as vanishing.
const GRADIENT_EPS: f64 = 1e-3;

/// Default singularity angle threshold (30 degrees).
pub const DEFAULT_SINGULARITY_ANGLE: f64 = std::f64::consts::PI / 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeodesicError {
    #[error("source set is empty")]
    NoSources,
    #[error("source vertex {index} out of range for {count} vertices")]
    SourceOutOfRange { index: usize, count: usize },
    #[error("{} vertices are unreachable from the sources (first: {:?})", .0.len(), &.0[..(.0.len().min(8))])]
    Unreachable(Vec<usize>),
    #[error("no vector fields given")]
    NoFields,
    #[error("filter {filter} is assigned to field {field}, but only {count} fields exist")]
    MissingField {
        filter: usize,
        field: usize,
        count: usize,
    },
    #[error("explicit assignment covers {got} filters, expected {expected}")]
    AssignmentLength { got: usize, expected: usize },
}

/// Distance from a set of sources together with the direction field it
/// induces on faces.
#[derive(Clone, Debug)]
pub struct GeodesicField {
    sources: Vec<usize>,
    distance: Vec<f64>,
    face_gradient: Vec<Vec3>,
    singular_faces: Vec<usize>,
    accept_order: Vec<usize>,
}

impl GeodesicField {
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn distance(&self) -> &[f64] {
        &self.distance
    }

    /// Unit tangent direction per face; singular faces carry the filled-in
    /// direction (or zero where no direction could be propagated).
    pub fn face_gradient(&self) -> &[Vec3] {
        &self.face_gradient
    }

    /// Sorted ids of faces where the raw gradient was unreliable.
    pub fn singular_faces(&self) -> &[usize] {
        &self.singular_faces
    }

    pub fn is_singular(&self, face: usize) -> bool {
        self.singular_faces.binary_search(&face).is_ok()
    }

    /// Vertices in the order the marcher accepted them.
    pub fn accept_order(&self) -> &[usize] {
        &self.accept_order
    }

    /// Build a field from an arbitrary per-face direction field, projecting
    /// each direction onto its face. Used for constant (parallel) fields.
    pub fn from_directions(mesh: &TriangleMesh, directions: &[Vec3]) -> Self {
        assert_eq!(directions.len(), mesh.n_faces());
        let face_gradient = directions
            .iter()
            .enumerate()
            .map(|(f, d)| {
                let n = mesh.face_normal(f);
                let t = d - n * n.dot(d);
                let len = t.norm();
                if len > 0.0 {
                    t / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect::<Vec<_>>();
        let singular_faces = (0..mesh.n_faces())
            .filter(|&f| face_gradient[f] == Vec3::zeros())
            .collect();
        GeodesicField {
            sources: Vec::new(),
            distance: vec![0.0; mesh.n_vertices()],
            face_gradient,
            singular_faces,
            accept_order: Vec::new(),
        }
    }
}

type HeapEntry = Reverse<(OrderedFloat<f64>, usize)>;

/// Reusable fast-marching state. Buffers are sized to the mesh once and only
/// the touched entries are reset between runs, so many truncated local
/// solves cost time proportional to their neighbourhoods.
pub struct Marcher {
    dist: Vec<f64>,
    origin: Vec<usize>,
    accepted: Vec<bool>,
    touched: Vec<usize>,
    order: Vec<usize>,
    heap: BinaryHeap<HeapEntry>,
}

impl Marcher {
    pub fn new(n_vertices: usize) -> Self {
        Marcher {
            dist: vec![f64::INFINITY; n_vertices],
            origin: vec![usize::MAX; n_vertices],
            accepted: vec![false; n_vertices],
            touched: Vec::new(),
            order: Vec::new(),
            heap: BinaryHeap::new(),
        }
    }

    fn reset(&mut self) {
        for &v in &self.touched {
            self.dist[v] = f64::INFINITY;
            self.origin[v] = usize::MAX;
            self.accepted[v] = false;
        }
        self.touched.clear();
        self.order.clear();
        self.heap.clear();
    }

    fn offer(&mut self, v: usize, d: f64, origin: usize) {
        if d < self.dist[v] {
            if self.dist[v] == f64::INFINITY {
                self.touched.push(v);
            }
            self.dist[v] = d;
            self.origin[v] = origin;
            self.heap.push(Reverse((OrderedFloat(d), v)));
        }
    }

    /// March from `sources` until the front passes `radius` or `target` is
    /// accepted. Returns accepted vertices in acceptance order; their
    /// distances are available through [`Marcher::distance`] until the next
    /// run.
    pub fn run(
        &mut self,
        mesh: &TriangleMesh,
        sources: &[usize],
        radius: f64,
        target: Option<usize>,
    ) -> &[usize] {
        self.reset();
        for &s in sources {
            self.offer(s, 0.0, s);
        }
        while let Some(Reverse((OrderedFloat(d), v))) = self.heap.pop() {
            if self.accepted[v] || d > self.dist[v] {
                continue;
            }
            if d > radius {
                break;
            }
            self.accepted[v] = true;
            self.order.push(v);
            if target == Some(v) {
                break;
            }
            self.relax_around(mesh, v);
        }
        &self.order
    }

    pub fn distance(&self, v: usize) -> f64 {
        if self.accepted[v] {
            self.dist[v]
        } else {
            f64::INFINITY
        }
    }

    fn relax_around(&mut self, mesh: &TriangleMesh, v: usize) {
        let dv = self.dist[v];
        let pv = mesh.vertex(v);
        for &f in mesh.vertex_faces(v) {
            let face = mesh.face(f);
            let k = face.iter().position(|&i| i == v).unwrap();
            for (c, w) in [(face[(k + 1) % 3], face[(k + 2) % 3]), (face[(k + 2) % 3], face[(k + 1) % 3])] {
                if self.accepted[c] {
                    continue;
                }
                let pc = mesh.vertex(c);
                let mut best = dv + (pc - pv).norm();
                let mut origin = self.origin[v];
                if self.accepted[w] {
                    let dw = self.dist[w];
                    let pw = mesh.vertex(w);
                    let same_source = self.origin[v] == self.origin[w];
                    let candidate = if same_source {
                        point_source_update(pv, dv, pw, dw, pc).or_else(|| planar_update(pv, dv, pw, dw, pc))
                    } else {
                        planar_update(pv, dv, pw, dw, pc)
                    };
                    if let Some(t) = candidate {
                        if t < best {
                            best = t;
                            if !same_source && dw < dv {
                                origin = self.origin[w];
                            }
                        }
                    }
                }
                // Causality: nothing accepted later may undercut `v`.
                self.offer(c, best.max(dv), origin);
            }
        }
    }
}

/// Distance at `c` from a point source consistent with distances `da`, `db`
/// at `a`, `b`, after unfolding triangle `(a, b, c)` into the plane.
fn point_source_update(a: Vec3, da: f64, b: Vec3, db: f64, c: Vec3) -> Option<f64> {
    let ab = b - a;
    let len = ab.norm();
    let ex = ab / len;
    let ac = c - a;
    let cx = ac.dot(&ex);
    let cy = (ac.norm_squared() - cx * cx).max(0.0).sqrt();
    let sx = (da * da - db * db + len * len) / (2.0 * len);
    let sy2 = da * da - sx * sx;
    if sy2 < 0.0 || cy <= 0.0 {
        return None;
    }
    // The virtual source sits on the far side of `ab` from `c`.
    let sy = -sy2.sqrt();
    let t = -sy / (cy - sy);
    let cross = sx + t * (cx - sx);
    let slack = 1e-12 * len;
    if cross < -slack || cross > len + slack {
        return None;
    }
    Some(((cx - sx).powi(2) + (cy - sy).powi(2)).sqrt())
}

/// Planar-wave update: the largest `p` such that the linear function with
/// values `(da, db, p)` on `(a, b, c)` has unit gradient, provided the wave
/// reaches `c` from inside the triangle.
fn planar_update(a: Vec3, da: f64, b: Vec3, db: f64, c: Vec3) -> Option<f64> {
    let e1 = a - c;
    let e2 = b - c;
    let q = Matrix2::new(e1.dot(&e1), e1.dot(&e2), e1.dot(&e2), e2.dot(&e2));
    let qi = q.try_inverse()?;
    let ones = nalgebra::Vector2::new(1.0, 1.0);
    let d = nalgebra::Vector2::new(da, db);
    let qa = ones.dot(&(qi * ones));
    let qb = ones.dot(&(qi * d));
    let qc = d.dot(&(qi * d)) - 1.0;
    let disc = qb * qb - qa * qc;
    if disc < 0.0 {
        return None;
    }
    let p = (qb + disc.sqrt()) / qa;
    let alpha = qi * (ones * p - d);
    (alpha.x >= 0.0 && alpha.y >= 0.0 && p >= da.max(db)).then_some(p)
}

fn check_sources(mesh: &TriangleMesh, sources: &[usize]) -> Result<(), GeodesicError> {
    if sources.is_empty() {
        return Err(GeodesicError::NoSources);
    }
    let count = mesh.n_vertices();
    match sources.iter().find(|&&s| s >= count) {
        Some(&index) => Err(GeodesicError::SourceOutOfRange { index, count }),
        None => Ok(()),
    }
}

/// Geodesic distance from `sources` and the normalised per-face gradient.
pub fn fast_marching(mesh: &TriangleMesh, sources: &[usize]) -> Result<GeodesicField, GeodesicError> {
    check_sources(mesh, sources)?;
    let n = mesh.n_vertices();
    let mut marcher = Marcher::new(n);
    let accept_order = marcher.run(mesh, sources, f64::INFINITY, None).to_vec();
    let distance: Vec<f64> = (0..n).map(|v| marcher.distance(v)).collect();
    let unreached: Vec<usize> = (0..n).filter(|&v| distance[v].is_infinite()).collect();
    if !unreached.is_empty() {
        return Err(GeodesicError::Unreachable(unreached));
    }

    let mut is_source = vec![false; n];
    for &s in sources {
        is_source[s] = true;
    }
    let mut face_gradient = Vec::with_capacity(mesh.n_faces());
    let mut singular_faces = Vec::new();
    for f in 0..mesh.n_faces() {
        let g = face_gradient_of(mesh, f, &distance);
        let len = g.norm();
        if len < GRADIENT_EPS || mesh.face(f).iter().any(|&v| is_source[v]) {
            singular_faces.push(f);
            face_gradient.push(Vec3::zeros());
        } else {
            face_gradient.push(g / len);
        }
    }
    fill_singular(mesh, &mut face_gradient, &singular_faces);
    let mut sources = sources.to_vec();
    sources.sort_unstable();
    sources.dedup();
    Ok(GeodesicField {
        sources,
        distance,
        face_gradient,
        singular_faces,
        accept_order,
    })
}

/// Gradient of the linear interpolant of `values` over face `f`.
pub fn face_gradient_of(mesh: &TriangleMesh, f: usize, values: &[f64]) -> Vec3 {
    let face = mesh.face(f);
    let n = mesh.face_normal(f);
    let scale = 1.0 / (2.0 * mesh.face_area(f));
    (0..3)
        .map(|i| {
            let e = mesh.vertex(face[(i + 2) % 3]) - mesh.vertex(face[(i + 1) % 3]);
            n.cross(&e) * (values[face[i]] * scale)
        })
        .sum()
}

/// Replace directions on `singular` faces by the area-weighted mean of their
/// already-valid edge neighbours, sweeping until no face can be filled.
fn fill_singular(mesh: &TriangleMesh, grad: &mut [Vec3], singular: &[usize]) {
    let mut pending: Vec<usize> = singular.to_vec();
    while !pending.is_empty() {
        let mut filled = Vec::new();
        let mut still = Vec::new();
        for &f in &pending {
            let n = mesh.face_normal(f);
            let mut sum = Vec3::zeros();
            let mut weight = 0.0;
            for g in mesh.face_neighbors(f) {
                if grad[g] != Vec3::zeros() {
                    let a = mesh.face_area(g);
                    // Unfold the neighbour's direction into this face's plane.
                    sum += hinge_rotation(mesh, g, f) * grad[g] * a;
                    weight += a;
                }
            }
            let t = sum - n * n.dot(&sum);
            if weight > 0.0 && t.norm() > 1e-9 * weight {
                filled.push((f, t.normalize()));
            } else {
                still.push(f);
            }
        }
        if filled.is_empty() {
            break;
        }
        for (f, d) in filled {
            grad[f] = d;
        }
        pending = still;
    }
}

/// Faces whose direction turns by more than `angle_threshold` relative to
/// the direction of an edge neighbour unfolded across their shared edge,
/// together with faces touching a source and faces left without direction.
pub fn detect_singularities(mesh: &TriangleMesh, field: &GeodesicField, angle_threshold: f64) -> Vec<usize> {
    let grad = field.face_gradient();
    let mut is_source = vec![false; mesh.n_vertices()];
    for &s in field.sources() {
        is_source[s] = true;
    }
    (0..mesh.n_faces())
        .filter(|&f| {
            if mesh.face(f).iter().any(|&v| is_source[v]) || grad[f] == Vec3::zeros() {
                return true;
            }
            mesh.face_neighbors(f).any(|g| {
                grad[g] != Vec3::zeros() && {
                    let moved = hinge_rotation(mesh, g, f) * grad[g];
                    grad[f].angle(&moved) > angle_threshold
                }
            })
        })
        .collect()
}

/// Distances from `source` to every vertex within `radius`, in acceptance
/// order. Convenience wrapper allocating a fresh [`Marcher`].
pub fn local_distances(mesh: &TriangleMesh, source: usize, radius: f64) -> Vec<(usize, f64)> {
    let mut marcher = Marcher::new(mesh.n_vertices());
    local_distances_with(&mut marcher, mesh, source, radius)
}

pub fn local_distances_with(
    marcher: &mut Marcher,
    mesh: &TriangleMesh,
    source: usize,
    radius: f64,
) -> Vec<(usize, f64)> {
    let order = marcher.run(mesh, &[source], radius, None).to_vec();
    order.into_iter().map(|v| (v, marcher.distance(v))).collect()
}

/// Geodesic distance between two vertices, marching only until `to` is
/// reached.
pub fn distance_between(mesh: &TriangleMesh, from: usize, to: usize) -> f64 {
    let mut marcher = Marcher::new(mesh.n_vertices());
    marcher.run(mesh, &[from], f64::INFINITY, Some(to));
    marcher.distance(to)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FieldAssignment {
    RoundRobin,
    Explicit(Vec<usize>),
}

/// Several direction fields and the field each filter is transported along.
#[derive(Clone, Debug)]
pub struct VectorFieldSet {
    fields: Vec<GeodesicField>,
    assignment: Vec<usize>,
}

impl VectorFieldSet {
    pub fn new(fields: Vec<GeodesicField>, filters: usize, assignment: &FieldAssignment) -> Result<Self, GeodesicError> {
        if fields.is_empty() {
            return Err(GeodesicError::NoFields);
        }
        let count = fields.len();
        let assignment = match assignment {
            FieldAssignment::RoundRobin => (0..filters).map(|j| j % count).collect(),
            FieldAssignment::Explicit(a) => {
                if a.len() != filters {
                    return Err(GeodesicError::AssignmentLength {
                        got: a.len(),
                        expected: filters,
                    });
                }
                if let Some((filter, &field)) = a.iter().enumerate().find(|(_, &k)| k >= count) {
                    return Err(GeodesicError::MissingField { filter, field, count });
                }
                a.clone()
            }
        };
        Ok(VectorFieldSet { fields, assignment })
    }

    pub fn fields(&self) -> &[GeodesicField] {
        &self.fields
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn field_for(&self, filter: usize) -> &GeodesicField {
        &self.fields[self.assignment[filter]]
    }

    /// Number of filters on each field.
    pub fn filters_per_field(&self) -> Vec<usize> {
        let mut counts = vec![0; self.fields.len()];
        for &k in &self.assignment {
            counts[k] += 1;
        }
        counts
    }
}

pub fn build_field_set(
    mesh: &TriangleMesh,
    source_list: &[Vec<usize>],
    filters: usize,
    assignment: &FieldAssignment,
) -> Result<VectorFieldSet, GeodesicError> {
    if source_list.is_empty() {
        return Err(GeodesicError::NoFields);
    }
    if let FieldAssignment::Explicit(a) = assignment {
        // Validate before paying for the solves.
        if let Some((filter, &field)) = a.iter().enumerate().find(|(_, &k)| k >= source_list.len()) {
            return Err(GeodesicError::MissingField {
                filter,
                field,
                count: source_list.len(),
            });
        }
    }
    let fields = source_list
        .iter()
        .map(|s| fast_marching(mesh, s))
        .collect::<Result<Vec<_>, _>>()?;
    VectorFieldSet::new(fields, filters, assignment)
}
