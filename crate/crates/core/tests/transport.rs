use std::f64::consts::PI;

use proptest::prelude::*;
use ptconv::geodesic::{fast_marching, local_distances, GeodesicField};
use ptconv::mesh::{generate_surface, icosphere, SurfaceSpec, TriangleMesh, Vec3};
use ptconv::transport::{build_frames, log_map, log_map_with_distance, transport_vector, FrameField, TangentCoords, TransitionSet};

fn gram_deviation(f: &nalgebra::Matrix3<f64>) -> f64 {
    (f.transpose() * f - nalgebra::Matrix3::identity()).abs().max()
}

fn constant_field(mesh: &TriangleMesh, dir: Vec3) -> GeodesicField {
    GeodesicField::from_directions(mesh, &vec![dir; mesh.n_faces()])
}

fn frames_for(mesh: &TriangleMesh, source: usize) -> FrameField {
    build_frames(mesh, &fast_marching(mesh, &[source]).unwrap()).unwrap()
}

#[test]
fn frames_are_orthonormal_and_tangent() {
    let bump = generate_surface(&SurfaceSpec::gaussian_bump(20, 20, [0.5, 0.5], 0.4, 0.2)).unwrap();
    let sphere = icosphere(1.0, 3);
    for (mesh, src) in [(&bump, 0usize), (&bump, 210), (&sphere, 0)] {
        let frames = frames_for(mesh, src);
        for f in 0..mesh.n_faces() {
            let fr = frames.face_frame(f);
            assert!(gram_deviation(fr) <= 1e-9);
            let n = mesh.face_normal(f);
            assert!(fr.column(0).dot(&n).abs() <= 1e-9);
            assert!(fr.column(1).dot(&n).abs() <= 1e-9);
            assert!((fr.determinant() - 1.0).abs() <= 1e-9);
        }
        for v in 0..mesh.n_vertices() {
            assert!(gram_deviation(frames.vertex_frame(v)) <= 1e-9);
        }
    }
}

#[test]
fn flat_corner_frames_are_radial() {
    let mesh = generate_surface(&SurfaceSpec::flat(16, 16)).unwrap();
    let field = fast_marching(&mesh, &[0]).unwrap();
    let frames = build_frames(&mesh, &field).unwrap();
    for f in 0..mesh.n_faces() {
        let fr = frames.face_frame(f);
        let b1: Vec3 = fr.column(0).into();
        let b2: Vec3 = fr.column(1).into();
        let n: Vec3 = fr.column(2).into();
        assert!((n - Vec3::z()).norm() < 1e-12);
        assert!((b1 - field.face_gradient()[f]).norm() < 1e-12);
        assert!((b2 - Vec3::z().cross(&b1)).norm() < 1e-12);
        if !field.is_singular(f) {
            let radial = mesh.face_centroid(f).normalize();
            assert!(b1.angle(&radial) < 0.1, "face {f}");
        }
    }
}

#[test]
fn sphere_frames_follow_meridians() {
    let mesh = icosphere(1.0, 4);
    let frames = frames_for(&mesh, 0);
    let mut worst: f64 = 0.0;
    for f in 0..mesh.n_faces() {
        let c = mesh.face_centroid(f).normalize();
        if c.z.abs() > 0.9 {
            continue;
        }
        let theta = c.z.acos();
        let phi = c.y.atan2(c.x);
        let meridian = Vec3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), -theta.sin());
        worst = worst.max(frames.face_frame(f).column(0).into_owned().angle(&meridian).to_degrees());
    }
    assert!(worst < 5.0, "worst meridian deviation {worst}°");
}

#[test]
fn transitions_are_consistent() {
    let mesh = generate_surface(&SurfaceSpec::gaussian_bump(12, 12, [0.5, 0.5], 0.4, 0.25)).unwrap();
    let frames = frames_for(&mesh, 5);
    let set = TransitionSet::build(&mesh, &frames);
    assert_eq!(set.len(), mesh.edges().iter().filter(|e| !e.is_boundary()).count());
    for &(s, t, r) in set.iter() {
        assert!(gram_deviation(&r) <= 1e-9);
        assert!((r * frames.face_frame(t) - frames.face_frame(s)).abs().max() <= 1e-9);
        let n_s: Vec3 = frames.face_frame(s).column(2).into();
        let n_t: Vec3 = frames.face_frame(t).column(2).into();
        assert!((r * n_t - n_s).norm() <= 1e-9);
        let back = set.get(&mesh, t, s).unwrap();
        assert!((back - r.transpose()).abs().max() == 0.0);
    }
    assert!(set.get(&mesh, 0, mesh.n_faces() - 1).is_err());
}

/// Faces around an interior vertex in cyclic order.
fn face_ring(mesh: &TriangleMesh, v: usize) -> Vec<usize> {
    let faces = mesh.vertex_faces(v).to_vec();
    let mut ring = vec![faces[0]];
    while ring.len() < faces.len() {
        let last = *ring.last().unwrap();
        let next = faces
            .iter()
            .copied()
            .find(|&f| !ring.contains(&f) && mesh.face_neighbors(last).any(|g| g == f))
            .expect("closed fan");
        ring.push(next);
    }
    ring
}

#[test]
fn loop_transport_is_identity() {
    let flat = SurfaceSpec::flat(10, 10);
    let bump = SurfaceSpec::gaussian_bump(10, 10, [0.5, 0.5], 0.3, 0.3);
    for spec in [flat, bump] {
        let mesh = generate_surface(&spec).unwrap();
        let frames = frames_for(&mesh, 0);
        let set = TransitionSet::build(&mesh, &frames);
        for v in 0..mesh.n_vertices() {
            if mesh.is_boundary_vertex(v) {
                continue;
            }
            let ring = face_ring(&mesh, v);
            let mut acc = nalgebra::Matrix3::<f64>::identity();
            for k in 0..ring.len() {
                acc *= set.get(&mesh, ring[k], ring[(k + 1) % ring.len()]).unwrap();
            }
            assert!((acc - nalgebra::Matrix3::identity()).abs().max() <= 1e-9, "vertex {v}");
        }
    }
}

#[test]
fn transport_preserves_coefficients() {
    let mesh = generate_surface(&SurfaceSpec::gaussian_bump(9, 9, [0.5, 0.5], 0.3, 0.3)).unwrap();
    let frames = frames_for(&mesh, 0);
    for x in 0..mesh.n_vertices() {
        let v = transport_vector(&frames, TangentCoords::new(1.0, 0.0), x);
        assert_eq!(v, TangentCoords::new(1.0, 0.0));
        assert!((frames.to_world(x, v) - frames.b1(x)).norm() < 1e-15);
    }
}

#[test]
fn constant_field_transport_is_euclidean_translation() {
    let mesh = generate_surface(&SurfaceSpec::flat(12, 12)).unwrap();
    let dir = Vec3::new(0.6, 0.8, 0.0);
    let frames = build_frames(&mesh, &constant_field(&mesh, dir)).unwrap();
    let v = TangentCoords::new(0.3, -0.4);
    let at_anchor = frames.to_world(0, v);
    for x in 0..mesh.n_vertices() {
        let moved = frames.to_world(x, transport_vector(&frames, v, x));
        assert!((moved.norm() - 0.5).abs() < 1e-12);
        assert!((moved - at_anchor).norm() < 1e-12);
    }
}

#[test]
fn flat_log_map_is_subtraction() {
    let mesh = generate_surface(&SurfaceSpec::flat(9, 9)).unwrap();
    let frames = frames_for(&mesh, 0);
    let x = 40;
    assert_eq!(log_map(&mesh, &frames, x, x).coords, TangentCoords::ZERO);
    for y in [31, 41, 49, 22, 58, 0] {
        let lm = log_map(&mesh, &frames, x, y);
        assert!(!lm.fallback);
        let d = mesh.vertex(y) - mesh.vertex(x);
        assert!((lm.coords.norm() - d.norm()).abs() < 1e-12, "y = {y}");
        assert!((frames.to_world(x, lm.coords) - d).norm() < 1e-12);
    }
}

#[test]
fn flat_domain_reduction() {
    // exp_x0 ∘ (P_x0^x)⁻¹ ∘ exp_x⁻¹ (y) = x0 + (y − x) for a parallel field.
    let mesh = generate_surface(&SurfaceSpec::flat(14, 14)).unwrap();
    let frames = build_frames(&mesh, &constant_field(&mesh, Vec3::x())).unwrap();
    let x0 = 0;
    for x in [15, 50, 97, 150] {
        for (y, d) in local_distances(&mesh, x, 0.25) {
            let coords = log_map_with_distance(&mesh, &frames, x, y, d).coords;
            let at_anchor = mesh.vertex(x0) + frames.to_world(x0, coords);
            let expected = mesh.vertex(x0) + (mesh.vertex(y) - mesh.vertex(x));
            assert!((at_anchor - expected).norm() < 1e-12, "x {x} y {y}");
        }
    }
}

#[test]
fn sphere_log_map_magnitude() {
    let mesh = icosphere(1.0, 4);
    let frames = frames_for(&mesh, 0);
    let mut tested = 0;
    for y in 0..mesh.n_vertices() {
        let colat = mesh.vertex(y).z.clamp(-1.0, 1.0).acos();
        if (colat - 0.2).abs() > 0.03 {
            continue;
        }
        let r = log_map(&mesh, &frames, 0, y).coords.norm();
        assert!((r - colat).abs() <= 0.05 * colat, "vertex {y}: {r} vs {colat}");
        tested += 1;
    }
    assert!(tested >= 5);
}

proptest! {
    #[test]
    fn transported_norm_is_preserved(a1 in -5.0f64..5.0, a2 in -5.0f64..5.0, x in 0usize..81) {
        let mesh = generate_surface(&SurfaceSpec::gaussian_bump(9, 9, [0.3, 0.6], 0.3, 0.3)).unwrap();
        let frames = frames_for(&mesh, 4);
        let v = TangentCoords::new(a1, a2);
        let moved = transport_vector(&frames, v, x);
        prop_assert_eq!(moved.norm(), v.norm());
        prop_assert!((frames.to_world(x, moved).norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn rotation_preserves_norm(a1 in -5.0f64..5.0, a2 in -5.0f64..5.0, theta in -7.0f64..7.0) {
        let v = TangentCoords::new(a1, a2);
        prop_assert!((v.rotated(theta).norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
        let back = v.rotated(theta).rotated(-theta);
        prop_assert!((back.a1 - a1).abs() < 1e-12 && (back.a2 - a2).abs() < 1e-12);
    }
}

#[test]
fn pi_rotation_negates() {
    let v = TangentCoords::new(0.3, -0.2).rotated(PI);
    assert!((v.a1 + 0.3).abs() < 1e-15 && (v.a2 - 0.2).abs() < 1e-15);
}
