//! Oracles shared by the integration targets. Nothing here calls into the
//! library's interpolation or assembly code.
#![allow(dead_code)]

use std::f64::consts::TAU;

use ptconv::geodesic::GeodesicField;
use ptconv::kernel::{build_basis, KernelBasis, PolarGrid};
use ptconv::mesh::{generate_surface, SurfaceSpec, TriangleMesh, Vec3};
use ptconv::transport::build_frames;

/// Template value at Euclidean offset `(dx, dy)`: linear in radius between
/// ring centres (held flat inside the first and outside the last), linear in
/// angle between sector centres with wrap-around, zero outside the disc.
/// Weights are ring-major.
pub fn polar_lookup(weights: &[f64], n_r: usize, n_theta: usize, radius: f64, dx: f64, dy: f64) -> f64 {
    let r = dx.hypot(dy);
    if r > radius * (1.0 + 1e-9) {
        return 0.0;
    }
    let at = |ring: usize, sector: usize| weights[ring * n_theta + sector % n_theta];
    let ring_pos = (r * n_r as f64 / radius - 0.5).clamp(0.0, (n_r - 1) as f64);
    let r0 = ring_pos.floor() as usize;
    let r1 = (r0 + 1).min(n_r - 1);
    let fr = ring_pos - r0 as f64;
    if r == 0.0 {
        return (0..n_theta).map(|s| at(0, s)).sum::<f64>() / n_theta as f64;
    }
    let angle = dy.atan2(dx).rem_euclid(TAU);
    let sector_pos = angle * n_theta as f64 / TAU;
    let s0 = sector_pos.floor() as usize;
    let fs = sector_pos - s0 as f64;
    let ring_value = |ring: usize| (1.0 - fs) * at(ring, s0) + fs * at(ring, s0 + 1);
    (1.0 - fr) * ring_value(r0) + fr * ring_value(r1)
}

/// Square `side × side` grid over the unit square with every frame aligned
/// to +u, so transported coordinates are plain Euclidean offsets.
pub fn aligned_flat_basis(side: usize, n_r: usize, n_theta: usize, radius: f64) -> (SurfaceSpec, TriangleMesh, KernelBasis) {
    let spec = SurfaceSpec::flat(side, side);
    let mesh = generate_surface(&spec).unwrap();
    let field = GeodesicField::from_directions(&mesh, &vec![Vec3::x(); mesh.n_faces()]);
    let frames = build_frames(&mesh, &field).unwrap();
    let grid = PolarGrid::new(n_r, n_theta, radius).unwrap();
    let basis = build_basis(&mesh, &frames, &field, 0, grid).unwrap();
    (spec, mesh, basis)
}

/// Dense cross-correlation on a `side × side` image with spacing `h`:
/// `out[i,j] = Σ h² w(Δ) f[i+di, j+dj]`, with the stencil sampled from
/// [`polar_lookup`]. Only pixels at least `margin` cells from the border are
/// produced; others are `None`.
pub fn dense_correlation(
    image: &[f64],
    side: usize,
    weights: &[f64],
    n_r: usize,
    n_theta: usize,
    radius: f64,
    margin: usize,
) -> Vec<Option<f64>> {
    let h = 1.0 / (side - 1) as f64;
    let reach = (radius / h).ceil() as i64;
    let mut stencil = Vec::new();
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let w = polar_lookup(weights, n_r, n_theta, radius, di as f64 * h, dj as f64 * h);
            if w != 0.0 {
                stencil.push((di, dj, w));
            }
        }
    }
    let mut out = vec![None; side * side];
    for j in margin..side - margin {
        for i in margin..side - margin {
            let mut acc = 0.0;
            for &(di, dj, w) in &stencil {
                let (ii, jj) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
                acc += w * h * h * image[jj * side + ii];
            }
            out[j * side + i] = Some(acc);
        }
    }
    out
}

/// `max |a - b| / max |b|` over the entries where the oracle is defined.
pub fn relative_linf(got: &[f64], oracle: &[Option<f64>]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (g, o) in got.iter().zip(oracle) {
        if let Some(o) = o {
            diff = diff.max((g - o).abs());
            scale = scale.max(o.abs());
        }
    }
    diff / scale
}

/// Smooth test image with features in both directions.
pub fn test_image(side: usize) -> Vec<f64> {
    let h = 1.0 / (side - 1) as f64;
    (0..side * side)
        .map(|k| {
            let (u, v) = ((k % side) as f64 * h, (k / side) as f64 * h);
            (7.0 * u).sin() * (4.0 * v + 0.3).cos() + 0.5 * (u - 0.4) * (v + 0.2) + if u + 0.5 * v > 0.7 { 0.6 } else { 0.0 }
        })
        .collect()
}
