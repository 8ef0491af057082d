//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The page draws a height-field surface seen from above and offers three
//! interactions: geodesic distance from a clicked vertex, the transported
//! edge kernel centred at a clicked vertex under a rotation slider, and the
//! filter response to a square pattern under an orientation slider.

use std::f64::consts::PI;

use wasm_bindgen::prelude::*;

use ptconv::conv::ptc_apply;
use ptconv::geodesic::{fast_marching, GeodesicField};
use ptconv::kernel::{assemble, build_basis, edge_detector_template, KernelBasis, PolarGrid};
use ptconv::mesh::{generate_surface, mass_matrix, MassMatrix, SurfaceSpec, TriangleMesh};
use ptconv::transport::build_frames;

/// Kernel radius in grid cells.
const RADIUS_CELLS: f64 = 4.0;

#[wasm_bindgen]
pub struct Demo {
    spec: SurfaceSpec,
    mesh: TriangleMesh,
    mass: MassMatrix,
    basis: KernelBasis,
    pattern: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    /// A `side × side` grid with a centred bump of the given height. The
    /// direction field radiates from the corner at the origin.
    #[wasm_bindgen(constructor)]
    pub fn new(side: usize, height: f64) -> Result<Demo, String> {
        let spec = SurfaceSpec::gaussian_bump(side, side, [0.5, 0.5], height, 0.25);
        let mesh = generate_surface(&spec).map_err(|e| e.to_string())?;
        let field: GeodesicField = fast_marching(&mesh, &[0]).map_err(|e| e.to_string())?;
        let frames = build_frames(&mesh, &field).map_err(|e| e.to_string())?;
        let radius = RADIUS_CELLS / (side - 1) as f64;
        let grid = PolarGrid::new(4, 16, radius).map_err(|e| e.to_string())?;
        let basis = build_basis(&mesh, &frames, &field, 0, grid).map_err(|e| e.to_string())?;
        let pattern = mesh
            .uv()
            .expect("generated surfaces carry (u, v)")
            .iter()
            .map(|p| f64::from((0.3..=0.7).contains(&p[0]) && (0.3..=0.7).contains(&p[1])))
            .collect();
        Ok(Demo {
            mass: mass_matrix(&mesh),
            spec,
            mesh,
            basis,
            pattern,
        })
    }

    pub fn side(&self) -> usize {
        self.spec.resolution[0]
    }

    /// Vertex id of grid cell `(i, j)`, row-major in `j`.
    pub fn vertex(&self, i: usize, j: usize) -> usize {
        self.spec.index(i, j)
    }

    /// Per-vertex heights, for shading.
    pub fn heights(&self) -> Vec<f64> {
        self.mesh.vertices().iter().map(|p| p.z).collect()
    }

    /// The square input pattern the edge filter runs on.
    pub fn pattern(&self) -> Vec<f64> {
        self.pattern.clone()
    }

    /// Geodesic distance from `source` to every vertex.
    pub fn distances(&self, source: usize) -> Result<Vec<f64>, String> {
        fast_marching(&self.mesh, &[source])
            .map(|f| f.distance().to_vec())
            .map_err(|e| e.to_string())
    }

    /// The edge kernel transported to `centre` and turned by `rotation`
    /// radians, as a per-vertex image.
    pub fn kernel_at(&self, centre: usize, rotation: f64) -> Result<Vec<f64>, String> {
        if centre >= self.mesh.n_vertices() {
            return Err(format!("vertex {centre} out of range"));
        }
        let k = assemble(&self.basis, &self.edge_template(0.0)?, 1.0, rotation, false).map_err(|e| e.to_string())?;
        let mut image = vec![0.0; self.mesh.n_vertices()];
        let (cols, vals) = k.centre_rows().row(centre);
        for (&c, &v) in cols.iter().zip(vals) {
            image[c] = v;
        }
        Ok(image)
    }

    /// Response of the edge filter at `orientation` radians to the square.
    pub fn edge_response(&self, orientation: f64) -> Result<Vec<f64>, String> {
        let k = assemble(&self.basis, &self.edge_template(orientation)?, 1.0, 0.0, false).map_err(|e| e.to_string())?;
        ptc_apply(&k, &self.mass, &self.pattern).map_err(|e| e.to_string())
    }
}

impl Demo {
    fn edge_template(&self, orientation: f64) -> Result<ptconv::kernel::KernelTemplate, String> {
        let g = self.basis.grid();
        edge_detector_template(0, orientation.rem_euclid(2.0 * PI), g.radius, g.n_r, g.n_theta).map_err(|e| e.to_string())
    }
}
