//! Compactly supported kernels on a polar grid, their transport to every
//! vertex, and assembly of the sparse convolution matrix.
//!
//! A [`KernelBasis`] records, for every centre vertex `x` and every `y` in
//! its geodesic disc, the tangent coordinates of `y` seen from `x` pulled
//! back to the anchor frame. Bilinear interpolation on the polar grid turns
//! those coordinates into per-bin weights, so an assembled kernel matrix is
//! linear in the template weights: `K = Σ_b w_b B_b`.
//!
//! Layout: matrices here are stored centre-major, one row per kernel
//! centre. Row `x` holds `k(x, ·)`, i.e. column `x` of the operator `K` in
//! `f ↦ Kᵀ M f`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesic::{local_distances_with, GeodesicField, Marcher};
use crate::mesh::{mass_matrix, TriangleMesh};
use crate::sparse::CsrMatrix;
use crate::transport::{log_map_with_distance, FrameField, TangentCoords};

/// Relative slack on the disc radius so lattice points lying on the circle
/// survive rounding in the marched distance.
const RADIUS_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("polar grid needs n_r >= 1, n_theta >= 1 and radius > 0 (got {n_r}, {n_theta}, {radius})")]
    BadGrid { n_r: usize, n_theta: usize, radius: f64 },
    #[error("{} vertices have no neighbour within the kernel radius (first: {:?})", .0.len(), &.0[..(.0.len().min(8))])]
    EmptyNeighborhood(Vec<usize>),
    #[error("anchor vertex {anchor} out of range for {count} vertices")]
    AnchorOutOfRange { anchor: usize, count: usize },
    #[error("scale must be nonzero and finite, got {0}")]
    BadScale(f64),
    #[error("template grid {template:?} does not match basis grid {basis:?}")]
    GridMismatch { template: (usize, usize), basis: (usize, usize) },
    #[error("template has {got} weights, expected {expected}")]
    WeightCount { got: usize, expected: usize },
    #[error("template weights must be finite")]
    NonFinite,
    #[error("edge detector needs n_theta >= 8, got {0}")]
    TooFewSectors(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template json: {0}")]
    Json(#[from] serde_json::Error),
}

/// `n_r` rings by `n_theta` sectors over the disc of radius `radius`.
///
/// Ring `i` is centred at radius `(i + 1/2) Δr`; sector `j` is centred at
/// angle `j Δθ` measured from `b1`, so sector 0 points along the field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub n_r: usize,
    pub n_theta: usize,
    pub radius: f64,
}

impl PolarGrid {
    pub fn new(n_r: usize, n_theta: usize, radius: f64) -> Result<Self, KernelError> {
        if n_r == 0 || n_theta == 0 || !(radius > 0.0) || !radius.is_finite() {
            return Err(KernelError::BadGrid { n_r, n_theta, radius });
        }
        Ok(PolarGrid { n_r, n_theta, radius })
    }

    pub fn n_bins(&self) -> usize {
        self.n_r * self.n_theta
    }

    pub fn bin(&self, ring: usize, sector: usize) -> usize {
        ring * self.n_theta + sector
    }

    pub fn ring_width(&self) -> f64 {
        self.radius / self.n_r as f64
    }

    pub fn sector_width(&self) -> f64 {
        TAU / self.n_theta as f64
    }

    pub fn ring_center(&self, ring: usize) -> f64 {
        (ring as f64 + 0.5) * self.ring_width()
    }

    pub fn sector_center(&self, sector: usize) -> f64 {
        sector as f64 * self.sector_width()
    }

    /// Area of the polar cell behind bin `b`.
    pub fn bin_area(&self, b: usize) -> f64 {
        let ring = (b / self.n_theta) as f64;
        let dr = self.ring_width();
        0.5 * self.sector_width() * ((ring + 1.0).powi(2) - ring.powi(2)) * dr * dr
    }

    /// Bilinear weights (linear in radius and in wrapped angle) of the point
    /// at polar coordinates `(r, phi)`. Empty outside the disc. At the
    /// origin the angle is undefined and the first ring shares the weight.
    pub fn interpolate(&self, r: f64, phi: f64) -> BinWeights {
        let mut out = BinWeights::default();
        if !(r <= self.radius * (1.0 + RADIUS_SLACK)) {
            return out;
        }
        let t = r / self.ring_width() - 0.5;
        let rings: [(usize, f64); 2] = if t <= 0.0 {
            [(0, 1.0), (0, 0.0)]
        } else if t >= (self.n_r - 1) as f64 {
            [(self.n_r - 1, 1.0), (0, 0.0)]
        } else {
            let i = t.floor() as usize;
            let w = t - i as f64;
            [(i, 1.0 - w), (i + 1, w)]
        };
        if r == 0.0 {
            let share = 1.0 / self.n_theta as f64;
            for j in 0..self.n_theta {
                out.push(self.bin(0, j), share);
            }
            return out;
        }
        let s = (phi / self.sector_width()).rem_euclid(self.n_theta as f64);
        let j0 = (s.floor() as usize).min(self.n_theta - 1);
        let ws = s - j0 as f64;
        let j1 = (j0 + 1) % self.n_theta;
        for (ring, wr) in rings {
            if wr == 0.0 {
                continue;
            }
            out.push(self.bin(ring, j0), wr * (1.0 - ws));
            out.push(self.bin(ring, j1), wr * ws);
        }
        out
    }
}

/// Up to `n_theta` (bin, weight) pairs; at most four away from the origin.
#[derive(Clone, Debug, Default)]
pub struct BinWeights {
    items: Vec<(usize, f64)>,
}

impl BinWeights {
    fn push(&mut self, bin: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        match self.items.iter_mut().find(|(b, _)| *b == bin) {
            Some(item) => item.1 += w,
            None => self.items.push((bin, w)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.items.iter().copied()
    }

    pub fn total(&self) -> f64 {
        self.items.iter().map(|x| x.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Learnable template weights on a polar grid at the anchor vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTemplate {
    pub anchor: usize,
    pub radius: f64,
    pub n_r: usize,
    pub n_theta: usize,
    /// Bin-major (`ring * n_theta + sector`).
    pub weights: Vec<f64>,
}

impl KernelTemplate {
    pub fn zeros(anchor: usize, grid: PolarGrid) -> Self {
        KernelTemplate {
            anchor,
            radius: grid.radius,
            n_r: grid.n_r,
            n_theta: grid.n_theta,
            weights: vec![0.0; grid.n_bins()],
        }
    }

    pub fn from_fn(anchor: usize, grid: PolarGrid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut t = KernelTemplate::zeros(anchor, grid);
        for ring in 0..grid.n_r {
            for sector in 0..grid.n_theta {
                t.weights[grid.bin(ring, sector)] = f(grid.ring_center(ring), grid.sector_center(sector));
            }
        }
        t
    }

    /// Isotropic `exp(-r² / σ²)` sampled at the ring centres.
    pub fn gaussian(anchor: usize, grid: PolarGrid, sigma: f64) -> Self {
        KernelTemplate::from_fn(anchor, grid, |r, _| (-(r * r) / (sigma * sigma)).exp())
    }

    pub fn grid(&self) -> Result<PolarGrid, KernelError> {
        PolarGrid::new(self.n_r, self.n_theta, self.radius)
    }

    fn validate(&self) -> Result<PolarGrid, KernelError> {
        let grid = self.grid()?;
        if self.weights.len() != grid.n_bins() {
            return Err(KernelError::WeightCount {
                got: self.weights.len(),
                expected: grid.n_bins(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(KernelError::NonFinite);
        }
        Ok(grid)
    }

    /// The continuous kernel at tangent coordinates `v` (bilinear on the grid,
    /// zero outside the disc).
    pub fn evaluate(&self, v: TangentCoords) -> f64 {
        let grid = PolarGrid {
            n_r: self.n_r,
            n_theta: self.n_theta,
            radius: self.radius,
        };
        grid.interpolate(v.norm(), v.angle())
            .iter()
            .map(|(b, w)| w * self.weights[b])
            .sum()
    }

    pub fn to_json(&self) -> Result<String, KernelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, KernelError> {
        let t: KernelTemplate = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        KernelTemplate::from_json(&fs::read_to_string(path)?)
    }
}

/// Odd-symmetric edge detector: `+1` on sectors whose centre lies within a
/// quarter turn of `orientation`, `-1` on the opposite half, zero on the
/// two boundary sectors, then shifted to zero mean under bin areas.
pub fn edge_detector_template(
    anchor: usize,
    orientation: f64,
    radius: f64,
    n_r: usize,
    n_theta: usize,
) -> Result<KernelTemplate, KernelError> {
    if n_theta < 8 {
        return Err(KernelError::TooFewSectors(n_theta));
    }
    let grid = PolarGrid::new(n_r, n_theta, radius)?;
    let mut t = KernelTemplate::from_fn(anchor, grid, |_, phi| {
        let c = (phi - orientation).cos();
        if c.abs() < 1e-12 {
            0.0
        } else {
            c.signum()
        }
    });
    let areas: Vec<f64> = (0..grid.n_bins()).map(|b| grid.bin_area(b)).collect();
    let mean = t.weights.iter().zip(&areas).map(|(w, a)| w * a).sum::<f64>() / areas.iter().sum::<f64>();
    for w in &mut t.weights {
        *w -= mean;
    }
    Ok(t)
}

/// Transported polar coordinates of every disc neighbour, per centre.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    grid: PolarGrid,
    anchor: usize,
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    coords: Vec<TangentCoords>,
    fallback: Vec<bool>,
    // Bin weights per neighbour entry under the identity transform.
    entry_ptr: Vec<usize>,
    entry_bins: Vec<u32>,
    entry_weights: Vec<f64>,
    mass: Vec<f64>,
}

/// Rotation, dilation and reflection applied to lookup coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub rotation: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        rotation: 0.0,
    };

    /// Lookup position `(|s| r, φ + θ)`, plus a half turn when `s < 0`.
    pub fn apply(&self, r: f64, phi: f64) -> (f64, f64) {
        let flip = if self.scale < 0.0 { PI } else { 0.0 };
        (self.scale.abs() * r, phi + self.rotation + flip)
    }
}

pub fn build_basis(
    mesh: &TriangleMesh,
    frames: &FrameField,
    field: &GeodesicField,
    anchor: usize,
    grid: PolarGrid,
) -> Result<KernelBasis, KernelError> {
    let n = mesh.n_vertices();
    if anchor >= n {
        return Err(KernelError::AnchorOutOfRange { anchor, count: n });
    }
    debug_assert_eq!(field.distance().len(), n);
    let mut marcher = Marcher::new(n);
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut coords = Vec::new();
    let mut fallback = Vec::new();
    let mut empty = Vec::new();
    for x in 0..n {
        let mut disc = local_distances_with(&mut marcher, mesh, x, grid.radius * (1.0 + RADIUS_SLACK));
        if disc.len() < 2 {
            empty.push(x);
        }
        disc.sort_by_key(|&(y, _)| y);
        for (y, d) in disc {
            // Coefficients in the frame at x are, by transport, the
            // coefficients at the anchor.
            let log = log_map_with_distance(mesh, frames, x, y, d);
            cols.push(y);
            coords.push(log.coords);
            fallback.push(log.fallback);
        }
        row_ptr.push(cols.len());
    }
    if !empty.is_empty() {
        return Err(KernelError::EmptyNeighborhood(empty));
    }
    let mut basis = KernelBasis {
        grid,
        anchor,
        n,
        row_ptr,
        cols,
        coords,
        fallback,
        entry_ptr: Vec::new(),
        entry_bins: Vec::new(),
        entry_weights: Vec::new(),
        mass: mass_matrix(mesh).weights().to_vec(),
    };
    basis.rebin(Transform::IDENTITY);
    Ok(basis)
}

impl KernelBasis {
    /// A conventional image convolution expressed as a basis: on an
    /// `width x height` pixel grid (vertex `j * width + i`), bin `b` is the
    /// pixel offset `(b % side - r, b / side - r)` with `side = 2r + 1`.
    /// Pixels outside the image are dropped (zero padding).
    pub fn pixel_stencil(width: usize, height: usize, half_width: usize) -> Self {
        let side = 2 * half_width + 1;
        let n = width * height;
        let r = half_width as i64;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut coords = Vec::new();
        let mut entry_ptr = vec![0];
        let mut entry_bins = Vec::new();
        let mut entry_weights = Vec::new();
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (x + dx, y + dy);
                        if px < 0 || py < 0 || px >= width as i64 || py >= height as i64 {
                            continue;
                        }
                        cols.push((py * width as i64 + px) as usize);
                        coords.push(TangentCoords::new(dx as f64, dy as f64));
                        entry_bins.push(((dy + r) * side as i64 + dx + r) as u32);
                        entry_weights.push(1.0);
                        entry_ptr.push(entry_bins.len());
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        let fallback = vec![false; cols.len()];
        KernelBasis {
            grid: PolarGrid {
                n_r: 1,
                n_theta: side * side,
                radius: (2.0f64).sqrt() * (half_width as f64 + 0.5),
            },
            anchor: 0,
            n,
            row_ptr,
            cols,
            coords,
            fallback,
            entry_ptr,
            entry_bins,
            entry_weights,
            mass: vec![1.0; n],
        }
    }

    fn rebin(&mut self, transform: Transform) -> f64 {
        let mut entry_ptr = Vec::with_capacity(self.cols.len() + 1);
        let mut bins = Vec::with_capacity(self.cols.len() * 4);
        let mut weights = Vec::with_capacity(self.cols.len() * 4);
        let mut clipped = 0usize;
        entry_ptr.push(0);
        for c in &self.coords {
            let (r, phi) = transform.apply(c.norm(), c.angle());
            let w = self.grid.interpolate(r, phi);
            if w.is_empty() {
                clipped += 1;
            }
            for (b, x) in w.iter() {
                bins.push(b as u32);
                weights.push(x);
            }
            entry_ptr.push(bins.len());
        }
        self.entry_ptr = entry_ptr;
        self.entry_bins = bins;
        self.entry_weights = weights;
        clipped as f64 / self.coords.len().max(1) as f64
    }

    /// Copy of this basis with bin weights recomputed under `transform`.
    /// Also returns the fraction of neighbour entries mapped outside the
    /// template disc.
    pub fn transformed(&self, transform: Transform) -> (KernelBasis, f64) {
        let mut out = self.clone();
        let clipped = out.rebin(transform);
        (out, clipped)
    }

    pub fn grid(&self) -> PolarGrid {
        self.grid
    }

    pub fn n_bins(&self) -> usize {
        if self.entry_bins.is_empty() {
            self.grid.n_bins()
        } else {
            self.grid.n_bins().max(*self.entry_bins.iter().max().unwrap() as usize + 1)
        }
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Disc members of centre `x` (the neighbourhood index set).
    pub fn neighborhood(&self, x: usize) -> &[usize] {
        &self.cols[self.row_ptr[x]..self.row_ptr[x + 1]]
    }

    /// Transported tangent coordinates of the disc members of `x`.
    pub fn coords(&self, x: usize) -> &[TangentCoords] {
        &self.coords[self.row_ptr[x]..self.row_ptr[x + 1]]
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    pub fn n_entries(&self) -> usize {
        self.cols.len()
    }

    pub fn max_neighborhood(&self) -> usize {
        (0..self.n).map(|x| self.row_ptr[x + 1] - self.row_ptr[x]).max().unwrap_or(0)
    }

    /// Bin weights of entry `e` (an index into the flattened neighbour list).
    pub fn entry_weights(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.entry_ptr[e]..self.entry_ptr[e + 1];
        self.entry_bins[r.clone()]
            .iter()
            .zip(&self.entry_weights[r])
            .map(|(&b, &w)| (b as usize, w))
    }

    pub fn row_entries(&self, x: usize) -> std::ops::Range<usize> {
        self.row_ptr[x]..self.row_ptr[x + 1]
    }

    pub fn col(&self, e: usize) -> usize {
        self.cols[e]
    }

    /// `B_b` in centre-major layout.
    pub fn bin_matrix(&self, b: usize) -> CsrMatrix {
        let rows = (0..self.n)
            .map(|x| {
                self.row_entries(x)
                    .flat_map(|e| {
                        let y = self.cols[e];
                        self.entry_weights(e).filter(move |&(bb, _)| bb == b).map(move |(_, w)| (y, w))
                    })
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(self.n, rows)
    }

    /// `T[x][b] = Σ_y B_b[x][y] z[y]`, written row-major into `out`
    /// (`n x n_bins`, accumulated with stride `stride` starting at `offset`).
    pub fn gather_into(&self, z: &[f64], out: &mut [f64], stride: usize, offset: usize) {
        for x in 0..self.n {
            let row = &mut out[x * stride + offset..];
            for e in self.row_entries(x) {
                let zy = z[self.cols[e]];
                if zy == 0.0 {
                    continue;
                }
                for k in self.entry_ptr[e]..self.entry_ptr[e + 1] {
                    row[self.entry_bins[k] as usize] += self.entry_weights[k] * zy;
                }
            }
        }
    }

    /// Adjoint of [`KernelBasis::gather_into`]: `dz[y] += Σ_x Σ_b B_b[x][y] dt[x][b]`.
    pub fn scatter_from(&self, dt: &[f64], stride: usize, offset: usize, dz: &mut [f64]) {
        for x in 0..self.n {
            let row = &dt[x * stride + offset..];
            for e in self.row_entries(x) {
                let mut acc = 0.0;
                for k in self.entry_ptr[e]..self.entry_ptr[e + 1] {
                    acc += self.entry_weights[k] * row[self.entry_bins[k] as usize];
                }
                dz[self.cols[e]] += acc;
            }
        }
    }
}

/// Assembled kernel matrix plus the transform it was built with.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    matrix: CsrMatrix,
    pub transform: Transform,
    /// Per-centre normalisation constants `C_x` when normalisation is on.
    pub normalization: Option<Vec<f64>>,
    /// Fraction of disc entries whose transformed lookup left the template.
    pub clipped_fraction: f64,
}

impl KernelMatrix {
    /// Wrap an explicit centre-major matrix (row `x` = kernel centred at `x`).
    pub fn from_centre_rows(matrix: CsrMatrix) -> Self {
        KernelMatrix {
            matrix,
            transform: Transform::IDENTITY,
            normalization: None,
            clipped_fraction: 0.0,
        }
    }

    /// Centre-major storage: row `x` is `k(x, ·)`.
    pub fn centre_rows(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// `k(x, y)`.
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.matrix.get(x, y)
    }

    pub fn n(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    /// `Σ_y |k(x, y)| M[y]`.
    pub fn row_mass(&self, x: usize, mass: &[f64]) -> f64 {
        let (cols, vals) = self.matrix.row(x);
        cols.iter().zip(vals).map(|(&y, v)| v.abs() * mass[y]).sum()
    }

    /// `K` in the conventional orientation (column `x` = kernel at `x`), as
    /// Matrix Market text.
    pub fn to_matrix_market(&self) -> String {
        self.matrix.transpose().to_matrix_market()
    }
}

/// `K = Σ_b w_b B_b` with the template looked up at `(|s| r, φ + θ)`
/// (reflected through the origin when `s < 0`), optionally normalised so
/// every centre carries the anchor's kernel mass.
pub fn assemble(
    basis: &KernelBasis,
    template: &KernelTemplate,
    scale: f64,
    rotation: f64,
    normalize: bool,
) -> Result<KernelMatrix, KernelError> {
    let grid = template.validate()?;
    if (grid.n_r, grid.n_theta) != (basis.grid.n_r, basis.grid.n_theta) {
        return Err(KernelError::GridMismatch {
            template: (grid.n_r, grid.n_theta),
            basis: (basis.grid.n_r, basis.grid.n_theta),
        });
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(KernelError::BadScale(scale));
    }
    let transform = Transform { scale, rotation };
    let transformed;
    let source = if transform == Transform::IDENTITY {
        basis
    } else {
        transformed = basis.transformed(transform).0;
        &transformed
    };
    let clipped_fraction = if scale.abs() < 1.0 {
        // The dilated kernel reaches past the basis disc and is truncated.
        let lost = 1.0 - scale * scale;
        log::warn!("kernel dilation |s| = {} exceeds basis coverage; {:.1}% of the support area is clipped", scale.abs(), 100.0 * lost);
        lost
    } else {
        0.0
    };
    let rows: Vec<Vec<(usize, f64)>> = (0..source.n)
        .map(|x| {
            source
                .row_entries(x)
                .map(|e| {
                    let v: f64 = source.entry_weights(e).map(|(b, w)| w * template.weights[b]).sum();
                    (source.cols[e], v)
                })
                .collect()
        })
        .collect();
    let mut matrix = CsrMatrix::from_rows(source.n, rows);
    let mut normalization = None;
    if normalize {
        let raw = KernelMatrix::from_centre_rows(matrix.clone());
        let reference = raw.row_mass(basis.anchor, &basis.mass);
        let constants: Vec<f64> = (0..source.n)
            .map(|x| {
                let m = raw.row_mass(x, &basis.mass);
                if m > 0.0 && reference > 0.0 {
                    m / reference
                } else {
                    1.0
                }
            })
            .collect();
        for (x, &c) in constants.iter().enumerate() {
            let range = matrix.row_range(x);
            for v in &mut matrix.values_mut()[range] {
                *v /= c;
            }
        }
        normalization = Some(constants);
    }
    Ok(KernelMatrix {
        matrix,
        transform,
        normalization,
        clipped_fraction,
    })
}
