//! JSON-configured runs behind the command-line tool: MNIST training on
//! surfaces, transfer evaluation, the oriented edge-filter demo and the
//! vector-field singularity study.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::{ptc_apply, FilterBank};
use crate::geodesic::fast_marching;
use crate::kernel::{assemble, build_basis, edge_detector_template, KernelError, PolarGrid};
use crate::mesh::{generate_surface, load_mesh_auto, mass_matrix, write_ply, Bump, HeightFunction, MeshError, SurfaceSpec, TriangleMesh};
use crate::mnist::{IdxError, LabeledImages};
use crate::net::{evaluate, train, Domain, Layer, LossHead, MetricsLog, NetError, Network, TrainConfig};
use crate::transport::build_frames;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] IdxError),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Where a geodesic field's source sits: a vertex id, a point in the unit
/// parameter square (snapped to the nearest vertex), or a named set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourcePoint {
    Vertex(usize),
    Uv([f64; 2]),
    Named(NamedSource),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedSource {
    /// Every vertex with `u = 0`; yields a field with no interior singularity.
    LeftEdge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometrySpec {
    Surface { surface: SurfaceSpec },
    Mesh { path: PathBuf },
    /// Plain image convolution with a `(2h+1)²` pixel stencil.
    PixelGrid { width: usize, height: usize, half_width: usize },
}

fn default_fields() -> Vec<Vec<SourcePoint>> {
    vec![vec![SourcePoint::Uv([0.0, 0.0])]]
}

fn default_n_r() -> usize {
    3
}

fn default_n_theta() -> usize {
    8
}

/// Geometry plus the vector fields and kernel grid built on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub geometry: GeometrySpec,
    #[serde(default = "default_fields")]
    pub fields: Vec<Vec<SourcePoint>>,
    /// Kernel radius; three mean edge lengths when absent.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_n_r")]
    pub n_r: usize,
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
}

impl DomainConfig {
    pub fn surface(surface: SurfaceSpec, fields: Vec<Vec<SourcePoint>>, radius: f64) -> Self {
        DomainConfig {
            geometry: GeometrySpec::Surface { surface },
            fields,
            radius: Some(radius),
            n_r: default_n_r(),
            n_theta: default_n_theta(),
        }
    }

    pub fn mesh(&self) -> Result<Option<TriangleMesh>> {
        Ok(match &self.geometry {
            GeometrySpec::Surface { surface } => Some(generate_surface(surface)?),
            GeometrySpec::Mesh { path } => Some(load_mesh_auto(path)?),
            GeometrySpec::PixelGrid { .. } => None,
        })
    }

    pub fn grid(&self, mesh: &TriangleMesh) -> Result<PolarGrid> {
        let radius = self.radius.unwrap_or_else(|| 3.0 * mesh.mean_edge_length());
        Ok(PolarGrid::new(self.n_r, self.n_theta, radius)?)
    }

    pub fn build(&self) -> Result<Domain> {
        if let GeometrySpec::PixelGrid {
            width,
            height,
            half_width,
        } = self.geometry
        {
            return Ok(Domain::pixel_grid(width, height, half_width));
        }
        let mesh = self.mesh()?.expect("mesh geometry");
        let sets = self
            .fields
            .iter()
            .map(|set| resolve_sources(&mesh, set))
            .collect::<Result<Vec<_>>>()?;
        Ok(Domain::build(&mesh, &sets, self.grid(&mesh)?)?)
    }
}

pub fn resolve_sources(mesh: &TriangleMesh, points: &[SourcePoint]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in points {
        match p {
            SourcePoint::Vertex(v) => out.push(*v),
            SourcePoint::Uv(uv) => out.push(
                mesh.nearest_uv_vertex(*uv)
                    .ok_or_else(|| ExperimentError::Config("uv sources need a parametrised mesh".into()))?,
            ),
            SourcePoint::Named(NamedSource::LeftEdge) => {
                let uv = mesh
                    .uv()
                    .ok_or_else(|| ExperimentError::Config("named sources need a parametrised mesh".into()))?;
                out.extend(uv.iter().enumerate().filter(|(_, p)| p[0] == 0.0).map(|(v, _)| v));
            }
        }
    }
    if out.is_empty() {
        return Err(ExperimentError::Config("empty source set".into()));
    }
    Ok(out)
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

/// Train/test splits loaded once and shared between runs.
#[derive(Clone, Debug)]
pub struct MnistData {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

impl MnistData {
    pub fn load(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Self> {
        let train = LabeledImages::load_split(dir, "train")?;
        let test = LabeledImages::load_split(dir, "t10k")?;
        Ok(MnistData {
            train: train.truncated(train_limit.unwrap_or(usize::MAX)),
            test: test.truncated(test_limit.unwrap_or(usize::MAX)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_filters() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMnistConfig {
    pub data: DataConfig,
    /// Batches cycle through these domains in order.
    pub train_domains: Vec<DomainConfig>,
    /// Held-out evaluation geometry; the first training domain when absent.
    #[serde(default)]
    pub eval_domain: Option<DomainConfig>,
    #[serde(default = "default_filters")]
    pub filters: usize,
    /// Filter → field map; round-robin over the configured fields when absent.
    #[serde(default)]
    pub assignment: Option<Vec<usize>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct MnistRun {
    pub network: Network,
    pub metrics: MetricsLog,
    /// Accuracy on the full test split on the evaluation domain.
    pub accuracy: f64,
    pub seconds: f64,
}

pub fn run_train_mnist(config: &TrainMnistConfig, data: &MnistData) -> Result<MnistRun> {
    let start = Instant::now();
    if config.train_domains.is_empty() {
        return Err(ExperimentError::Config("no training domain".into()));
    }
    let domains = config.train_domains.iter().map(DomainConfig::build).collect::<Result<Vec<_>>>()?;
    let eval_domain = match &config.eval_domain {
        Some(d) => d.build()?,
        None => domains[0].clone(),
    };
    let n = domains[0].n_vertices();
    if let Some(bad) = domains.iter().chain([&eval_domain]).find(|d| d.n_vertices() != n) {
        return Err(ExperimentError::Config(format!(
            "all domains must share one vertex count ({n} vs {})",
            bad.n_vertices()
        )));
    }
    let n_fields = domains[0].n_fields();
    let assignment = match &config.assignment {
        Some(a) => a.clone(),
        None => (0..config.filters).map(|j| j % n_fields).collect(),
    };
    if let Some(&f) = assignment.iter().find(|&&f| f >= n_fields) {
        return Err(ExperimentError::Config(format!("assignment names field {f} of {n_fields}")));
    }
    let mut network = Network::single_conv_classifier(n, domains[0].n_bins(), config.filters, assignment, 10, config.train.seed);
    let metrics = train(&mut network, &domains, &data.train, Some((&eval_domain, &data.test)), &config.train)?;
    let accuracy = evaluate(&network, &eval_domain, &data.test)?;
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
        network.save(&dir.join("model.ptcn"))?;
        fs::write(dir.join("accuracy.txt"), format!("{accuracy}\n"))?;
    }
    Ok(MnistRun {
        network,
        metrics,
        accuracy,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTransferConfig {
    pub checkpoint: PathBuf,
    pub data: DataConfig,
    pub domains: Vec<DomainConfig>,
    /// Receives `metrics.csv` (one accuracy per domain) and a copy of the
    /// evaluated checkpoint as `model.ptcn`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Accuracy of a saved network on each target domain. The weights are
/// used as loaded; only the geometry is rebuilt.
pub fn run_eval_transfer(config: &EvalTransferConfig) -> Result<Vec<f64>> {
    let network = Network::load(&config.checkpoint)?;
    let data = MnistData::load(&config.data.dir, Some(0), config.data.test_limit)?;
    let accuracies = config
        .domains
        .iter()
        .map(|d| Ok(evaluate(&network, &d.build()?, &data.test)?))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("domain,accuracy\n");
        for (k, a) in accuracies.iter().enumerate() {
            csv.push_str(&format!("{k},{a}\n"));
        }
        fs::write(dir.join("metrics.csv"), csv)?;
        network.save(&dir.join("model.ptcn"))?;
    }
    Ok(accuracies)
}

/// Analytic test pattern in the unit parameter square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// 1 inside the axis-aligned box, 0 outside.
    Square { lo: [f64; 2], hi: [f64; 2] },
    /// Square wave with the given period, stripes normal to `angle`.
    Stripes { period: f64, angle: f64 },
}

impl Pattern {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Pattern::Square { lo, hi } => f64::from(u >= lo[0] && u <= hi[0] && v >= lo[1] && v <= hi[1]),
            Pattern::Stripes { period, angle } => {
                let t = (u * angle.cos() + v * angle.sin()) / period;
                f64::from(t.rem_euclid(1.0) < 0.5)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDemoConfig {
    pub domain: DomainConfig,
    pub pattern: Pattern,
    /// Orientation of the edge template relative to the field direction.
    #[serde(default)]
    pub orientation: f64,
    /// Number of rotations in the sweep over `[0, 2π)`.
    #[serde(default = "default_rotations")]
    pub rotations: usize,
    #[serde(default)]
    pub normalize: bool,
    /// PLY with the signal and every response as vertex scalars.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Receives `metrics.csv` (per-vertex responses) and `model.ptcn`, a
    /// one-layer network holding the aligned and rotated templates.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_rotations() -> usize {
    16
}

/// Per-vertex responses of the edge filter demo.
#[derive(Clone, Debug)]
pub struct FilterDemoReport {
    pub mesh: TriangleMesh,
    pub signal: Vec<f64>,
    /// Template at `orientation`.
    pub aligned: Vec<f64>,
    /// Template at `orientation + π/2`.
    pub rotated: Vec<f64>,
    /// `max_θ |response|` over the rotation sweep of the `orientation` template.
    pub sweep_max: Vec<f64>,
}

pub fn run_filter_demo(config: &FilterDemoConfig) -> Result<FilterDemoReport> {
    let mesh = config
        .domain
        .mesh()?
        .ok_or_else(|| ExperimentError::Config("filter demo needs a mesh".into()))?;
    let uv = mesh
        .uv()
        .ok_or_else(|| ExperimentError::Config("filter demo needs (u, v) parameters".into()))?;
    let signal: Vec<f64> = uv.iter().map(|p| config.pattern.eval(p[0], p[1])).collect();
    let sources = resolve_sources(
        &mesh,
        config
            .domain
            .fields
            .first()
            .ok_or_else(|| ExperimentError::Config("no field configured".into()))?,
    )?;
    let field = fast_marching(&mesh, &sources).map_err(NetError::from)?;
    let frames = build_frames(&mesh, &field).map_err(NetError::from)?;
    let grid = config.domain.grid(&mesh)?;
    let basis = build_basis(&mesh, &frames, &field, sources[0], grid)?;
    let mass = mass_matrix(&mesh);
    let template = |orientation: f64| edge_detector_template(sources[0], orientation, grid.radius, grid.n_r, grid.n_theta);
    let apply = |orientation: f64, rotation: f64| -> Result<Vec<f64>> {
        let k = assemble(&basis, &template(orientation)?, 1.0, rotation, config.normalize)?;
        Ok(ptc_apply(&k, &mass, &signal).expect("shapes agree"))
    };
    let aligned = apply(config.orientation, 0.0)?;
    let rotated = apply(config.orientation + PI / 2.0, 0.0)?;
    let mut sweep_max = vec![0.0f64; mesh.n_vertices()];
    for k in 0..config.rotations.max(1) {
        let theta = 2.0 * PI * k as f64 / config.rotations.max(1) as f64;
        for (m, r) in sweep_max.iter_mut().zip(apply(config.orientation, theta)?) {
            *m = m.max(r.abs());
        }
    }
    if let Some(path) = &config.out {
        create_parent(path)?;
        let file = fs::File::create(path)?;
        write_ply(
            &mesh,
            &[("signal", &signal), ("aligned", &aligned), ("rotated", &rotated), ("sweep_max", &sweep_max)],
            Some(3),
            file,
        )?;
    }
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        let uv = mesh.uv().expect("checked above");
        let mut csv = String::from("vertex,u,v,signal,aligned,rotated,sweep_max\n");
        for (i, p) in uv.iter().enumerate() {
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                p[0], p[1], signal[i], aligned[i], rotated[i], sweep_max[i]
            ));
        }
        fs::write(dir.join("metrics.csv"), csv)?;
        let weights = [template(config.orientation)?.weights, template(config.orientation + PI / 2.0)?.weights].concat();
        let bank = FilterBank::new(1, 2, grid.n_bins(), weights, vec![0, 0]).map_err(|source| NetError::Layer { layer: 0, source })?;
        // The triplet head with zero weight marks a pure feature extractor.
        Network::new(vec![Layer::Ptc(bank)], LossHead::Triplet { lambda: 0.0, margin: 0.0 }).save(&dir.join("model.ptcn"))?;
    }
    Ok(FilterDemoReport {
        mesh,
        signal,
        aligned,
        rotated,
        sweep_max,
    })
}

/// Field layouts compared in the singularity study, as source points in
/// the unit parameter square. The first has its only singularity at a
/// corner; the others place one, two or four singularities in the interior
/// and split the filters evenly across the fields.
pub fn singularity_variants() -> Vec<(&'static str, Vec<Vec<SourcePoint>>)> {
    let uv = |u, v| vec![SourcePoint::Uv([u, v])];
    vec![
        ("PTC1", vec![uv(0.0, 0.0)]),
        ("PTC2", vec![uv(0.5, 0.5)]),
        ("PTC3", vec![uv(0.3, 0.35), uv(0.7, 0.65)]),
        ("PTC4", vec![uv(0.3, 0.3), uv(0.7, 0.3), uv(0.3, 0.7), uv(0.7, 0.7)]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityStudyConfig {
    pub data: DataConfig,
    /// Geometry and grid; its `fields` entry is replaced per variant.
    pub domain: DomainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-run accuracy table.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Each run writes its metrics and checkpoint to `<dir>/<variant>-seed<k>/`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub fields: usize,
    pub accuracies: Vec<f64>,
}

impl VariantResult {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

pub fn run_singularity_study(config: &SingularityStudyConfig, data: &MnistData) -> Result<Vec<VariantResult>> {
    let mut results = Vec::new();
    for (name, fields) in singularity_variants() {
        let mut domain = config.domain.clone();
        domain.fields = fields.clone();
        let mut accuracies = Vec::new();
        for &seed in &config.seeds {
            let run = run_train_mnist(
                &TrainMnistConfig {
                    data: config.data.clone(),
                    train_domains: vec![domain.clone()],
                    eval_domain: None,
                    filters: config.filters,
                    assignment: None,
                    train: TrainConfig {
                        seed,
                        ..config.train.clone()
                    },
                    out_dir: config.out_dir.as_ref().map(|d| d.join(format!("{name}-seed{seed}"))),
                },
                data,
            )?;
            log::info!("{name} seed {seed}: {:.4}", run.accuracy);
            accuracies.push(run.accuracy);
        }
        results.push(VariantResult {
            name: name.to_string(),
            fields: fields.len(),
            accuracies,
        });
    }
    if let Some(path) = &config.out {
        let mut csv = String::from("variant,fields,seed,accuracy\n");
        for r in &results {
            for (seed, a) in config.seeds.iter().zip(&r.accuracies) {
                csv.push_str(&format!("{},{},{seed},{a}\n", r.name, r.fields));
            }
        }
        create_parent(path)?;
        fs::write(path, csv)?;
    }
    Ok(results)
}

/// Grid spacing of one pixel on a 28 × 28 parameter grid.
pub const MNIST_EXTENT: f64 = 27.0;

fn bumps(list: &[([f64; 2], f64, f64)]) -> SurfaceSpec {
    SurfaceSpec {
        height: HeightFunction::GaussianBumps {
            bumps: list
                .iter()
                .map(|&(center, height, sigma)| Bump { center, height, sigma })
                .collect(),
        },
        resolution: [28, 28],
        extent: MNIST_EXTENT,
    }
}

/// Curved stand-in surface for single-manifold MNIST: one broad bump.
pub fn single_manifold_surface() -> SurfaceSpec {
    bumps(&[([0.5, 0.5], 0.3, 0.3)])
}

/// Five distinct surfaces on the MNIST grid. The first four are training
/// shapes; the last is held out.
pub fn manifold_family() -> Vec<SurfaceSpec> {
    let mut ripple = SurfaceSpec::flat(28, 28).with_extent(MNIST_EXTENT);
    ripple.height = HeightFunction::Ripple {
        amplitude: 0.08,
        frequency: [1.0, 1.0],
        phase: 0.0,
    };
    let mut saddle = SurfaceSpec::flat(28, 28).with_extent(MNIST_EXTENT);
    saddle.height = HeightFunction::Saddle { amplitude: 1.2 };
    vec![
        single_manifold_surface(),
        bumps(&[([0.3, 0.3], 0.25, 0.2), ([0.7, 0.7], -0.25, 0.2)]),
        ripple,
        saddle,
        bumps(&[([0.35, 0.6], 0.35, 0.25), ([0.75, 0.3], 0.15, 0.15)]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_points_parse_in_all_forms() {
        let sets: Vec<Vec<SourcePoint>> = serde_json::from_str(r#"[[0, [0.5, 0.5]], ["left_edge"]]"#).unwrap();
        assert_eq!(sets[0][0], SourcePoint::Vertex(0));
        assert_eq!(sets[0][1], SourcePoint::Uv([0.5, 0.5]));
        assert_eq!(sets[1][0], SourcePoint::Named(NamedSource::LeftEdge));
    }

    #[test]
    fn left_edge_resolves_to_first_column() {
        let spec = SurfaceSpec::flat(5, 4);
        let mesh = generate_surface(&spec).unwrap();
        let v = resolve_sources(&mesh, &[SourcePoint::Named(NamedSource::LeftEdge)]).unwrap();
        assert_eq!(v, (0..4).map(|j| spec.index(0, j)).collect::<Vec<_>>());
        let c = resolve_sources(&mesh, &[SourcePoint::Uv([1.0, 1.0])]).unwrap();
        assert_eq!(c, vec![spec.index(4, 3)]);
    }

    #[test]
    fn domain_config_from_json() {
        let cfg: DomainConfig = serde_json::from_str(
            r#"{"geometry": {"kind": "surface", "surface": {"function": "flat", "resolution": [6, 6]}},
                "fields": [[[0.0, 0.0]], [[1.0, 1.0]]], "radius": 0.5}"#,
        )
        .unwrap();
        let d = cfg.build().unwrap();
        assert_eq!((d.n_vertices(), d.n_fields(), d.n_bins()), (36, 2, 24));
    }

    #[test]
    fn family_surfaces_share_the_grid() {
        for spec in manifold_family() {
            let mesh = generate_surface(&spec).unwrap();
            assert_eq!(mesh.n_vertices(), 784);
            assert!(mesh.total_area() > 27.0 * 27.0 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn patterns() {
        let sq = Pattern::Square { lo: [0.2, 0.2], hi: [0.4, 0.4] };
        assert_eq!(sq.eval(0.3, 0.3), 1.0);
        assert_eq!(sq.eval(0.5, 0.3), 0.0);
        let st = Pattern::Stripes { period: 0.5, angle: 0.0 };
        assert_eq!(st.eval(0.1, 0.9), 1.0);
        assert_eq!(st.eval(0.3, 0.9), 0.0);
    }
}
