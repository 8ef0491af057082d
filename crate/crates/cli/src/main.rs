//! `ptconv`: geodesic fields, frame dumps and the JSON-configured
//! experiments from the command line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ptconv::experiments::{
    run_eval_transfer, run_filter_demo, run_singularity_study, run_train_mnist, EvalTransferConfig, FilterDemoConfig,
    MnistData, SingularityStudyConfig, TrainMnistConfig,
};
use ptconv::geodesic::fast_marching;
use ptconv::mesh::{generate_surface, load_mesh_auto, save_obj, save_off, write_ply, MeshFormat, SurfaceSpec, TriangleMesh};
use ptconv::transport::{build_frames, write_frame_glyphs};

#[derive(Debug, Parser)]
#[command(name = "ptconv", version, about = "Parallel transport convolution on triangle meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Geodesic distance from one or more source vertices.
    Geodesic(GeodesicArgs),
    /// Dump the field-aligned vertex frames as PLY line glyphs.
    Frames(FramesArgs),
    /// Triangulate a JSON surface spec and save it as OFF or OBJ.
    Surface(SurfaceArgs),
    /// Train the single-layer classifier on MNIST lifted to surfaces.
    TrainMnist(ConfigArgs),
    /// Evaluate a saved checkpoint on other domains without retraining.
    EvalTransfer(ConfigArgs),
    /// Oriented edge filter applied to a synthetic pattern.
    FilterDemo(ConfigArgs),
    /// Compare vector-field layouts with different singularity counts.
    SingularityStudy(ConfigArgs),
}

#[derive(Debug, Args)]
struct MeshSource {
    /// Input mesh (.off or .obj).
    #[arg(long)]
    mesh: PathBuf,
    /// Source vertex; repeat for a multi-source field.
    #[arg(long = "source", required = true)]
    sources: Vec<usize>,
}

#[derive(Debug, Args)]
struct GeodesicArgs {
    #[command(flatten)]
    input: MeshSource,
    /// Per-vertex distances as `vertex,distance` CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional PLY coloured by distance.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FramesArgs {
    #[command(flatten)]
    input: MeshSource,
    #[arg(long)]
    out: PathBuf,
    /// Glyph length; half the mean edge length when omitted.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, Args)]
struct SurfaceArgs {
    /// JSON surface spec.
    spec: PathBuf,
    /// Output mesh; the extension picks the format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON experiment config.
    config: PathBuf,
    /// Overrides the output directory named in the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_with_sources(input: &MeshSource) -> Result<TriangleMesh> {
    let mesh = load_mesh_auto(&input.mesh).with_context(|| format!("loading {}", input.mesh.display()))?;
    if let Some(&bad) = input.sources.iter().find(|&&s| s >= mesh.n_vertices()) {
        bail!("source {bad} is out of range for {} vertices", mesh.n_vertices());
    }
    Ok(mesh)
}

fn geodesic(args: &GeodesicArgs) -> Result<()> {
    let mesh = load_with_sources(&args.input)?;
    let field = fast_marching(&mesh, &args.input.sources)?;
    let mut w = BufWriter::new(fs::File::create(&args.out)?);
    writeln!(w, "vertex,distance")?;
    for (v, d) in field.distance().iter().enumerate() {
        writeln!(w, "{v},{d}")?;
    }
    w.flush()?;
    if let Some(path) = &args.ply {
        write_ply(&mesh, &[("distance", field.distance())], Some(0), fs::File::create(path)?)?;
    }
    let max = field.distance().iter().copied().fold(0.0, f64::max);
    println!(
        "{} vertices, max distance {max:.6}, {} singular faces",
        mesh.n_vertices(),
        field.singular_faces().len()
    );
    Ok(())
}

fn frames(args: &FramesArgs) -> Result<()> {
    let mesh = load_with_sources(&args.input)?;
    let field = fast_marching(&mesh, &args.input.sources)?;
    let frames = build_frames(&mesh, &field)?;
    let scale = args.scale.unwrap_or_else(|| 0.5 * mesh.mean_edge_length());
    write_frame_glyphs(&mesh, &frames, scale, fs::File::create(&args.out)?)?;
    println!("{} frame glyphs written to {}", mesh.n_vertices(), args.out.display());
    Ok(())
}

fn surface(args: &SurfaceArgs) -> Result<()> {
    let spec = SurfaceSpec::from_json(&fs::read_to_string(&args.spec)?)?;
    let mesh = generate_surface(&spec)?;
    match MeshFormat::from_path(&args.out)? {
        MeshFormat::Off => save_off(&mesh, &args.out)?,
        MeshFormat::Obj => save_obj(&mesh, &args.out)?,
    }
    println!("{} vertices, {} faces", mesh.n_vertices(), mesh.n_faces());
    Ok(())
}

fn require_out_dir(config: Option<PathBuf>, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or(config)
        .context("no output directory: set `out_dir` in the config or pass --out-dir")
}

fn train_mnist(args: &ConfigArgs) -> Result<()> {
    let mut config: TrainMnistConfig = read_config(&args.config)?;
    let dir = require_out_dir(config.out_dir.take(), &args.out_dir)?;
    config.out_dir = Some(dir.clone());
    let data = MnistData::load(&config.data.dir, config.data.train_limit, config.data.test_limit)?;
    let run = run_train_mnist(&config, &data)?;
    println!(
        "accuracy {:.4} after {} iterations in {:.1} s; outputs in {}",
        run.accuracy,
        config.train.iterations,
        run.seconds,
        dir.display()
    );
    Ok(())
}

fn eval_transfer(args: &ConfigArgs) -> Result<()> {
    let mut config: EvalTransferConfig = read_config(&args.config)?;
    let dir = require_out_dir(config.out_dir.take(), &args.out_dir)?;
    config.out_dir = Some(dir.clone());
    for (k, a) in run_eval_transfer(&config)?.iter().enumerate() {
        println!("domain {k}: accuracy {a:.4}");
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn filter_demo(args: &ConfigArgs) -> Result<()> {
    let mut config: FilterDemoConfig = read_config(&args.config)?;
    let dir = require_out_dir(config.out_dir.take(), &args.out_dir)?;
    config.out_dir = Some(dir.clone());
    let report = run_filter_demo(&config)?;
    let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    println!(
        "mean |response|: aligned {:.4e}, rotated {:.4e}, sweep max {:.4e}; outputs in {}",
        mean_abs(&report.aligned),
        mean_abs(&report.rotated),
        mean_abs(&report.sweep_max),
        dir.display()
    );
    Ok(())
}

fn singularity_study(args: &ConfigArgs) -> Result<()> {
    let mut config: SingularityStudyConfig = read_config(&args.config)?;
    let dir = require_out_dir(config.out_dir.take(), &args.out_dir)?;
    fs::create_dir_all(&dir)?;
    config.out.get_or_insert_with(|| dir.join("metrics.csv"));
    config.out_dir = Some(dir.clone());
    let data = MnistData::load(&config.data.dir, config.data.train_limit, config.data.test_limit)?;
    for r in run_singularity_study(&config, &data)? {
        println!("{} ({} fields): mean accuracy {:.4} over {:?}", r.name, r.fields, r.mean(), r.accuracies);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Geodesic(a) => geodesic(&a),
        Command::Frames(a) => frames(&a),
        Command::Surface(a) => surface(&a),
        Command::TrainMnist(a) => train_mnist(&a),
        Command::EvalTransfer(a) => eval_transfer(&a),
        Command::FilterDemo(a) => filter_demo(&a),
        Command::SingularityStudy(a) => singularity_study(&a),
    }
}
