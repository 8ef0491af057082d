//! Layer stack, losses and the SGD/Adam trainer.
//!
//! Networks hold only template and dense weights. Geometry arrives through
//! a [`Domain`] argument on every call, so a trained network moves to a new
//! surface by building a new `Domain`; nothing in the network changes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::{gemm, ptc_backward, ptc_backward_weights, ptc_forward_batched, ConvError, FilterBank, ForwardCache, SignalBatch};
use crate::geodesic::{build_field_set, FieldAssignment, GeodesicError};
use crate::kernel::{build_basis, KernelBasis, KernelError, PolarGrid};
use crate::mesh::{mass_matrix, TriangleMesh};
use crate::mnist::LabeledImages;
use crate::transport::{build_frames, TransportError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: ConvError,
    },
    #[error("layer {layer}: expected {expected} input {what}, got {got}")]
    Shape {
        layer: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("feature vectors differ in length ({0}, {1}, {2})")]
    FeatureLength(usize, usize, usize),
    #[error("network output has {got} values per sample, loss head needs {expected}")]
    HeadMismatch { expected: usize, got: usize },
    #[error("loss became {loss} at iteration {iteration}; last finite loss {last_finite}")]
    Diverged { iteration: usize, loss: f64, last_finite: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("domain has no per-vertex (u, v) parameters to sample images at")]
    NoUv,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("geodesic: {0}")]
    Geodesic(#[from] GeodesicError),
    #[error("frames: {0}")]
    Transport(#[from] TransportError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Geometry a network runs on: one kernel basis per vector field, the
/// vertex masses, and the parameter-space position of every vertex.
#[derive(Clone, Debug)]
pub struct Domain {
    bases: Vec<Arc<KernelBasis>>,
    mass: Vec<f64>,
    uv: Option<Vec<[f64; 2]>>,
}

impl Domain {
    pub fn new(bases: Vec<Arc<KernelBasis>>, mass: Vec<f64>) -> Self {
        Domain { bases, mass, uv: None }
    }

    pub fn with_uv(mut self, uv: Vec<[f64; 2]>) -> Self {
        self.uv = Some(uv);
        self
    }

    /// One geodesic field per source set, frames and a basis for each.
    /// The first source of each set is that basis's anchor.
    pub fn build(mesh: &TriangleMesh, source_sets: &[Vec<usize>], grid: PolarGrid) -> Result<Self, NetError> {
        let fields = build_field_set(mesh, source_sets, source_sets.len(), &FieldAssignment::RoundRobin)?;
        let mut bases = Vec::with_capacity(source_sets.len());
        for field in fields.fields() {
            let frames = build_frames(mesh, field)?;
            bases.push(Arc::new(build_basis(mesh, &frames, field, field.sources()[0], grid)?));
        }
        let domain = Domain::new(bases, mass_matrix(mesh).weights().to_vec());
        Ok(match mesh.uv() {
            Some(uv) => domain.with_uv(uv.to_vec()),
            None => domain,
        })
    }

    /// Conventional image convolution on a `width x height` pixel grid with
    /// a `(2h+1)²` stencil and unit pixel mass.
    pub fn pixel_grid(width: usize, height: usize, half_width: usize) -> Self {
        let uv = (0..height)
            .flat_map(|j| {
                (0..width).map(move |i| [i as f64 / (width - 1) as f64, j as f64 / (height - 1) as f64])
            })
            .collect();
        Domain::new(
            vec![Arc::new(KernelBasis::pixel_stencil(width, height, half_width))],
            vec![1.0; width * height],
        )
        .with_uv(uv)
    }

    pub fn n_vertices(&self) -> usize {
        self.mass.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bases[0].n_bins()
    }

    pub fn n_fields(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[Arc<KernelBasis>] {
        &self.bases
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn uv(&self) -> Option<&[[f64; 2]]> {
        self.uv.as_deref()
    }

    /// Images `indices` of `data` sampled at the vertices, one channel.
    pub fn sample_images(&self, data: &LabeledImages, indices: &[usize]) -> Result<SignalBatch, NetError> {
        let uv = self.uv.as_ref().ok_or(NetError::NoUv)?;
        let n = uv.len();
        let mut batch = SignalBatch::zeros(n, 1, indices.len());
        for (s, &k) in indices.iter().enumerate() {
            data.sample_into(k, uv, &mut batch.data[s * n..(s + 1) * n]);
        }
        Ok(batch)
    }
}

/// Dense layer applied independently to every row (every vertex, or every
/// sample after flattening).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Ptc(FilterBank),
    Relu,
    /// Mass-weighted mean over vertices: `n x c → 1 x c`.
    GlobalPool,
    /// `n x c → 1 x (n·c)`; ties the network to one vertex count.
    Flatten,
    FullyConnected(Dense),
}

impl Layer {
    fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Ptc(bank) => vec![bank.weights()],
            Layer::FullyConnected(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Ptc(bank) => vec![bank.weights_mut()],
            Layer::FullyConnected(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossHead {
    SoftmaxCrossEntropy { classes: usize },
    Triplet { lambda: f64, margin: f64 },
}

/// Per-layer state saved by [`Network::forward`] for the backward pass.
#[derive(Debug)]
pub enum LayerCache {
    Ptc(ForwardCache),
    Relu(Vec<bool>),
    GlobalPool { n: usize },
    Flatten { n: usize, channels: usize },
    Dense(SignalBatch),
}

/// Gradients for every parameter slice, in [`Network::parameters`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub head: LossHead,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Network {
    pub fn new(layers: Vec<Layer>, head: LossHead) -> Self {
        Network { layers, head }
    }

    /// One PTC layer with `filters` filters, ReLU, then a classifier over
    /// the flattened feature maps.
    pub fn single_conv_classifier(
        n_vertices: usize,
        n_bins: usize,
        filters: usize,
        field_of_filter: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = FilterBank::new(1, filters, n_bins, uniform(&mut rng, filters * n_bins, n_bins), field_of_filter)
            .expect("consistent filter bank shape");
        let inputs = n_vertices * filters;
        let dense = Dense {
            inputs,
            outputs: classes,
            weight: uniform(&mut rng, inputs * classes, inputs),
            bias: vec![0.0; classes],
        };
        Network::new(
            vec![Layer::Ptc(bank), Layer::Relu, Layer::Flatten, Layer::FullyConnected(dense)],
            LossHead::SoftmaxCrossEntropy { classes },
        )
    }

    /// Seeded uniform initialisation of a layer list given its shapes.
    pub fn initialise(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                Layer::Ptc(bank) => {
                    let fan_in = bank.q() * bank.n_bins();
                    let len = bank.weights().len();
                    bank.weights_mut().copy_from_slice(&uniform(&mut rng, len, fan_in));
                }
                Layer::FullyConnected(d) => {
                    d.weight = uniform(&mut rng, d.weight.len(), d.inputs);
                    d.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                _ => {}
            }
        }
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, domain: &Domain, input: &SignalBatch) -> Result<(SignalBatch, Vec<LayerCache>), NetError> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let (y, cache) = forward_layer(index, layer, domain, x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Forward pass without keeping caches.
    pub fn predict(&self, domain: &Domain, input: &SignalBatch) -> Result<SignalBatch, NetError> {
        let mut x = input.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            x = forward_layer(index, layer, domain, x)?.0;
        }
        Ok(x)
    }

    /// Back-propagates `grad_output` (same shape as the forward output).
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        domain: &Domain,
        caches: &[LayerCache],
        grad_output: SignalBatch,
    ) -> Result<(Gradients, SignalBatch), NetError> {
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_output;
        for (index, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let wrap = |source| NetError::Layer { layer: index, source };
            g = match (layer, cache) {
                (Layer::Ptc(bank), LayerCache::Ptc(c)) => {
                    // The network input needs no gradient.
                    let grads = if index == 0 {
                        ptc_backward_weights(bank, domain.bases(), domain.mass(), Some(c), &g)
                    } else {
                        ptc_backward(bank, domain.bases(), domain.mass(), Some(c), &g)
                    }
                    .map_err(wrap)?;
                    per_layer[index] = vec![grads.weights];
                    grads.input
                }
                (Layer::Ptc(_), _) => return Err(wrap(ConvError::MissingCache)),
                (Layer::Relu, LayerCache::Relu(mask)) => {
                    for (v, &keep) in g.data.iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                    g
                }
                (Layer::GlobalPool, LayerCache::GlobalPool { n }) => {
                    let total: f64 = domain.mass().iter().sum();
                    let c = g.channels;
                    let mut out = SignalBatch::zeros(*n, c, g.samples);
                    for s in 0..g.samples {
                        for x in 0..*n {
                            let w = domain.mass()[x] / total;
                            for k in 0..c {
                                out.data[(s * n + x) * c + k] = w * g.data[s * c + k];
                            }
                        }
                    }
                    out
                }
                (Layer::Flatten, LayerCache::Flatten { n, channels }) => SignalBatch {
                    n: *n,
                    channels: *channels,
                    samples: g.samples,
                    data: g.data,
                },
                (Layer::FullyConnected(d), LayerCache::Dense(input)) => {
                    let rows = input.samples * input.n;
                    let mut dw = vec![0.0; d.outputs * d.inputs];
                    gemm(d.outputs, rows, d.inputs, &g.data, true, &input.data, false, 0.0, &mut dw);
                    let mut db = vec![0.0; d.outputs];
                    for row in g.data.chunks_exact(d.outputs) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    let mut dx = SignalBatch::zeros(input.n, d.inputs, input.samples);
                    gemm(rows, d.outputs, d.inputs, &g.data, false, &d.weight, false, 0.0, &mut dx.data);
                    per_layer[index] = vec![dw, db];
                    dx
                }
                _ => return Err(wrap(ConvError::MissingCache)),
            };
        }
        Ok((Gradients(per_layer.into_iter().flatten().collect()), g))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        self.write_checkpoint(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Network::read_checkpoint(BufReader::new(fs::File::open(path)?))
    }

    /// Little-endian: `PTCN`, u32 version, u32 layer count, then per layer a
    /// u8 tag (0 PTC, 1 ReLU, 2 pool, 3 flatten, 4 dense) followed by its
    /// shape words (u64) and doubles, then the loss head.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        let u64w = |w: &mut W, v: usize| w.write_all(&(v as u64).to_le_bytes());
        let f64s = |w: &mut W, vs: &[f64]| vs.iter().try_for_each(|v| w.write_all(&v.to_le_bytes()));
        w.write_all(b"PTCN")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            match layer {
                Layer::Ptc(bank) => {
                    w.write_all(&[0])?;
                    u64w(&mut w, bank.q())?;
                    u64w(&mut w, bank.p())?;
                    u64w(&mut w, bank.n_bins())?;
                    for &f in bank.field_of_filter() {
                        u64w(&mut w, f)?;
                    }
                    f64s(&mut w, bank.weights())?;
                }
                Layer::Relu => w.write_all(&[1])?,
                Layer::GlobalPool => w.write_all(&[2])?,
                Layer::Flatten => w.write_all(&[3])?,
                Layer::FullyConnected(d) => {
                    w.write_all(&[4])?;
                    u64w(&mut w, d.inputs)?;
                    u64w(&mut w, d.outputs)?;
                    f64s(&mut w, &d.weight)?;
                    f64s(&mut w, &d.bias)?;
                }
            }
        }
        match self.head {
            LossHead::SoftmaxCrossEntropy { classes } => {
                w.write_all(&[0])?;
                u64w(&mut w, classes)?;
            }
            LossHead::Triplet { lambda, margin } => {
                w.write_all(&[1])?;
                f64s(&mut w, &[lambda, margin])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PTCN" {
            return Err(bad("bad magic"));
        }
        let mut word4 = [0u8; 4];
        r.read_exact(&mut word4)?;
        if u32::from_le_bytes(word4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut word4)?;
        let n_layers = u32::from_le_bytes(word4);
        let read_u64 = |r: &mut R| -> Result<usize, NetError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("size overflow"))
        };
        let read_f64s = |r: &mut R, len: usize| -> Result<Vec<f64>, NetError> {
            let mut b = [0u8; 8];
            (0..len)
                .map(|_| {
                    r.read_exact(&mut b)?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect()
        };
        let mut tag = [0u8; 1];
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            r.read_exact(&mut tag)?;
            layers.push(match tag[0] {
                0 => {
                    let q = read_u64(&mut r)?;
                    let p = read_u64(&mut r)?;
                    let n_bins = read_u64(&mut r)?;
                    let fields = (0..p).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>, _>>()?;
                    let weights = read_f64s(&mut r, q * p * n_bins)?;
                    Layer::Ptc(FilterBank::new(q, p, n_bins, weights, fields).map_err(|e| bad(&e.to_string()))?)
                }
                1 => Layer::Relu,
                2 => Layer::GlobalPool,
                3 => Layer::Flatten,
                4 => {
                    let inputs = read_u64(&mut r)?;
                    let outputs = read_u64(&mut r)?;
                    let weight = read_f64s(&mut r, inputs * outputs)?;
                    let bias = read_f64s(&mut r, outputs)?;
                    Layer::FullyConnected(Dense {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    })
                }
                t => return Err(bad(&format!("unknown layer tag {t}"))),
            });
        }
        r.read_exact(&mut tag)?;
        let head = match tag[0] {
            0 => LossHead::SoftmaxCrossEntropy {
                classes: read_u64(&mut r)?,
            },
            1 => {
                let v = read_f64s(&mut r, 2)?;
                LossHead::Triplet {
                    lambda: v[0],
                    margin: v[1],
                }
            }
            t => return Err(bad(&format!("unknown head tag {t}"))),
        };
        Ok(Network { layers, head })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

fn forward_layer(index: usize, layer: &Layer, domain: &Domain, x: SignalBatch) -> Result<(SignalBatch, LayerCache), NetError> {
    let shape = |what, expected, got| {
        if expected == got {
            Ok(())
        } else {
            Err(NetError::Shape {
                layer: index,
                what,
                expected,
                got,
            })
        }
    };
    Ok(match layer {
        Layer::Ptc(bank) => {
            shape("channels", bank.q(), x.channels)?;
            shape("vertices", domain.n_vertices(), x.n)?;
            let (y, cache) = ptc_forward_batched(bank, domain.bases(), domain.mass(), &x)
                .map_err(|source| NetError::Layer { layer: index, source })?;
            (y, LayerCache::Ptc(cache))
        }
        Layer::Relu => {
            let mut y = x;
            let mask: Vec<bool> = y.data.iter().map(|&v| v > 0.0).collect();
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            (y, LayerCache::Relu(mask))
        }
        Layer::GlobalPool => {
            shape("vertices", domain.n_vertices(), x.n)?;
            let total: f64 = domain.mass().iter().sum();
            let (n, c) = (x.n, x.channels);
            let mut y = SignalBatch::zeros(1, c, x.samples);
            for s in 0..x.samples {
                for v in 0..n {
                    let w = domain.mass()[v] / total;
                    for k in 0..c {
                        y.data[s * c + k] += w * x.data[(s * n + v) * c + k];
                    }
                }
            }
            (y, LayerCache::GlobalPool { n })
        }
        Layer::Flatten => {
            let cache = LayerCache::Flatten {
                n: x.n,
                channels: x.channels,
            };
            (
                SignalBatch {
                    n: 1,
                    channels: x.n * x.channels,
                    samples: x.samples,
                    data: x.data,
                },
                cache,
            )
        }
        Layer::FullyConnected(d) => {
            shape("features", d.inputs, x.channels)?;
            let rows = x.samples * x.n;
            let mut y = SignalBatch::zeros(x.n, d.outputs, x.samples);
            for row in y.data.chunks_exact_mut(d.outputs) {
                row.copy_from_slice(&d.bias);
            }
            gemm(rows, d.inputs, d.outputs, &x.data, false, &d.weight, true, 1.0, &mut y.data);
            (y, LayerCache::Dense(x))
        }
    })
}

/// Softmax cross-entropy of `logits` against `label`, and its gradient
/// `softmax − onehot`.
pub fn loss_softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), NetError> {
    if label >= logits.len() {
        return Err(NetError::Label {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `‖a − p‖² + λ (μ − ‖a − n‖)²` and its gradients with respect to the
/// anchor `a`, positive `p` and negative `n`.
pub fn loss_triplet(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    lambda: f64,
    margin: f64,
) -> Result<(f64, [Vec<f64>; 3]), NetError> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(NetError::FeatureLength(anchor.len(), positive.len(), negative.len()));
    }
    let dp: Vec<f64> = anchor.iter().zip(positive).map(|(a, p)| a - p).collect();
    let dn: Vec<f64> = anchor.iter().zip(negative).map(|(a, n)| a - n).collect();
    let pos = dp.iter().map(|d| d * d).sum::<f64>();
    let dist = dn.iter().map(|d| d * d).sum::<f64>().sqrt();
    let gap = margin - dist;
    let loss = pos + lambda * gap * gap;
    // d/da of λ(μ − ‖dn‖)² is −2λ(μ − ‖dn‖) dn/‖dn‖; taken as zero at dn = 0.
    let coef = if dist > 0.0 { -2.0 * lambda * gap / dist } else { 0.0 };
    let g_pos: Vec<f64> = dp.iter().map(|d| -2.0 * d).collect();
    let g_neg: Vec<f64> = dn.iter().map(|d| -coef * d).collect();
    let g_anchor: Vec<f64> = dp.iter().zip(&dn).map(|(p, n)| 2.0 * p + coef * n).collect();
    Ok((loss, [g_anchor, g_pos, g_neg]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Which vector-field set the run uses; recorded for bookkeeping.
    pub field_set: usize,
    pub log_every: usize,
    /// Evaluation samples drawn (from the front of the eval set) at every
    /// log point; `0` skips intermediate evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            learning_rate: 1e-3,
            iterations: 5000,
            optimizer: Optimizer::Sgd,
            seed: 0,
            field_set: 0,
            log_every: 100,
            eval_samples: 500,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("Adam needs 0 <= beta < 1 and eps > 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean per-sample training loss since the previous row.
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,eval_accuracy\n");
        for r in &self.rows {
            let acc = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.iteration, r.train_loss, acc));
        }
        out
    }
}

struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &Gradients, config: &TrainConfig) {
        self.step += 1;
        let lr = config.learning_rate;
        for (k, (param, grad)) in net.parameters_mut().into_iter().zip(&grads.0).enumerate() {
            match config.optimizer {
                Optimizer::Sgd => param.iter_mut().zip(grad).for_each(|(w, g)| *w -= lr * g),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for ((w, g), (m, v)) in param.iter_mut().zip(grad).zip(self.m[k].iter_mut().zip(self.v[k].iter_mut())) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Summed softmax cross-entropy over a batch of logits and its gradient.
pub fn batch_softmax_ce(logits: &SignalBatch, labels: &[usize]) -> Result<(f64, SignalBatch), NetError> {
    let classes = logits.channels * logits.n;
    let mut grad = SignalBatch::zeros(logits.n, logits.channels, logits.samples);
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let (l, g) = loss_softmax_ce(&logits.data[s * classes..(s + 1) * classes], label)?;
        total += l;
        grad.data[s * classes..(s + 1) * classes].copy_from_slice(&g);
    }
    Ok((total, grad))
}

/// Minibatch training on image data sampled onto the given domains. Batch
/// `t` runs on `domains[t % domains.len()]`. The batch loss is the sum of
/// per-sample losses. Evaluation at log points uses `eval` when given.
pub fn train(
    net: &mut Network,
    domains: &[Domain],
    data: &LabeledImages,
    eval: Option<(&Domain, &LabeledImages)>,
    config: &TrainConfig,
) -> Result<MetricsLog, NetError> {
    config.validate()?;
    if data.len() == 0 || domains.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let LossHead::SoftmaxCrossEntropy { classes } = net.head else {
        return Err(NetError::Config("image training needs a softmax head".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut state = OptimizerState::new(net);
    let mut log = MetricsLog::default();
    let (mut window_loss, mut window_samples, mut last_finite) = (0.0, 0usize, f64::NAN);
    for iteration in 0..config.iterations {
        let mut indices = Vec::with_capacity(config.batch_size);
        while indices.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let domain = &domains[iteration % domains.len()];
        let input = domain.sample_images(data, &indices)?;
        let labels: Vec<usize> = indices.iter().map(|&k| data.label(k) as usize).collect();
        let (logits, caches) = net.forward(domain, &input)?;
        if logits.n * logits.channels != classes {
            return Err(NetError::HeadMismatch {
                expected: classes,
                got: logits.n * logits.channels,
            });
        }
        let (loss, grad) = batch_softmax_ce(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(NetError::Diverged {
                iteration,
                loss,
                last_finite,
            });
        }
        last_finite = loss;
        let (grads, _) = net.backward(domain, &caches, grad)?;
        state.apply(net, &grads, config);
        window_loss += loss;
        window_samples += indices.len();
        if (iteration + 1) % config.log_every == 0 || iteration + 1 == config.iterations {
            let eval_accuracy = match eval {
                Some((d, set)) if config.eval_samples > 0 => Some(evaluate_limit(net, d, set, config.eval_samples)?),
                _ => None,
            };
            log.rows.push(MetricsRow {
                iteration: iteration + 1,
                train_loss: window_loss / window_samples as f64,
                eval_accuracy,
            });
            log::info!("iteration {} loss {:.4} eval {:?}", iteration + 1, window_loss / window_samples as f64, eval_accuracy);
            window_loss = 0.0;
            window_samples = 0;
        }
    }
    Ok(log)
}

/// Fraction of samples whose arg-max output equals the label.
pub fn evaluate(net: &Network, domain: &Domain, data: &LabeledImages) -> Result<f64, NetError> {
    evaluate_limit(net, domain, data, data.len())
}

pub fn evaluate_limit(net: &Network, domain: &Domain, data: &LabeledImages, limit: usize) -> Result<f64, NetError> {
    let total = limit.min(data.len());
    if total == 0 {
        return Err(NetError::EmptyDataset);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..total).collect();
    for chunk in indices.chunks(100) {
        let out = net.predict(domain, &domain.sample_images(data, chunk)?)?;
        let width = out.n * out.channels;
        for (s, &k) in chunk.iter().enumerate() {
            if argmax(&out.data[s * width..(s + 1) * width]) == data.label(k) as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
        .0
}
