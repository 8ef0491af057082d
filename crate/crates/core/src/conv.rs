//! Applying transported kernels to vertex signals.
//!
//! The batched path never assembles `K`. For every vector field it gathers
//! `T[x][(i, b)] = Σ_y B_b[x][y] M[y] F_i[y]` once per signal and contracts
//! `T` against the template weights with a dense product, so the cost of a
//! layer is one sparse gather plus one `(B·n) × (q·n_bins) × p` GEMM.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::kernel::{assemble, KernelBasis, KernelMatrix, KernelTemplate};
use crate::mesh::MassMatrix;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("filter {filter} uses field {field} but only {count} bases are bound")]
    MissingBasis { filter: usize, field: usize, count: usize },
    #[error("bases disagree on the number of bins ({0} vs {1})")]
    BinMismatch(usize, usize),
    #[error("backward called without a forward cache for this batch")]
    MissingCache,
    #[error("signal contains a non-finite value at vertex {vertex}, channel {channel}")]
    NonFinite { vertex: usize, channel: usize },
    #[error("signal parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("not a binary signal file (bad magic)")]
    BadMagic,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), ConvError> {
    if expected == got {
        Ok(())
    } else {
        Err(ConvError::Shape { what, expected, got })
    }
}

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with
/// optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these dense strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A real signal with `q` channels on `n` vertices, vertex-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    n: usize,
    q: usize,
    values: Vec<f64>,
    pub names: Option<Vec<String>>,
}

impl Signal {
    pub fn new(n: usize, q: usize, values: Vec<f64>) -> Result<Self, ConvError> {
        check("signal length", n * q, values.len())?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(ConvError::NonFinite {
                vertex: k / q.max(1),
                channel: k % q.max(1),
            });
        }
        Ok(Signal {
            n,
            q,
            values,
            names: None,
        })
    }

    pub fn zeros(n: usize, q: usize) -> Self {
        Signal {
            n,
            q,
            values: vec![0.0; n * q],
            names: None,
        }
    }

    pub fn from_channel(values: Vec<f64>) -> Result<Self, ConvError> {
        Signal::new(values.len(), 1, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, vertex: usize, channel: usize) -> f64 {
        self.values[vertex * self.q + channel]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.q).copied().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("vertex");
        for c in 0..self.q {
            match &self.names {
                Some(names) => {
                    let _ = write!(out, ",{}", names[c]);
                }
                None => {
                    let _ = write!(out, ",c{c}");
                }
            }
        }
        out.push('\n');
        for v in 0..self.n {
            let _ = write!(out, "{v}");
            for c in 0..self.q {
                let _ = write!(out, ",{}", self.get(v, c));
            }
            out.push('\n');
        }
        out
    }

    /// Parses `vertex,ch0,ch1,…` with a header row; rows may come in any
    /// order but must cover `0..n` exactly once.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, ConvError> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines.next().ok_or(ConvError::Parse {
            line: 1,
            message: "empty file".into(),
        })??;
        let names: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let q = names.len();
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| ConvError::Parse { line: k + 2, message };
            let mut fields = line.split(',');
            let v: usize = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("vertex id: {e}")))?;
            let vals = fields
                .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(format!("{e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != q {
                return Err(parse_err(format!("expected {q} channels, found {}", vals.len())));
            }
            rows.push((v, vals));
        }
        let n = rows.len();
        let mut values = vec![f64::NAN; n * q];
        let mut seen = vec![false; n];
        for (v, vals) in rows {
            if v >= n || seen[v] {
                return Err(ConvError::Parse {
                    line: 0,
                    message: format!("vertex ids must be a permutation of 0..{n} (bad id {v})"),
                });
            }
            seen[v] = true;
            values[v * q..(v + 1) * q].copy_from_slice(&vals);
        }
        let mut s = Signal::new(n, q, values)?;
        s.names = Some(names);
        Ok(s)
    }

    /// `PTCS`, u64 n, u64 q, then `n·q` little-endian doubles row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ConvError> {
        w.write_all(b"PTCS")?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.q as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ConvError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PTCS" {
            return Err(ConvError::BadMagic);
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let q = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(n * q);
        for _ in 0..n * q {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Signal::new(n, q, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConvError> {
        if path.extension().is_some_and(|e| e == "csv") {
            fs::write(path, self.to_csv())?;
        } else {
            self.write_binary(std::io::BufWriter::new(fs::File::create(path)?))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConvError> {
        let file = fs::File::open(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            Signal::from_csv(file)
        } else {
            Signal::read_binary(BufReader::new(file))
        }
    }
}

/// `B` signals of identical shape stacked sample-major: row `s·n + x`,
/// column = channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBatch {
    pub n: usize,
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f64>,
}

impl SignalBatch {
    pub fn zeros(n: usize, channels: usize, samples: usize) -> Self {
        SignalBatch {
            n,
            channels,
            samples,
            data: vec![0.0; n * channels * samples],
        }
    }

    pub fn from_signals(signals: &[Signal]) -> Result<Self, ConvError> {
        let first = signals.first().ok_or(ConvError::Shape {
            what: "batch size",
            expected: 1,
            got: 0,
        })?;
        let mut data = Vec::with_capacity(first.values.len() * signals.len());
        for s in signals {
            check("signal vertex count", first.n, s.n)?;
            check("signal channel count", first.q, s.q)?;
            data.extend_from_slice(&s.values);
        }
        Ok(SignalBatch {
            n: first.n,
            channels: first.q,
            samples: signals.len(),
            data,
        })
    }

    pub fn sample(&self, s: usize) -> Signal {
        let len = self.n * self.channels;
        Signal {
            n: self.n,
            q: self.channels,
            values: self.data[s * len..(s + 1) * len].to_vec(),
            names: None,
        }
    }
}

/// `Kᵀ (M ⊙ f)`: entry `x` is `Σ_y k(x, y) M[y] f[y]`.
pub fn ptc_apply(k: &KernelMatrix, mass: &MassMatrix, f: &[f64]) -> Result<Vec<f64>, ConvError> {
    check("mass length", k.n(), mass.len())?;
    check("signal length", k.n(), f.len())?;
    Ok(k.centre_rows().mul_vec(&mass.scale(f)))
}

/// `K g`: entry `y` is `Σ_x k(x, y) g[x]`. Together with the mass this is
/// the adjoint of [`ptc_apply`].
pub fn kernel_times(k: &KernelMatrix, g: &[f64]) -> Result<Vec<f64>, ConvError> {
    check("signal length", k.n(), g.len())?;
    Ok(k.centre_rows().transpose_mul_vec(g))
}

/// Template weights for `q` input channels and `p` filters, plus the vector
/// field each filter is transported along. Holds no geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    q: usize,
    p: usize,
    n_bins: usize,
    /// `weights[(i·p + j)·n_bins + b]` is bin `b` of the kernel taking input
    /// channel `i` to filter `j`.
    weights: Vec<f64>,
    field_of_filter: Vec<usize>,
}

impl FilterBank {
    pub fn new(q: usize, p: usize, n_bins: usize, weights: Vec<f64>, field_of_filter: Vec<usize>) -> Result<Self, ConvError> {
        if q == 0 || p == 0 || n_bins == 0 {
            return Err(ConvError::Shape {
                what: "filter bank dimension",
                expected: 1,
                got: 0,
            });
        }
        check("filter bank weights", q * p * n_bins, weights.len())?;
        check("field assignment length", p, field_of_filter.len())?;
        Ok(FilterBank {
            q,
            p,
            n_bins,
            weights,
            field_of_filter,
        })
    }

    pub fn zeros(q: usize, p: usize, n_bins: usize) -> Self {
        FilterBank {
            q,
            p,
            n_bins,
            weights: vec![0.0; q * p * n_bins],
            field_of_filter: vec![0; p],
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn field_of_filter(&self) -> &[usize] {
        &self.field_of_filter
    }

    pub fn set_field_of_filter(&mut self, assignment: Vec<usize>) -> Result<(), ConvError> {
        check("field assignment length", self.p, assignment.len())?;
        self.field_of_filter = assignment;
        Ok(())
    }

    pub fn index(&self, input: usize, filter: usize, bin: usize) -> usize {
        (input * self.p + filter) * self.n_bins + bin
    }

    pub fn kernel_weights(&self, input: usize, filter: usize) -> &[f64] {
        let start = self.index(input, filter, 0);
        &self.weights[start..start + self.n_bins]
    }

    /// The `(input, filter)` template over `basis`'s grid.
    pub fn template(&self, basis: &KernelBasis, input: usize, filter: usize) -> KernelTemplate {
        let grid = basis.grid();
        KernelTemplate {
            anchor: basis.anchor(),
            radius: grid.radius,
            n_r: grid.n_r,
            n_theta: grid.n_theta,
            weights: self.kernel_weights(input, filter).to_vec(),
        }
    }

    fn filters_on(&self, field: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| self.field_of_filter[j] == field).collect()
    }

    /// `(q·n_bins) × |filters|` matrix of weights for the given filters.
    fn packed(&self, filters: &[usize]) -> Vec<f64> {
        let cols = filters.len();
        let mut w = vec![0.0; self.q * self.n_bins * cols];
        for i in 0..self.q {
            for (c, &j) in filters.iter().enumerate() {
                for b in 0..self.n_bins {
                    w[(i * self.n_bins + b) * cols + c] = self.weights[self.index(i, j, b)];
                }
            }
        }
        w
    }

    fn validate(&self, bases: &[Arc<KernelBasis>], mass: &[f64], batch: &SignalBatch) -> Result<(), ConvError> {
        check("input channels", self.q, batch.channels)?;
        check("mass length", batch.n, mass.len())?;
        for (j, &field) in self.field_of_filter.iter().enumerate() {
            let basis = bases.get(field).ok_or(ConvError::MissingBasis {
                filter: j,
                field,
                count: bases.len(),
            })?;
            check("basis vertex count", batch.n, basis.n_vertices())?;
            if basis.n_bins() != self.n_bins {
                return Err(ConvError::BinMismatch(basis.n_bins(), self.n_bins));
            }
        }
        Ok(())
    }
}

/// Gathered neighbourhood data kept for the backward pass: for every field
/// in use, `T` of shape `(B·n) × (q·n_bins)`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    samples: usize,
    n: usize,
    gathered: Vec<(usize, Vec<f64>)>,
}

impl ForwardCache {
    pub fn samples(&self) -> usize {
        self.samples
    }
}

fn gather_batch(basis: &KernelBasis, mass: &[f64], batch: &SignalBatch, n_bins: usize) -> Vec<f64> {
    let (n, q) = (batch.n, batch.channels);
    let width = q * n_bins;
    let mut t = vec![0.0; batch.samples * n * width];
    let mut z = vec![0.0; n];
    for s in 0..batch.samples {
        let block = &batch.data[s * n * q..(s + 1) * n * q];
        let out = &mut t[s * n * width..(s + 1) * n * width];
        for i in 0..q {
            for (y, zy) in z.iter_mut().enumerate() {
                *zy = mass[y] * block[y * q + i];
            }
            basis.gather_into(&z, out, width, i * n_bins);
        }
    }
    t
}

/// `(F ⋆ K)_j = Σ_i F_i ⋆ K_ij` for every sample, every filter. `bases[f]`
/// is the kernel basis of vector field `f` on the current domain.
pub fn ptc_forward_batched(
    bank: &FilterBank,
    bases: &[Arc<KernelBasis>],
    mass: &[f64],
    batch: &SignalBatch,
) -> Result<(SignalBatch, ForwardCache), ConvError> {
    bank.validate(bases, mass, batch)?;
    let rows = batch.samples * batch.n;
    let width = bank.q * bank.n_bins;
    let mut out = SignalBatch::zeros(batch.n, bank.p, batch.samples);
    let mut gathered = Vec::new();
    let mut fields: Vec<usize> = bank.field_of_filter.clone();
    fields.sort_unstable();
    fields.dedup();
    for field in fields {
        let filters = bank.filters_on(field);
        let t = gather_batch(&bases[field], mass, batch, bank.n_bins);
        let w = bank.packed(&filters);
        let mut y = vec![0.0; rows * filters.len()];
        gemm(rows, width, filters.len(), &t, false, &w, false, 0.0, &mut y);
        for r in 0..rows {
            for (c, &j) in filters.iter().enumerate() {
                out.data[r * bank.p + j] = y[r * filters.len() + c];
            }
        }
        gathered.push((field, t));
    }
    Ok((
        out,
        ForwardCache {
            samples: batch.samples,
            n: batch.n,
            gathered,
        },
    ))
}

/// Gradients of a scalar loss with respect to the bank weights (same layout
/// as [`FilterBank::weights`]) and to the input batch.
#[derive(Clone, Debug)]
pub struct PtcGradients {
    pub weights: Vec<f64>,
    pub input: SignalBatch,
}

/// Back-propagates `upstream = ∂L/∂out` (shape of the forward output).
pub fn ptc_backward(
    bank: &FilterBank,
    bases: &[Arc<KernelBasis>],
    mass: &[f64],
    cache: Option<&ForwardCache>,
    upstream: &SignalBatch,
) -> Result<PtcGradients, ConvError> {
    backward_impl(bank, bases, mass, cache, upstream, true)
}

/// [`ptc_backward`] for a layer whose input needs no gradient; the
/// returned input gradient is all zeros.
pub fn ptc_backward_weights(
    bank: &FilterBank,
    bases: &[Arc<KernelBasis>],
    mass: &[f64],
    cache: Option<&ForwardCache>,
    upstream: &SignalBatch,
) -> Result<PtcGradients, ConvError> {
    backward_impl(bank, bases, mass, cache, upstream, false)
}

fn backward_impl(
    bank: &FilterBank,
    bases: &[Arc<KernelBasis>],
    mass: &[f64],
    cache: Option<&ForwardCache>,
    upstream: &SignalBatch,
    input_gradient: bool,
) -> Result<PtcGradients, ConvError> {
    let cache = cache.ok_or(ConvError::MissingCache)?;
    check("upstream channels", bank.p, upstream.channels)?;
    check("upstream samples", cache.samples, upstream.samples)?;
    check("upstream vertex count", cache.n, upstream.n)?;
    let (n, samples) = (cache.n, cache.samples);
    let rows = samples * n;
    let width = bank.q * bank.n_bins;
    let mut d_weights = vec![0.0; bank.weights.len()];
    let mut d_input = SignalBatch::zeros(n, bank.q, samples);
    let mut dz = vec![0.0; n];
    for (field, t) in &cache.gathered {
        let filters = bank.filters_on(*field);
        let cols = filters.len();
        let mut g = vec![0.0; rows * cols];
        for r in 0..rows {
            for (c, &j) in filters.iter().enumerate() {
                g[r * cols + c] = upstream.data[r * bank.p + j];
            }
        }
        // dW = Tᵀ G
        let mut dw = vec![0.0; width * cols];
        gemm(width, rows, cols, t, true, &g, false, 0.0, &mut dw);
        for i in 0..bank.q {
            for (c, &j) in filters.iter().enumerate() {
                for b in 0..bank.n_bins {
                    d_weights[bank.index(i, j, b)] += dw[(i * bank.n_bins + b) * cols + c];
                }
            }
        }
        if !input_gradient {
            continue;
        }
        // dT = G Wᵀ, then scatter back through the basis and the mass.
        let w = bank.packed(&filters);
        let mut dt = vec![0.0; rows * width];
        gemm(rows, cols, width, &g, false, &w, true, 0.0, &mut dt);
        let basis = &bases[*field];
        for s in 0..samples {
            let block = &dt[s * n * width..(s + 1) * n * width];
            for i in 0..bank.q {
                dz.iter_mut().for_each(|v| *v = 0.0);
                basis.scatter_from(block, width, i * bank.n_bins, &mut dz);
                for (y, d) in dz.iter().enumerate() {
                    d_input.data[(s * n + y) * bank.q + i] += mass[y] * d;
                }
            }
        }
    }
    Ok(PtcGradients {
        weights: d_weights,
        input: d_input,
    })
}

/// The same operator as [`ptc_forward_batched`] computed the slow way:
/// assemble every `K_ij`, apply it, and sum over input channels.
pub fn ptc_forward_reference(
    bank: &FilterBank,
    bases: &[Arc<KernelBasis>],
    mass: &MassMatrix,
    signal: &Signal,
) -> Result<Signal, ConvError> {
    check("input channels", bank.q, signal.q)?;
    let mut out = Signal::zeros(signal.n, bank.p);
    for j in 0..bank.p {
        let field = bank.field_of_filter[j];
        let basis = bases.get(field).ok_or(ConvError::MissingBasis {
            filter: j,
            field,
            count: bases.len(),
        })?;
        for i in 0..bank.q {
            let k = assemble(basis, &bank.template(basis, i, j), 1.0, 0.0, false)
                .expect("bank weights match the basis grid");
            let y = ptc_apply(&k, mass, &signal.channel(i))?;
            for (x, v) in y.iter().enumerate() {
                out.values[x * bank.p + j] += v;
            }
        }
    }
    Ok(out)
}
