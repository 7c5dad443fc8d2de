//! Three-layer ReLU perceptron `d -> H1 -> H2 -> K` with softmax
//! cross-entropy, hand-written backprop and a minibatch SGD loop.
//!
//! Weight matrices are row-major with one row per output unit, so `W1` is
//! `H1 x d`. Batched passes go through `matrixmultiply::dgemm`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const N_CLASSES: usize = 10;
pub const INPUT_DIM: usize = 784;

const CKPT_MAGIC: &[u8; 4] = b"WLMP";
const CKPT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 2048;

/// Layer sizes `(input, h1, h2, classes)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub h1: usize,
    pub h2: usize,
    pub classes: usize,
}

impl Dims {
    pub fn new(input: usize, h1: usize, h2: usize, classes: usize) -> Self {
        Self { input, h1, h2, classes }
    }

    pub fn n_params(&self) -> usize {
        self.h1 * (self.input + 1) + self.h2 * (self.h1 + 1) + self.classes * (self.h2 + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub dims: Dims,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            w1: vec![0.0; dims.h1 * dims.input],
            b1: vec![0.0; dims.h1],
            w2: vec![0.0; dims.h2 * dims.h1],
            b2: vec![0.0; dims.h2],
            w3: vec![0.0; dims.classes * dims.h2],
            b3: vec![0.0; dims.classes],
        }
    }

    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(dims: Dims, rng: &mut rng::Rng) -> Self {
        let mut p = Self::zeros(dims);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w {
                *v = rng.gen_range(-a..=a);
            }
        };
        fill(&mut p.w1, dims.input, dims.h1);
        fill(&mut p.w2, dims.h1, dims.h2);
        fill(&mut p.w3, dims.h2, dims.classes);
        p
    }

    pub fn n_params(&self) -> usize {
        self.dims.n_params()
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    /// Concatenation `w1, b1, w2, b2, w3, b3`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_flat(dims: Dims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.n_params() {
            return Err(Error::arg(format!(
                "flat vector has {} entries, architecture needs {}",
                flat.len(),
                dims.n_params()
            )));
        }
        let mut p = Self::zeros(dims);
        let mut at = 0;
        for b in p.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, blockwise.
    pub fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn dot(&self, other: &MlpParams) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::arg(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.dims.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let d = self.dims;
        let affine = |w: &[f64], b: &[f64], inp: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(i, bi)| bi + w[i * inp.len()..(i + 1) * inp.len()].iter().zip(inp).map(|(a, v)| a * v).sum::<f64>())
                .collect()
        };
        let pre1 = affine(&self.w1, &self.b1, x);
        let post1: Vec<f64> = pre1.iter().map(|&z| relu(z)).collect();
        let pre2 = affine(&self.w2, &self.b2, &post1);
        let post2: Vec<f64> = pre2.iter().map(|&z| relu(z)).collect();
        let logits = affine(&self.w3, &self.b3, &post2);
        debug_assert_eq!(logits.len(), d.classes);
        Ok(ForwardTrace {
            pre1,
            post1,
            pre2,
            post2,
            logits,
        })
    }

    /// Batched forward pass; `xs` is row-major `n x input`.
    pub fn forward_batch(&self, xs: &[f64]) -> Result<BatchTrace> {
        let d = self.dims;
        if xs.len() % d.input != 0 {
            return Err(Error::arg(format!(
                "batch of {} values is not a multiple of {} features",
                xs.len(),
                d.input
            )));
        }
        let n = xs.len() / d.input;
        let mut z1 = vec![0.0; n * d.h1];
        dense_layer(xs, n, d.input, &self.w1, &self.b1, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
        let mut z2 = vec![0.0; n * d.h2];
        dense_layer(&a1, n, d.h1, &self.w2, &self.b2, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|&z| relu(z)).collect();
        let mut logits = vec![0.0; n * d.classes];
        dense_layer(&a2, n, d.h2, &self.w3, &self.b3, &mut logits);
        Ok(BatchTrace {
            n,
            z1,
            a1,
            z2,
            a2,
            logits,
        })
    }

    /// Logits for many rows, evaluated in bounded chunks.
    pub fn logits(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len() / self.dims.input.max(1) * self.dims.classes);
        for chunk in xs.chunks(EVAL_CHUNK * self.dims.input) {
            out.extend(self.forward_batch(chunk)?.logits);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.logits))
    }

    pub fn predict_batch(&self, xs: &[f64]) -> Result<Vec<usize>> {
        Ok(self.logits(xs)?.chunks(self.dims.classes).map(argmax).collect())
    }

    pub fn accuracy(&self, xs: &[f64], ys: &[usize]) -> Result<f64> {
        let preds = self.predict_batch(xs)?;
        if preds.len() != ys.len() {
            return Err(Error::arg(format!("{} rows but {} labels", preds.len(), ys.len())));
        }
        if ys.is_empty() {
            return Ok(0.0);
        }
        let hits = preds.iter().zip(ys).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / ys.len() as f64)
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, xs: &[f64], ys: &[usize]) -> Result<(f64, MlpParams)> {
        let d = self.dims;
        check_batch(d, xs, ys)?;
        let t = self.forward_batch(xs)?;
        let (loss, g3) = softmax_xent_grad(&t.logits, ys, d.classes)?;
        let mut grad = MlpParams::zeros(d);
        self.backward(xs, &t, &g3, &mut grad);
        Ok((loss, grad))
    }

    /// Mean loss only.
    pub fn loss(&self, xs: &[f64], ys: &[usize]) -> Result<f64> {
        check_batch(self.dims, xs, ys)?;
        let t = self.forward_batch(xs)?;
        Ok(softmax_xent_grad(&t.logits, ys, self.dims.classes)?.0)
    }

    /// Backpropagates `g3 = dL/dlogits` (row-major `n x K`) into `grad`.
    pub(crate) fn backward(&self, xs: &[f64], t: &BatchTrace, g3: &[f64], grad: &mut MlpParams) {
        let d = self.dims;
        let n = t.n;
        weight_grad(g3, &t.a2, n, d.classes, d.h2, &mut grad.w3);
        col_sums(g3, n, d.classes, &mut grad.b3);
        let mut g2 = vec![0.0; n * d.h2];
        backprop_input(g3, n, d.classes, &self.w3, d.h2, &mut g2);
        mask_in_place(&mut g2, &t.z2);
        weight_grad(&g2, &t.a1, n, d.h2, d.h1, &mut grad.w2);
        col_sums(&g2, n, d.h2, &mut grad.b2);
        let mut g1 = vec![0.0; n * d.h1];
        backprop_input(&g2, n, d.h2, &self.w2, d.h1, &mut g1);
        mask_in_place(&mut g1, &t.z1);
        weight_grad(&g1, xs, n, d.h1, d.input, &mut grad.w1);
        col_sums(&g1, n, d.h1, &mut grad.b1);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dims;
        let mut buf = Vec::with_capacity(24 + 8 * self.n_params());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for w in [d.input, d.h1, d.h2, d.classes] {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in self.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Checkpoint layout (little-endian): `"WLMP"`, u32 version, four u32
    /// widths `input, h1, h2, classes`, then the flattened parameters as
    /// f64 in the order `w1, b1, w2, b2, w3, b3`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |field: &'static str, detail: String| Error::Format {
            file: path.display().to_string(),
            field,
            detail,
        };
        if bytes.len() < 24 || &bytes[..4] != CKPT_MAGIC {
            return Err(fmt("magic", "not a parameter checkpoint".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u32_at(4) != CKPT_VERSION {
            return Err(fmt("version", format!("unsupported version {}", u32_at(4))));
        }
        let dims = Dims::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        let body = &bytes[24..];
        if body.len() != 8 * dims.n_params() {
            return Err(fmt("params", format!("expected {} bytes, found {}", 8 * dims.n_params(), body.len())));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(dims, &flat)
    }
}

/// Activations of a single example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre1: Vec<f64>,
    pub post1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub post2: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Activations of a batch, each row-major with `n` rows.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub n: usize,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub logits: Vec<f64>,
}

#[inline]
pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_batch(d: Dims, xs: &[f64], ys: &[usize]) -> Result<()> {
    if ys.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if xs.len() != ys.len() * d.input {
        return Err(Error::arg(format!(
            "{} values for {} rows of {} features",
            xs.len(),
            ys.len(),
            d.input
        )));
    }
    if let Some(&y) = ys.iter().find(|&&y| y >= d.classes) {
        return Err(Error::arg(format!("label {y} out of range")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input".into()));
    }
    Ok(())
}

/// Mean cross-entropy and `dL/dlogits = (softmax - onehot) / n`.
pub(crate) fn softmax_xent_grad(logits: &[f64], ys: &[usize], k: usize) -> Result<(f64, Vec<f64>)> {
    let n = ys.len();
    let mut g = softmax_rows(logits, k);
    let mut loss = 0.0;
    for (row, &y) in g.chunks_mut(k).zip(ys) {
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, g))
}

pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `C = A·B` (or `C += A·B` when `accumulate`) with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    accumulate: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertions above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (n x m) = inp (n x k) · Wᵀ + b` where `W` is `m x k`.
pub(crate) fn dense_layer(inp: &[f64], n: usize, k: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = b.len();
    gemm(n, k, m, inp, k, 1, w, 1, k, false, out);
    for row in out.chunks_mut(m) {
        for (o, bi) in row.iter_mut().zip(b) {
            *o += bi;
        }
    }
}

/// `dW (m x k) = gᵀ (m x n) · inp (n x k)`.
pub(crate) fn weight_grad(g: &[f64], inp: &[f64], n: usize, m: usize, k: usize, dw: &mut [f64]) {
    gemm(m, n, k, g, 1, m, inp, k, 1, false, dw);
}

/// Accumulating variant of [`weight_grad`].
pub(crate) fn weight_grad_acc(g: &[f64], inp: &[f64], n: usize, m: usize, k: usize, dw: &mut [f64]) {
    gemm(m, n, k, g, 1, m, inp, k, 1, true, dw);
}

/// `out (n x k) = g (n x m) · W (m x k)`.
pub(crate) fn backprop_input(g: &[f64], n: usize, m: usize, w: &[f64], k: usize, out: &mut [f64]) {
    gemm(n, m, k, g, m, 1, w, k, 1, false, out);
}

pub(crate) fn backprop_input_acc(g: &[f64], n: usize, m: usize, w: &[f64], k: usize, out: &mut [f64]) {
    gemm(n, m, k, g, m, 1, w, k, 1, true, out);
}

pub(crate) fn col_sums(g: &[f64], n: usize, m: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in g.chunks(m).take(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub(crate) fn mask_in_place(g: &mut [f64], pre: &[f64]) {
    for (v, &z) in g.iter_mut().zip(pre) {
        if z <= 0.0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub widths: (usize, usize),
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub target_train_accuracy: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.widths.0 == 0 || self.widths.1 == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("widths, batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.target_train_accuracy > 0.0 && self.target_train_accuracy <= 1.0) {
            return Err(Error::Config("target train accuracy must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub init: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: f64,
    pub reached_target: bool,
}

/// Trains on the split's training rows with `N_CLASSES` outputs.
pub fn train(config: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<(MlpParams, TrainLog)> {
    let (xs, ys) = dataset.gather(&split.train_indices);
    train_xy(config, &xs, &ys, dataset.n_features(), N_CLASSES)
}

/// Minibatch SGD from a Glorot start. Each epoch uses a fresh permutation;
/// training stops once full-batch train accuracy reaches the target.
pub fn train_xy(config: &TrainConfig, xs: &[f64], ys: &[usize], input: usize, classes: usize) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    let dims = Dims::new(input, config.widths.0, config.widths.1, classes);
    check_batch(dims, xs, ys)?;
    let n = ys.len();
    let mut params = MlpParams::glorot(dims, &mut rng::stream_rng(config.seed, Stream::Init));
    let mut shuffle = rng::stream_rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        init: "glorot_uniform".into(),
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        epochs: Vec::new(),
        final_train_accuracy: 0.0,
        reached_target: false,
    };
    let full_batch = config.batch_size >= n;
    let mut bx = Vec::with_capacity(config.batch_size.min(n) * input);
    let mut by = Vec::with_capacity(config.batch_size.min(n));
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        if full_batch {
            let (loss, grad) = step_loss(&params, xs, ys, epoch)?;
            params.axpy(-config.learning_rate, &grad);
            loss_sum += loss;
            batches += 1;
        } else {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(config.batch_size) {
                bx.clear();
                by.clear();
                for &i in chunk {
                    bx.extend_from_slice(&xs[i * input..(i + 1) * input]);
                    by.push(ys[i]);
                }
                let (loss, grad) = step_loss(&params, &bx, &by, epoch)?;
                params.axpy(-config.learning_rate, &grad);
                loss_sum += loss;
                batches += 1;
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let acc = params.accuracy(xs, ys)?;
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            train_accuracy: acc,
        });
        log.final_train_accuracy = acc;
        if acc >= config.target_train_accuracy {
            log.reached_target = true;
            break;
        }
    }
    Ok((params, log))
}

fn step_loss(params: &MlpParams, xs: &[f64], ys: &[usize], epoch: usize) -> Result<(f64, MlpParams)> {
    match params.loss_and_grad(xs, ys) {
        Ok((loss, grad)) if loss.is_finite() => Ok((loss, grad)),
        Ok(_) | Err(Error::Numeric(_)) => Err(Error::Diverged { epoch }),
        Err(e) => Err(e),
    }
}
