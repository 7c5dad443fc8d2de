//! Curvature and norm measures that are not reparameterisation-invariant:
//! exact Hessian-vector products, the Hutchinson trace estimate and weight
//! norms.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{self, MlpParams};
use crate::rng::{self, Stream};

pub const DEFAULT_PROBES: usize = 50;

/// A twice-differentiable scalar objective over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>>;
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// `L(θ) = ½ θᵀ diag(d) θ`.
#[derive(Debug, Clone)]
pub struct DiagQuadratic {
    pub diag: Vec<f64>,
}

impl Objective for DiagQuadratic {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), theta)?;
        Ok(self.diag.iter().zip(theta).map(|(d, t)| d * t).collect())
    }

    fn hvp(&self, _theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), v)?;
        Ok(self.diag.iter().zip(v).map(|(d, x)| d * x).collect())
    }
}

/// Mean cross-entropy of a network on a fixed batch.
pub struct MlpLoss<'a> {
    pub dims: mlp::Dims,
    pub xs: &'a [f64],
    pub ys: &'a [usize],
}

impl Objective for MlpLoss<'_> {
    fn dim(&self) -> usize {
        self.dims.n_params()
    }

    fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = MlpParams::from_flat(self.dims, theta)?;
        Ok(p.loss_and_grad(self.xs, self.ys)?.1.flatten())
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let p = MlpParams::from_flat(self.dims, theta)?;
        let v = MlpParams::from_flat(self.dims, v)?;
        Ok(hvp(&p, self.xs, self.ys, &v)?.flatten())
    }
}

fn check_len(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() != dim {
        return Err(Error::arg(format!("vector of length {} for dimension {dim}", v.len())));
    }
    Ok(())
}

/// Exact `H·v` of the mean cross-entropy on `(xs, ys)` by a forward
/// directional pass followed by its reverse sweep. ReLU is linear at its
/// current activation pattern, so its second derivative contributes nothing.
pub fn hvp(params: &MlpParams, xs: &[f64], ys: &[usize], v: &MlpParams) -> Result<MlpParams> {
    let d = params.dims;
    if v.dims != d {
        return Err(Error::arg("direction has a different architecture"));
    }
    let t = params.forward_batch(xs)?;
    let n = t.n;
    if n != ys.len() || n == 0 {
        return Err(Error::arg(format!("{n} rows for {} labels", ys.len())));
    }
    let (_, g3) = mlp::softmax_xent_grad(&t.logits, ys, d.classes)?;
    let p = mlp::softmax_rows(&t.logits, d.classes);

    // directional forward
    let mut rz1 = vec![0.0; n * d.h1];
    mlp::dense_layer(xs, n, d.input, &v.w1, &v.b1, &mut rz1);
    let mut ra1 = rz1;
    mlp::mask_in_place(&mut ra1, &t.z1);

    let mut rz2 = vec![0.0; n * d.h2];
    mlp::dense_layer(&ra1, n, d.h1, &params.w2, &v.b2, &mut rz2);
    dense_acc(&t.a1, n, d.h1, &v.w2, d.h2, &mut rz2);
    let mut ra2 = rz2;
    mlp::mask_in_place(&mut ra2, &t.z2);

    let mut rz3 = vec![0.0; n * d.classes];
    mlp::dense_layer(&ra2, n, d.h2, &params.w3, &v.b3, &mut rz3);
    dense_acc(&t.a2, n, d.h2, &v.w3, d.classes, &mut rz3);

    // R(softmax)/n
    let mut rg3 = vec![0.0; n * d.classes];
    for ((out, pr), rz) in rg3.chunks_mut(d.classes).zip(p.chunks(d.classes)).zip(rz3.chunks(d.classes)) {
        let mean: f64 = pr.iter().zip(rz).map(|(a, b)| a * b).sum();
        for ((o, a), b) in out.iter_mut().zip(pr).zip(rz) {
            *o = a * (b - mean) / n as f64;
        }
    }

    // reverse sweep of the directional derivative
    let mut h = MlpParams::zeros(d);
    mlp::weight_grad(&rg3, &t.a2, n, d.classes, d.h2, &mut h.w3);
    mlp::weight_grad_acc(&g3, &ra2, n, d.classes, d.h2, &mut h.w3);
    mlp::col_sums(&rg3, n, d.classes, &mut h.b3);

    let mut g2 = vec![0.0; n * d.h2];
    mlp::backprop_input(&g3, n, d.classes, &params.w3, d.h2, &mut g2);
    mlp::mask_in_place(&mut g2, &t.z2);
    let mut rg2 = vec![0.0; n * d.h2];
    mlp::backprop_input(&rg3, n, d.classes, &params.w3, d.h2, &mut rg2);
    mlp::backprop_input_acc(&g3, n, d.classes, &v.w3, d.h2, &mut rg2);
    mlp::mask_in_place(&mut rg2, &t.z2);

    mlp::weight_grad(&rg2, &t.a1, n, d.h2, d.h1, &mut h.w2);
    mlp::weight_grad_acc(&g2, &ra1, n, d.h2, d.h1, &mut h.w2);
    mlp::col_sums(&rg2, n, d.h2, &mut h.b2);

    let mut rg1 = vec![0.0; n * d.h1];
    mlp::backprop_input(&rg2, n, d.h2, &params.w2, d.h1, &mut rg1);
    mlp::backprop_input_acc(&g2, n, d.h2, &v.w2, d.h1, &mut rg1);
    mlp::mask_in_place(&mut rg1, &t.z1);

    mlp::weight_grad(&rg1, xs, n, d.h1, d.input, &mut h.w1);
    mlp::col_sums(&rg1, n, d.h1, &mut h.b1);

    if !h.is_finite() {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(h)
}

/// `out (n x m) += inp (n x k) · Wᵀ` for `W` of shape `m x k`.
fn dense_acc(inp: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    mlp::gemm(n, k, m, inp, k, 1, w, 1, k, true, out);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    pub n_probes: usize,
    pub probe_seed: u64,
    pub per_probe: Vec<f64>,
}

/// Rademacher vector for probe `i`; depends only on `(seed, i)`.
pub fn rademacher(seed: u64, i: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::rng(rng::mix(rng::substream(seed, Stream::Hessian), i as u64));
    (0..dim).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Hutchinson estimate `mean_i vᵢᵀ H vᵢ`. Probes run in parallel and are
/// reduced in index order.
pub fn hessian_trace_of<O: Objective>(obj: &O, theta: &[f64], n_probes: usize, seed: u64) -> Result<TraceEstimate> {
    if n_probes == 0 {
        return Err(Error::arg("need at least one probe"));
    }
    check_len(obj.dim(), theta)?;
    let per_probe = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let v = rademacher(seed, i, obj.dim());
            let hv = obj.hvp(theta, &v)?;
            Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let value = per_probe.iter().sum::<f64>() / n_probes as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite trace estimate".into()));
    }
    Ok(TraceEstimate {
        value,
        n_probes,
        probe_seed: seed,
        per_probe,
    })
}

/// Trace of the Hessian of the mean cross-entropy on `(xs, ys)`.
pub fn hessian_trace(params: &MlpParams, xs: &[f64], ys: &[usize], n_probes: usize, seed: u64) -> Result<TraceEstimate> {
    let obj = MlpLoss {
        dims: params.dims,
        xs,
        ys,
    };
    hessian_trace_of(&obj, &params.flatten(), n_probes, seed)
}

/// L1 and L2 norms over every weight and bias.
pub fn weight_norms(params: &MlpParams) -> (f64, f64) {
    let flat = params.flatten();
    let l1 = flat.iter().map(|v| v.abs()).sum();
    let l2 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    (l1, l2)
}
