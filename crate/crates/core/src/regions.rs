//! Activation-region measures. A pattern is the set of units whose
//! pre-activation is strictly positive; an exact zero counts as inactive.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{MlpParams, N_CLASSES};

/// Widest layer whose patterns we pack.
pub const MAX_PATTERN_WIDTH: usize = 256;
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActivationPattern {
    layer: Layer,
    width: usize,
    bits: [u64; MAX_PATTERN_WIDTH / 64],
}

impl ActivationPattern {
    pub fn from_preactivations(layer: Layer, pre: &[f64]) -> Result<Self> {
        if pre.len() > MAX_PATTERN_WIDTH {
            return Err(Error::Capacity(format!(
                "layer width {} exceeds the pattern limit {MAX_PATTERN_WIDTH}",
                pre.len()
            )));
        }
        let mut bits = [0u64; MAX_PATTERN_WIDTH / 64];
        for (i, &z) in pre.iter().enumerate() {
            if z > 0.0 {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(Self {
            layer,
            width: pre.len(),
            bits,
        })
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_active(&self, unit: usize) -> bool {
        unit < self.width && self.bits[unit / 64] >> (unit % 64) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.width).map(|i| self.is_active(i)).collect()
    }
}

/// Pattern of every row of `xs` at `layer`, in row order.
pub fn pattern_list(params: &MlpParams, xs: &[f64], layer: Layer) -> Result<Vec<ActivationPattern>> {
    let d = params.dims;
    let width = match layer {
        Layer::One => d.h1,
        Layer::Two => d.h2,
    };
    if width > MAX_PATTERN_WIDTH {
        return Err(Error::Capacity(format!("layer width {width} exceeds {MAX_PATTERN_WIDTH}")));
    }
    if xs.len() % d.input != 0 {
        return Err(Error::arg("input rows do not match the network width"));
    }
    let chunks: Vec<&[f64]> = xs.chunks(CHUNK_ROWS * d.input).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let t = params.forward_batch(chunk)?;
            let pre = match layer {
                Layer::One => &t.z1,
                Layer::Two => &t.z2,
            };
            pre.chunks(width)
                .map(|row| ActivationPattern::from_preactivations(layer, row))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Distinct patterns attained by `xs`.
pub fn patterns(params: &MlpParams, xs: &[f64], layer: Layer) -> Result<BTreeSet<ActivationPattern>> {
    Ok(pattern_list(params, xs, layer)?.into_iter().collect())
}

pub fn pattern_count(params: &MlpParams, xs: &[f64], layer: Layer) -> Result<usize> {
    Ok(patterns(params, xs, layer)?.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub n_train: usize,
    pub n_unseen: usize,
}

/// Layer-2 regions touched by the training or unseen inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionTable {
    pub regions: BTreeMap<ActivationPattern, RegionCounts>,
}

impl RegionTable {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Regions holding unseen inputs but no training inputs.
    pub fn k_free(&self) -> usize {
        self.regions.values().filter(|c| c.n_train == 0 && c.n_unseen > 0).count()
    }

    pub fn total_train(&self) -> usize {
        self.regions.values().map(|c| c.n_train).sum()
    }

    pub fn total_unseen(&self) -> usize {
        self.regions.values().map(|c| c.n_unseen).sum()
    }
}

pub fn region_table(params: &MlpParams, train_xs: &[f64], unseen_xs: &[f64]) -> Result<RegionTable> {
    let mut table = RegionTable::default();
    for p in pattern_list(params, train_xs, Layer::Two)? {
        table.regions.entry(p).or_default().n_train += 1;
    }
    for p in pattern_list(params, unseen_xs, Layer::Two)? {
        table.regions.entry(p).or_default().n_unseen += 1;
    }
    Ok(table)
}

fn per_region_budget(d2: usize) -> usize {
    d2 * N_CLASSES + N_CLASSES
}

/// `Σ_r max(0, 10·D2 + 10 − n_r)` over every region in the table, where
/// `n_r` is the region's training count.
pub fn free_parameters(table: &RegionTable, d2: usize) -> u64 {
    let budget = per_region_budget(d2);
    table.regions.values().map(|c| budget.saturating_sub(c.n_train) as u64).sum()
}

/// Same sum restricted to regions that hold at least one training input.
pub fn free_parameters_train_only(table: &RegionTable, d2: usize) -> u64 {
    let budget = per_region_budget(d2);
    table
        .regions
        .values()
        .filter(|c| c.n_train > 0)
        .map(|c| budget.saturating_sub(c.n_train) as u64)
        .sum()
}

/// `ln` of the training-label policy's weakness `(K+1)^k_free`.
pub fn region_weakness_log(k_free: usize, classes: usize) -> f64 {
    k_free as f64 * ((classes + 1) as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    Rate(f64),
    /// The subject classifies every unseen point correctly.
    NoErrors,
}

impl Agreement {
    pub fn value(&self) -> Option<f64> {
        match self {
            Agreement::Rate(r) => Some(*r),
            Agreement::NoErrors => None,
        }
    }
}

/// Among the subject's misclassified unseen points, the fraction of
/// (point, peer) pairs where the peer predicts the true label.
pub fn ensemble_agreement(subject: &MlpParams, peers: &[MlpParams], xs: &[f64], ys: &[usize]) -> Result<Agreement> {
    let preds = subject.predict_batch(xs)?;
    if preds.len() != ys.len() {
        return Err(Error::arg(format!("{} rows for {} labels", preds.len(), ys.len())));
    }
    let wrong: Vec<usize> = (0..ys.len()).filter(|&i| preds[i] != ys[i]).collect();
    ensemble_agreement_on(&wrong, peers, xs, ys, subject.dims.input)
}

/// Agreement given the subject's error indices; peers are evaluated only
/// on those rows.
pub fn ensemble_agreement_on(wrong: &[usize], peers: &[MlpParams], xs: &[f64], ys: &[usize], input: usize) -> Result<Agreement> {
    if peers.is_empty() {
        return Err(Error::arg("ensemble agreement needs at least one peer"));
    }
    if wrong.is_empty() {
        return Ok(Agreement::NoErrors);
    }
    let mut sub = Vec::with_capacity(wrong.len() * input);
    for &i in wrong {
        sub.extend_from_slice(&xs[i * input..(i + 1) * input]);
    }
    let mut hits = 0usize;
    for peer in peers {
        let p = peer.predict_batch(&sub)?;
        hits += wrong.iter().zip(&p).filter(|(&i, &c)| ys[i] == c).count();
    }
    Ok(Agreement::Rate(hits as f64 / (wrong.len() * peers.len()) as f64))
}

/// Agreement from precomputed predictions: `subject` and each peer hold one
/// class per row of `ys`.
pub fn agreement_from_predictions(subject: &[usize], peers: &[&[usize]], ys: &[usize]) -> Result<Agreement> {
    if peers.is_empty() {
        return Err(Error::arg("ensemble agreement needs at least one peer"));
    }
    if subject.len() != ys.len() || peers.iter().any(|p| p.len() != ys.len()) {
        return Err(Error::arg("prediction lengths differ from the label count"));
    }
    let wrong: Vec<usize> = (0..ys.len()).filter(|&i| subject[i] != ys[i]).collect();
    if wrong.is_empty() {
        return Ok(Agreement::NoErrors);
    }
    let hits: usize = peers.iter().map(|p| wrong.iter().filter(|&&i| p[i] == ys[i]).count()).sum();
    Ok(Agreement::Rate(hits as f64 / (wrong.len() * peers.len()) as f64))
}
