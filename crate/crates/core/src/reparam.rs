//! Function-preserving layer rescalings and the table that contrasts the
//! Hessian trace with quantities that do not move under them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpParams;
use crate::regions::{self, Agreement, Layer};
use crate::sharpness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReparamKind {
    /// `(βW1, βb1, W2/β, b2, W3, b3)`
    Beta,
    /// `(W1, b1, γW2, γb2, W3/γ, b3)`
    Gamma,
}

impl fmt::Display for ReparamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReparamKind::Beta => "beta",
            ReparamKind::Gamma => "gamma",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamSpec {
    pub kind: ReparamKind,
    pub value: f64,
}

impl ReparamSpec {
    pub fn beta(value: f64) -> Self {
        Self {
            kind: ReparamKind::Beta,
            value,
        }
    }

    pub fn gamma(value: f64) -> Self {
        Self {
            kind: ReparamKind::Gamma,
            value,
        }
    }
}

pub fn apply(spec: ReparamSpec, params: &MlpParams) -> Result<MlpParams> {
    let s = spec.value;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::arg(format!("{} must be positive, got {s}", spec.kind)));
    }
    let scale = |v: &[f64], by: f64| v.iter().map(|x| x * by).collect::<Vec<_>>();
    let divide = |v: &[f64], by: f64| v.iter().map(|x| x / by).collect::<Vec<_>>();
    let mut out = params.clone();
    match spec.kind {
        ReparamKind::Beta => {
            out.w1 = scale(&params.w1, s);
            out.b1 = scale(&params.b1, s);
            out.w2 = divide(&params.w2, s);
        }
        ReparamKind::Gamma => {
            out.w2 = scale(&params.w2, s);
            out.b2 = scale(&params.b2, s);
            out.w3 = divide(&params.w3, s);
        }
    }
    Ok(out)
}

/// Data shared by every row of an invariance report.
pub struct ReportInputs<'a> {
    /// Hessian batch.
    pub train_xs: &'a [f64],
    pub train_ys: &'a [usize],
    pub test_xs: &'a [f64],
    pub test_ys: &'a [usize],
    /// Points whose activation patterns are counted and on which EA is scored.
    pub unseen_xs: &'a [f64],
    pub unseen_ys: &'a [usize],
    /// Unreparameterised peer networks; empty disables EA.
    pub peers: &'a [MlpParams],
    pub n_probes: usize,
    pub probe_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub reparam: ReparamKind,
    pub value: f64,
    pub test_acc: f64,
    pub hessian: f64,
    pub l1: usize,
    pub l2: usize,
    pub ea: Option<f64>,
    pub weight_l2: f64,
}

/// One row per spec. Every row uses the same Hessian probe seed.
pub fn invariance_report(params: &MlpParams, specs: &[ReparamSpec], inputs: &ReportInputs<'_>) -> Result<Vec<InvarianceRow>> {
    specs
        .iter()
        .map(|&spec| {
            let p = apply(spec, params)?;
            let hessian = sharpness::hessian_trace(&p, inputs.train_xs, inputs.train_ys, inputs.n_probes, inputs.probe_seed)?;
            let ea = if inputs.peers.is_empty() {
                None
            } else {
                match regions::ensemble_agreement(&p, inputs.peers, inputs.unseen_xs, inputs.unseen_ys)? {
                    Agreement::Rate(r) => Some(r),
                    Agreement::NoErrors => None,
                }
            };
            Ok(InvarianceRow {
                reparam: spec.kind,
                value: spec.value,
                test_acc: p.accuracy(inputs.test_xs, inputs.test_ys)?,
                hessian: hessian.value,
                l1: regions::pattern_count(&p, inputs.unseen_xs, Layer::One)?,
                l2: regions::pattern_count(&p, inputs.unseen_xs, Layer::Two)?,
                ea,
                weight_l2: sharpness::weight_norms(&p).1,
            })
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 7] = ["reparam", "value", "test_acc", "hessian", "l1", "l2", "ea"];

/// CSV with columns `reparam,value,test_acc,hessian,l1,l2,ea`; a missing
/// EA is written as an empty field.
pub fn write_report_csv(rows: &[InvarianceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.reparam.to_string(),
            r.value.to_string(),
            r.test_acc.to_string(),
            r.hessian.to_string(),
            r.l1.to_string(),
            r.l2.to_string(),
            r.ea.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Dims;
    use crate::rng;
    use rand::Rng as _;

    fn random_net(seed: u64) -> MlpParams {
        let dims = Dims::new(6, 5, 4, 10);
        let mut r = rng::rng(seed);
        let mut p = MlpParams::glorot(dims, &mut r);
        for b in [&mut p.b1, &mut p.b2, &mut p.b3] {
            for v in b.iter_mut() {
                *v = r.gen_range(-0.2..0.2);
            }
        }
        p
    }

    fn random_inputs(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..n * 6).map(|_| r.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn unit_scale_is_identity() {
        let p = random_net(1);
        assert_eq!(apply(ReparamSpec::beta(1.0), &p).unwrap(), p);
        assert_eq!(apply(ReparamSpec::gamma(1.0), &p).unwrap(), p);
    }

    #[test]
    fn non_positive_scales_are_rejected() {
        let p = random_net(1);
        for v in [0.0, -2.0, f64::NAN] {
            assert!(matches!(apply(ReparamSpec::beta(v), &p), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn scalings_compose() {
        let p = random_net(2);
        for kind in [ReparamKind::Beta, ReparamKind::Gamma] {
            let s = |v| ReparamSpec { kind, value: v };
            let twice = apply(s(3.0), &apply(s(2.0), &p).unwrap()).unwrap();
            let once = apply(s(6.0), &p).unwrap();
            for (a, b) in twice.flatten().iter().zip(once.flatten()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn logits_and_patterns_survive_rescaling() {
        let p = random_net(3);
        let xs = random_inputs(1000, 4);
        let base = p.logits(&xs).unwrap();
        let l1 = regions::pattern_list(&p, &xs, Layer::One).unwrap();
        let l2 = regions::pattern_list(&p, &xs, Layer::Two).unwrap();
        for spec in [2.0, 5.0, 10.0, 20.0].iter().flat_map(|&v| [ReparamSpec::beta(v), ReparamSpec::gamma(v)]) {
            let q = apply(spec, &p).unwrap();
            let max = q.logits(&xs).unwrap().iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max < 1e-12, "{spec:?}: {max}");
            assert_eq!(regions::pattern_list(&q, &xs, Layer::One).unwrap(), l1);
            assert_eq!(regions::pattern_list(&q, &xs, Layer::Two).unwrap(), l2);
        }
    }

    #[test]
    fn report_rows_hold_invariants() {
        let p = random_net(5);
        let xs = random_inputs(40, 6);
        let ys: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let peers = vec![random_net(7), random_net(8)];
        let inputs = ReportInputs {
            train_xs: &xs,
            train_ys: &ys,
            test_xs: &xs,
            test_ys: &ys,
            unseen_xs: &xs,
            unseen_ys: &ys,
            peers: &peers,
            n_probes: 4,
            probe_seed: 1,
        };
        let specs: Vec<ReparamSpec> = [1.0, 2.0, 5.0].iter().map(|&b| ReparamSpec::beta(b)).collect();
        let rows = invariance_report(&p, &specs, &inputs).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows[1..] {
            assert_eq!((r.test_acc, r.l1, r.l2, r.ea), (rows[0].test_acc, rows[0].l1, rows[0].l2, rows[0].ea));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("reparam,value,test_acc,hessian,l1,l2,ea\nbeta,1,"));
        assert_eq!(text.lines().count(), 4);
    }
}
