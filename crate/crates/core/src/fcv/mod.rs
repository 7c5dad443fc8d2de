//! Feature-classifier consistency: with layers 1–2 frozen, a set of
//! (input, class) claims is consistent when one final layer `(W, b)` makes
//! every claimed class win strictly.
//!
//! Every check reduces to the same LP. For rows `a_j` (one per
//! winner/loser pair) the max-min margin over the box `‖z‖∞ ≤ 1` equals
//! `min { ‖Aᵀy‖₁ : y ≥ 0, 1ᵀy = 1 }`. The simplex solves the right-hand
//! side; its multipliers give the maximising `z`, and an optimum of zero is
//! a certificate `y` that no strict solution exists.

mod simplex;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpParams;
use simplex::Columns;

/// Absolute slack tolerance.
pub const SLACK_TOL: f64 = 1e-9;
/// Default margin when the policy is fixed.
pub const DEFAULT_EPSILON: f64 = 1e-3;
const PERTURBATION: f64 = 1e-7;

/// Frozen features of training and probe inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    d: usize,
    k: usize,
    train: Vec<f64>,
    labels: Vec<usize>,
    probes: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(d: usize, k: usize, train: Vec<f64>, labels: Vec<usize>, probes: Vec<f64>) -> Result<Self> {
        if d == 0 || k < 2 {
            return Err(Error::arg("need d ≥ 1 and at least two classes"));
        }
        if train.len() != labels.len() * d || probes.len() % d != 0 {
            return Err(Error::arg("feature rows do not match the feature width"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("label {l} out of range for {k} classes")));
        }
        if train.iter().chain(&probes).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        Ok(Self {
            d,
            k,
            train,
            labels,
            probes,
        })
    }

    /// Layer-2 post-activations of `params` as the feature map.
    pub fn from_network(params: &MlpParams, train_xs: &[f64], train_ys: &[usize], probe_xs: &[f64]) -> Result<Self> {
        let train = params.forward_batch(train_xs)?.a2;
        let probes = params.forward_batch(probe_xs)?.a2;
        Self::new(params.dims.h2, params.dims.classes, train, train_ys.to_vec(), probes)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn n_train(&self) -> usize {
        self.labels.len()
    }

    pub fn n_probes(&self) -> usize {
        self.probes.len() / self.d
    }

    pub fn train_row(&self, i: usize) -> &[f64] {
        &self.train[i * self.d..(i + 1) * self.d]
    }

    pub fn probe_row(&self, j: usize) -> &[f64] {
        &self.probes[j * self.d..(j + 1) * self.d]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Applies `φ ↦ Aφ` to every feature row; `a` is row-major `d x d`.
    pub fn transformed(&self, a: &[f64]) -> Result<Self> {
        let d = self.d;
        if a.len() != d * d {
            return Err(Error::arg("transform must be d x d"));
        }
        let map = |rows: &[f64]| -> Vec<f64> {
            rows.chunks(d)
                .flat_map(|x| (0..d).map(move |i| (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>()))
                .collect()
        };
        Self::new(d, self.k, map(&self.train), self.labels.clone(), map(&self.probes))
    }
}

/// A final layer `(W, b)` with `W` row-major `K x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Witness {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            w: vec![0.0; k * d],
            b: vec![0.0; k],
        }
    }

    pub fn from_network(params: &MlpParams) -> Self {
        Self {
            w: params.w3.clone(),
            b: params.b3.clone(),
        }
    }

    pub fn score(&self, phi: &[f64], class: usize) -> f64 {
        let d = phi.len();
        self.b[class] + self.w[class * d..(class + 1) * d].iter().zip(phi).map(|(a, x)| a * x).sum::<f64>()
    }

    /// `(W_winner − W_loser)·φ + b_winner − b_loser`.
    pub fn slack(&self, phi: &[f64], winner: usize, loser: usize) -> f64 {
        let d = phi.len();
        let mut s = self.b[winner] - self.b[loser];
        for (i, x) in phi.iter().enumerate() {
            s += (self.w[winner * d + i] - self.w[loser * d + i]) * x;
        }
        s
    }

    /// Smallest margin of `class` over every rival at `phi`.
    pub fn class_margin(&self, phi: &[f64], class: usize) -> f64 {
        (0..self.b.len())
            .filter(|&c| c != class)
            .map(|c| self.slack(phi, class, c))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn inf_norm(&self) -> f64 {
        self.w.iter().chain(&self.b).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            w: self.w.iter().map(|v| v * s).collect(),
            b: self.b.iter().map(|v| v * s).collect(),
        }
    }
}

/// Rows `(φ, winner, loser)` asking for slack at least `epsilon`, with an
/// optional box `‖(W, b)‖∞ ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityProblem {
    d: usize,
    k: usize,
    features: Vec<f64>,
    winners: Vec<usize>,
    losers: Vec<usize>,
    pub epsilon: f64,
    pub bound: Option<f64>,
    /// Row count before duplicate removal.
    pub raw_rows: usize,
}

impl FeasibilityProblem {
    pub fn new(d: usize, k: usize, epsilon: f64, bound: Option<f64>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::arg(format!("margin must be positive, got {epsilon}")));
        }
        if let Some(b) = bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::arg(format!("box bound must be positive, got {b}")));
            }
        }
        Ok(Self {
            d,
            k,
            features: Vec::new(),
            winners: Vec::new(),
            losers: Vec::new(),
            epsilon,
            bound,
            raw_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.winners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.winners.is_empty()
    }

    pub fn row(&self, r: usize) -> (&[f64], usize, usize) {
        (&self.features[r * self.d..(r + 1) * self.d], self.winners[r], self.losers[r])
    }

    fn push(&mut self, phi: &[f64], winner: usize, loser: usize) {
        self.features.extend_from_slice(phi);
        self.winners.push(winner);
        self.losers.push(loser);
        self.raw_rows += 1;
    }

    /// `class` beats every other class at `phi`.
    fn push_claim(&mut self, phi: &[f64], class: usize) {
        for c in 0..self.k {
            if c != class {
                self.push(phi, class, c);
            }
        }
    }

    fn dedup(&mut self) {
        let mut seen = HashSet::with_capacity(self.len());
        let mut keep = Vec::with_capacity(self.len());
        for r in 0..self.len() {
            let (phi, w, l) = self.row(r);
            let key: (Vec<u64>, usize, usize) = (phi.iter().map(|v| v.to_bits()).collect(), w, l);
            keep.push(seen.insert(key));
        }
        let d = self.d;
        let mut features = Vec::with_capacity(self.features.len());
        let (mut winners, mut losers) = (Vec::new(), Vec::new());
        for (r, &k) in keep.iter().enumerate() {
            if k {
                features.extend_from_slice(&self.features[r * d..(r + 1) * d]);
                winners.push(self.winners[r]);
                losers.push(self.losers[r]);
            }
        }
        self.features = features;
        self.winners = winners;
        self.losers = losers;
    }

    /// Smallest slack of `z` over all rows (`+∞` for an empty problem).
    pub fn min_slack(&self, z: &Witness) -> f64 {
        (0..self.len())
            .map(|r| {
                let (phi, w, l) = self.row(r);
                z.slack(phi, w, l)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Training claims `(x_i, y_i)` plus the extra `(probe, class)` claims,
/// `K − 1` rows each, with bitwise-duplicate rows removed.
pub fn build_problem(features: &FeatureMatrix, extra: &[(usize, usize)], epsilon: f64) -> Result<FeasibilityProblem> {
    build_problem_boxed(features, extra, epsilon, None)
}

pub fn build_problem_boxed(features: &FeatureMatrix, extra: &[(usize, usize)], epsilon: f64, bound: Option<f64>) -> Result<FeasibilityProblem> {
    let mut p = FeasibilityProblem::new(features.d, features.k, epsilon, bound)?;
    for i in 0..features.n_train() {
        p.push_claim(features.train_row(i), features.labels[i]);
    }
    for &(j, c) in extra {
        if j >= features.n_probes() {
            return Err(Error::arg(format!("probe {j} out of range")));
        }
        if c >= features.k {
            return Err(Error::arg(format!("class {c} out of range")));
        }
        p.push_claim(features.probe_row(j), c);
    }
    p.dedup();
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Feasible(Witness),
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityResult {
    pub verdict: Verdict,
    pub iterations: usize,
    /// Optimal max-min slack over the unit box (`+∞` for an empty problem).
    pub unit_box_margin: f64,
}

impl FeasibilityResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self.verdict, Verdict::Feasible(_))
    }
}

/// Which classes carry free variables. Rows only see differences between
/// classes, so without a box the last class can be pinned to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    Full,
    PinLast,
}

/// The LP `min 1ᵀp + 1ᵀq` s.t. `Aᵀy − p + q = 0`, `1ᵀy = 1`, all ≥ 0, with
/// `y` restricted to the problem rows listed in `ys`.
/// Columns: `y` in `ys` order, then `p_0..p_{N−1}`, then `q_0..q_{N−1}`.
struct MarginLp<'a> {
    problem: &'a FeasibilityProblem,
    /// Classes with variables.
    active: usize,
    n_vars: usize,
    ys: Vec<usize>,
}

/// A basic variable named independently of any column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    Y(usize),
    P(usize),
    Q(usize),
}

impl<'a> MarginLp<'a> {
    fn new(problem: &'a FeasibilityProblem, layout: Layout, ys: Vec<usize>) -> Self {
        let active = match layout {
            Layout::Full => problem.k,
            Layout::PinLast => problem.k - 1,
        };
        Self {
            problem,
            active,
            n_vars: active * (problem.d + 1),
            ys,
        }
    }

    fn w_index(&self, class: usize) -> Option<usize> {
        (class < self.active).then(|| class * self.problem.d)
    }

    fn b_index(&self, class: usize) -> usize {
        self.active * self.problem.d + class
    }

    fn m(&self) -> usize {
        self.ys.len()
    }

    fn var(&self, j: usize) -> Var {
        let m = self.m();
        if j < m {
            Var::Y(self.ys[j])
        } else if j < m + self.n_vars {
            Var::P(j - m)
        } else {
            Var::Q(j - m - self.n_vars)
        }
    }

    /// Column index of `v`; `pos` maps problem rows to `ys` positions.
    fn column(&self, v: Var, pos: &[usize]) -> usize {
        match v {
            Var::Y(r) => pos[r],
            Var::P(i) => self.m() + i,
            Var::Q(i) => self.m() + self.n_vars + i,
        }
    }

    /// `a_r·u[..N] + u_N` for problem row `r`.
    fn row_dot(&self, r: usize, u: &[f64]) -> f64 {
        let (phi, w, l) = self.problem.row(r);
        let mut s = u[self.n_vars];
        if let Some(wi) = self.w_index(w) {
            s += phi.iter().zip(&u[wi..]).map(|(x, v)| x * v).sum::<f64>();
            s += u[self.b_index(w)];
        }
        if let Some(li) = self.w_index(l) {
            s -= phi.iter().zip(&u[li..]).map(|(x, v)| x * v).sum::<f64>();
            s -= u[self.b_index(l)];
        }
        s
    }

    fn witness(&self, z: &[f64]) -> Witness {
        let (k, d) = (self.problem.k, self.problem.d);
        let mut out = Witness::zeros(k, d);
        for c in 0..self.active {
            out.w[c * d..(c + 1) * d].copy_from_slice(&z[c * d..(c + 1) * d]);
            out.b[c] = z[self.active * d + c];
        }
        out
    }
}

impl Columns for MarginLp<'_> {
    fn rows(&self) -> usize {
        self.n_vars + 1
    }

    fn cols(&self) -> usize {
        self.m() + 2 * self.n_vars
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.m() {
            0.0
        } else {
            1.0
        }
    }

    fn dot(&self, j: usize, u: &[f64]) -> f64 {
        match self.var(j) {
            Var::Y(r) => self.row_dot(r, u),
            Var::P(i) => -u[i],
            Var::Q(i) => u[i],
        }
    }

    fn scatter(&self, j: usize, out: &mut [f64]) {
        match self.var(j) {
            Var::Y(r) => {
                let (phi, w, l) = self.problem.row(r);
                if let Some(wi) = self.w_index(w) {
                    for (o, x) in out[wi..].iter_mut().zip(phi) {
                        *o += x;
                    }
                    out[self.b_index(w)] += 1.0;
                }
                if let Some(li) = self.w_index(l) {
                    for (o, x) in out[li..].iter_mut().zip(phi) {
                        *o -= x;
                    }
                    out[self.b_index(l)] -= 1.0;
                }
                out[self.n_vars] = 1.0;
            }
            Var::P(i) => out[i] = -1.0,
            Var::Q(i) => out[i] = 1.0,
        }
    }
}

struct UnitBoxSolution {
    margin: f64,
    witness: Witness,
    iterations: usize,
    /// Final basis of the shifted system, a feasible start for any problem
    /// that extends this one by appending rows.
    shifted_basis: Vec<Var>,
}

/// A shifted-optimal basis of a problem with `rows` rows, which form a
/// prefix of the problem being solved.
#[derive(Clone)]
struct WarmStart {
    basis: Vec<Var>,
    rows: usize,
}

/// Rows priced into the working set per round.
const ROWS_PER_ROUND: usize = 64;

/// `max_{‖z‖∞ ≤ 1} min_r slack_r(z)` over the variables of `layout`.
///
/// With a warm start the LP begins on the rows of the warm basis plus the
/// rows from `fresh_from` on; other rows join whenever their reduced cost
/// is negative, so the result is the optimum over all rows.
fn unit_box_margin(problem: &FeasibilityProblem, layout: Layout, warm: Option<(&[Var], usize)>) -> Result<UnitBoxSolution> {
    let m_all = problem.len();
    debug_assert!(m_all > 0);
    let full = MarginLp::new(problem, layout, Vec::new());
    let n = full.n_vars;
    // the system is degenerate by construction (one nonzero on the right),
    // so it is solved for a small fixed shift first
    let mut delta: Vec<f64> = (0..n)
        .map(|i| PERTURBATION * (1.0 + (crate::rng::mix(0, i as u64) >> 11) as f64 / (1u64 << 53) as f64))
        .collect();
    delta.push(0.0);
    let mut rhs = vec![0.0; n + 1];
    rhs[n] = 1.0;
    let cap = 50 * (n + 1 + m_all + 2 * n);

    let (mut ys, mut basis): (Vec<usize>, Vec<Var>) = match warm {
        Some((b, fresh_from)) => {
            let mut ys: Vec<usize> = b.iter().filter_map(|v| if let Var::Y(r) = v { Some(*r) } else { None }).collect();
            ys.extend(fresh_from..m_all);
            (ys, b.to_vec())
        }
        None => {
            // y_0 = 1 with p_i or q_i absorbing each equality row
            let mut col0 = vec![0.0; n + 1];
            MarginLp::new(problem, layout, vec![0]).scatter(0, &mut col0);
            let mut basis: Vec<Var> = (0..n).map(|i| if col0[i] >= delta[i] { Var::P(i) } else { Var::Q(i) }).collect();
            basis.push(Var::Y(0));
            ((0..m_all).collect(), basis)
        }
    };
    let mut iterations = 0;
    loop {
        let mut pos = vec![usize::MAX; m_all];
        for (k, &r) in ys.iter().enumerate() {
            pos[r] = k;
        }
        let lp = MarginLp::new(problem, layout, ys.clone());
        let start: Vec<usize> = basis.iter().map(|&v| lp.column(v, &pos)).collect();
        let sol = simplex::solve(&lp, &rhs, start, cap.saturating_sub(iterations), Some(&delta))?;
        iterations += sol.iterations;
        basis = sol.shifted_basis.unwrap_or_default().iter().map(|&j| lp.var(j)).collect();

        // rows outside the working set with negative reduced cost
        let mut entering: Vec<(f64, usize)> = (0..m_all)
            .filter(|&r| pos[r] == usize::MAX)
            .map(|r| (-lp.row_dot(r, &sol.duals), r))
            .filter(|&(d, _)| d < -1e-11)
            .collect();
        if entering.is_empty() {
            // dual feasibility for p_i, q_i gives |u_i| ≤ 1; the clamp only removes rounding
            let z: Vec<f64> = sol.duals[..n].iter().map(|u| (-u).clamp(-1.0, 1.0)).collect();
            return Ok(UnitBoxSolution {
                margin: sol.objective,
                witness: lp.witness(&z),
                iterations,
                shifted_basis: basis,
            });
        }
        entering.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ys.extend(entering.iter().take(ROWS_PER_ROUND).map(|&(_, r)| r));
    }
}

/// Decides whether every row can reach slack `epsilon`, within the box
/// when one is set. Feasible verdicts carry a witness that has been checked
/// by direct substitution.
pub fn lp_feasible(problem: &FeasibilityProblem) -> Result<FeasibilityResult> {
    solve_problem(problem, None)
}

fn layout_for(problem: &FeasibilityProblem) -> Layout {
    if problem.bound.is_some() {
        Layout::Full
    } else {
        Layout::PinLast
    }
}

fn solve_problem(problem: &FeasibilityProblem, warm: Option<&WarmStart>) -> Result<FeasibilityResult> {
    if problem.is_empty() {
        return Ok(FeasibilityResult {
            verdict: Verdict::Feasible(Witness::zeros(problem.k, problem.d)),
            iterations: 0,
            unit_box_margin: f64::INFINITY,
        });
    }
    let eps = problem.epsilon;
    match problem.bound {
        None => {
            let sol = unit_box_margin(problem, Layout::PinLast, warm.map(|w| (w.basis.as_slice(), w.rows)))?;
            if sol.margin <= SLACK_TOL {
                return Ok(FeasibilityResult {
                    verdict: Verdict::Infeasible,
                    iterations: sol.iterations,
                    unit_box_margin: sol.margin,
                });
            }
            let s = problem.min_slack(&sol.witness);
            if !(s > 0.0) {
                return Err(Error::Solver(format!(
                    "optimal margin {} but the recovered witness has slack {s}",
                    sol.margin
                )));
            }
            let w = sol.witness.scaled(eps / s);
            verify(problem, &w)?;
            Ok(FeasibilityResult {
                verdict: Verdict::Feasible(w),
                iterations: sol.iterations,
                unit_box_margin: sol.margin,
            })
        }
        Some(bound) => {
            let sol = unit_box_margin(problem, Layout::Full, warm.map(|w| (w.basis.as_slice(), w.rows)))?;
            if bound * sol.margin < eps - SLACK_TOL {
                return Ok(FeasibilityResult {
                    verdict: Verdict::Infeasible,
                    iterations: sol.iterations,
                    unit_box_margin: sol.margin,
                });
            }
            let w = sol.witness.scaled(bound);
            verify(problem, &w)?;
            Ok(FeasibilityResult {
                verdict: Verdict::Feasible(w),
                iterations: sol.iterations,
                unit_box_margin: sol.margin,
            })
        }
    }
}

fn verify(problem: &FeasibilityProblem, w: &Witness) -> Result<()> {
    let s = problem.min_slack(w);
    if s < problem.epsilon - SLACK_TOL {
        return Err(Error::Solver(format!(
            "witness slack {s} below margin {}",
            problem.epsilon
        )));
    }
    if let Some(b) = problem.bound {
        if w.inf_norm() > b * (1.0 + 1e-12) {
            return Err(Error::Solver("witness leaves the box".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMargin {
    pub epsilon_star: f64,
    pub witness: Witness,
    pub iterations: usize,
}

/// Largest `ε` such that all training rows reach slack `ε` with
/// `‖(W, b)‖∞ ≤ 1`.
pub fn max_margin(features: &FeatureMatrix) -> Result<MaxMargin> {
    let p = build_problem_boxed(features, &[], 1.0, Some(1.0))?;
    if p.is_empty() {
        return Err(Error::arg("max margin needs at least one training point"));
    }
    let sol = unit_box_margin(&p, Layout::Full, None)?;
    if sol.margin <= SLACK_TOL {
        return Err(Error::DegeneratePolicy(format!("optimal margin {}", sol.margin)));
    }
    let s = p.min_slack(&sol.witness);
    if s < sol.margin - 1e-7 * (1.0 + sol.margin) {
        return Err(Error::Solver(format!("margin {} but witness slack {s}", sol.margin)));
    }
    Ok(MaxMargin {
        epsilon_star: sol.margin,
        witness: sol.witness,
        iterations: sol.iterations,
    })
}

/// How the margin of the extension LPs is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginPolicy {
    /// Fixed margin, no box. By homogeneity the verdict is then plain
    /// strict feasibility and `epsilon` only scales witnesses.
    Fixed { epsilon: f64 },
    /// Unit box and half the training system's maximum margin.
    Adaptive,
}

impl Default for MarginPolicy {
    fn default() -> Self {
        MarginPolicy::Fixed {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMargin {
    pub epsilon: f64,
    pub bound: Option<f64>,
    pub epsilon_star: Option<f64>,
}

impl MarginPolicy {
    pub fn resolve(&self, features: &FeatureMatrix) -> Result<ResolvedMargin> {
        match *self {
            MarginPolicy::Fixed { epsilon } => Ok(ResolvedMargin {
                epsilon,
                bound: None,
                epsilon_star: None,
            }),
            MarginPolicy::Adaptive => {
                let star = max_margin(features)?.epsilon_star;
                Ok(ResolvedMargin {
                    epsilon: star / 2.0,
                    bound: Some(1.0),
                    epsilon_star: Some(star),
                })
            }
        }
    }
}

struct CachedWitness {
    witness: Witness,
    train_slack: f64,
    inf_norm: f64,
}

/// Counters for one extension run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub lps: usize,
    pub cache_hits: usize,
    pub iterations: usize,
}

/// Answers single-point extension queries against one training policy.
/// Witnesses found along the way are kept and tried before any LP; a hit
/// is a verified witness, so it never changes a verdict.
pub struct ExtensionSolver<'a> {
    features: &'a FeatureMatrix,
    margin: ResolvedMargin,
    base: FeasibilityProblem,
    base_state: Option<BaseState>,
    cache: Vec<CachedWitness>,
    pub stats: SolverStats,
}

enum BaseState {
    Empty,
    Infeasible,
    Warm(WarmStart),
}

impl<'a> ExtensionSolver<'a> {
    pub fn new(features: &'a FeatureMatrix, margin: ResolvedMargin) -> Result<Self> {
        let base = build_problem_boxed(features, &[], margin.epsilon, margin.bound)?;
        Ok(Self {
            features,
            margin,
            base,
            base_state: None,
            cache: Vec::new(),
            stats: SolverStats::default(),
        })
    }

    /// Solves the training system once; every extension LP starts from its
    /// basis.
    fn base_state(&mut self) -> Result<&BaseState> {
        if self.base_state.is_none() {
            let state = if self.base.is_empty() {
                BaseState::Empty
            } else {
                let sol = unit_box_margin(&self.base, layout_for(&self.base), None)?;
                self.stats.lps += 1;
                self.stats.iterations += sol.iterations;
                let ok = match self.margin.bound {
                    None => sol.margin > SLACK_TOL,
                    Some(b) => b * sol.margin >= self.margin.epsilon - SLACK_TOL,
                };
                if ok {
                    BaseState::Warm(WarmStart {
                        basis: sol.shifted_basis,
                        rows: self.base.len(),
                    })
                } else {
                    BaseState::Infeasible
                }
            };
            self.base_state = Some(state);
        }
        Ok(self.base_state.as_ref().unwrap())
    }

    /// Offers a candidate witness (for instance the trained final layer).
    /// Kept only if it satisfies the training rows.
    pub fn seed(&mut self, w: Witness) {
        self.remember(w);
    }

    fn remember(&mut self, witness: Witness) {
        let train_slack = self.base.min_slack(&witness);
        let inf_norm = witness.inf_norm();
        if train_slack > 0.0 && inf_norm > 0.0 {
            self.cache.push(CachedWitness {
                witness,
                train_slack,
                inf_norm,
            });
        }
    }

    fn cache_hit(&self, phi: &[f64], class: usize) -> bool {
        self.cache.iter().any(|c| {
            let probe = c.witness.class_margin(phi, class);
            let worst = probe.min(c.train_slack);
            match self.margin.bound {
                None => worst > 0.0,
                Some(b) => worst * (b / c.inf_norm) >= self.margin.epsilon,
            }
        })
    }

    /// Is `π ∪ {(probe j, class c)}` consistent?
    pub fn feasible(&mut self, j: usize, class: usize) -> Result<bool> {
        if j >= self.features.n_probes() || class >= self.features.k {
            return Err(Error::arg(format!("probe {j} / class {class} out of range")));
        }
        let phi = self.features.probe_row(j);
        if self.cache_hit(phi, class) {
            self.stats.cache_hits += 1;
            return Ok(true);
        }
        let warm = match self.base_state()? {
            BaseState::Infeasible => return Ok(false),
            BaseState::Empty => None,
            BaseState::Warm(w) => Some(w.clone()),
        };
        let mut p = self.base.clone();
        p.push_claim(phi, class);
        p.dedup();
        let r = solve_problem(&p, warm.as_ref())?;
        self.stats.lps += 1;
        self.stats.iterations += r.iterations;
        Ok(match r.verdict {
            Verdict::Feasible(w) => {
                self.remember(w);
                true
            }
            Verdict::Infeasible => false,
        })
    }

    /// Classes `c` for which probe `j` can be assigned `c`.
    pub fn extension(&mut self, j: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for c in 0..self.features.k {
            if self.feasible(j, c)? {
                out.push(c);
            }
        }
        Ok(out)
    }
}

/// Per-probe extension sets and their total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProxy {
    pub per_probe: Vec<Vec<usize>>,
    pub total: usize,
    pub margin: ResolvedMargin,
    pub stats: SolverStats,
}

pub fn pointwise_extension(features: &FeatureMatrix, probe: usize, margin: ResolvedMargin) -> Result<Vec<usize>> {
    ExtensionSolver::new(features, margin)?.extension(probe)
}

/// Sum over probes of the number of feasible classes. `seeds` are tried as
/// witnesses before any LP is solved.
pub fn pair_proxy(features: &FeatureMatrix, margin: ResolvedMargin, seeds: &[Witness]) -> Result<PairProxy> {
    let mut solver = ExtensionSolver::new(features, margin)?;
    for w in seeds {
        solver.seed(w.clone());
    }
    let per_probe = (0..features.n_probes())
        .map(|j| solver.extension(j))
        .collect::<Result<Vec<_>>>()?;
    let total = per_probe.iter().map(Vec::len).sum();
    Ok(PairProxy {
        per_probe,
        total,
        margin,
        stats: solver.stats,
    })
}

/// 1-norm condition number, or `None` if `a` is singular.
pub fn condition_number(a: &[f64], d: usize) -> Option<f64> {
    let inv = simplex::invert(a, d)?;
    let norm1 = |m: &[f64]| (0..d).map(|j| (0..d).map(|i| m[i * d + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    Some(norm1(a) * norm1(&inv))
}

/// Recomputes every extension set on features `Aφ` and compares with the
/// originals. `(W, b) ↦ (WA⁻¹, b)` carries witnesses across with identical
/// slacks, so the sets must agree. Runs without a box at margin `epsilon`.
pub fn affine_invariance_check(features: &FeatureMatrix, a: &[f64], epsilon: f64) -> Result<bool> {
    let d = features.d;
    if a.len() != d * d {
        return Err(Error::arg("transform must be d x d"));
    }
    match condition_number(a, d) {
        None => return Err(Error::arg("transform is singular")),
        Some(c) if c >= 1e8 => return Err(Error::arg(format!("transform condition number {c:e} too large"))),
        Some(_) => {}
    }
    let margin = ResolvedMargin {
        epsilon,
        bound: None,
        epsilon_star: None,
    };
    let before = pair_proxy(features, margin, &[])?;
    let after = pair_proxy(&features.transformed(a)?, margin, &[])?;
    Ok(before.per_probe == after.per_probe)
}

#[cfg(test)]
mod tests;
