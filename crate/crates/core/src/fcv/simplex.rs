//! Dense revised simplex for `min cᵀx, Ex = r, x ≥ 0` from a caller-supplied
//! feasible basis. The basis inverse is kept explicitly and rebuilt from
//! scratch every `REFACTOR_EVERY` pivots.
//!
//! Entering columns are chosen by Devex pricing. After
//! `STALL_LIMIT` pivots without a real drop in the objective the rule
//! switches to Bland's (lowest eligible index, lowest-index leaving
//! tie-break) until the objective improves again.
//!
//! Highly degenerate systems can instead be solved with a perturbed
//! right-hand side `r + δ`. The final basis is then dual feasible for the
//! original system, and dual simplex pivots restore primal feasibility
//! before a last primal pass.

use crate::error::{Error, Result};

const REFACTOR_EVERY: usize = 50;
const STALL_LIMIT: usize = 50;
const COST_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-9;
const PRIMAL_TOL: f64 = 1e-11;
const PROGRESS_TOL: f64 = 1e-10;
const DUAL_PIVOT_TOL: f64 = 1e-7;
const DUAL_SHIFT: f64 = 1e-9;

/// Column oracle for the constraint matrix `E` (`rows x cols`).
pub(crate) trait Columns {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn cost(&self, j: usize) -> f64;
    /// `uᵀ E_j`.
    fn dot(&self, j: usize, u: &[f64]) -> f64;
    /// Writes `E_j` into a zeroed dense buffer of length `rows`.
    fn scatter(&self, j: usize, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub objective: f64,
    /// Simplex multipliers `c_Bᵀ B⁻¹`.
    pub duals: Vec<f64>,
    pub iterations: usize,
    /// Optimal basis of the perturbed system, a feasible start for it.
    pub shifted_basis: Option<Vec<usize>>,
}

struct State<'a, C: Columns> {
    cols: &'a C,
    n: usize,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Row-major `n x n`.
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    since_refactor: usize,
    col: Vec<f64>,
    w: Vec<f64>,
    /// Devex pricing weights, one per column.
    devex: Vec<f64>,
}

impl<C: Columns> State<'_, C> {
    fn refactor(&mut self, rhs: &[f64], clamp: bool) -> Result<()> {
        let n = self.n;
        let mut b = vec![0.0; n * n];
        for (k, &j) in self.basis.iter().enumerate() {
            self.col.iter_mut().for_each(|v| *v = 0.0);
            self.cols.scatter(j, &mut self.col);
            for i in 0..n {
                b[i * n + k] = self.col[i];
            }
        }
        self.binv = invert(&b, n).ok_or_else(|| Error::Solver("singular basis".into()))?;
        for i in 0..n {
            let row = &self.binv[i * n..(i + 1) * n];
            let v: f64 = row.iter().zip(rhs).map(|(a, r)| a * r).sum();
            self.xb[i] = if clamp { v.max(0.0) } else { v };
        }
        self.since_refactor = 0;
        Ok(())
    }

    fn objective(&self) -> f64 {
        self.basis.iter().zip(&self.xb).map(|(&j, x)| self.cols.cost(j) * x).sum()
    }

    fn duals(&self) -> Vec<f64> {
        let n = self.n;
        let mut u = vec![0.0; n];
        for (k, &j) in self.basis.iter().enumerate() {
            let c = self.cols.cost(j);
            if c != 0.0 {
                for (ui, b) in u.iter_mut().zip(&self.binv[k * n..(k + 1) * n]) {
                    *ui += c * b;
                }
            }
        }
        u
    }

    /// `w = B⁻¹ E_q`.
    fn ftran(&mut self, q: usize) {
        let n = self.n;
        self.col.iter_mut().for_each(|v| *v = 0.0);
        self.cols.scatter(q, &mut self.col);
        for i in 0..n {
            self.w[i] = self.binv[i * n..(i + 1) * n].iter().zip(&self.col).map(|(a, b)| a * b).sum();
        }
    }

    fn tick(&mut self) -> Result<()> {
        if self.iterations >= self.max_iterations {
            return Err(Error::SolverIterationCap {
                iterations: self.iterations,
            });
        }
        self.iterations += 1;
        Ok(())
    }

    /// Replaces the basic variable of row `r` by column `q` (with `w` set by
    /// `ftran(q)`), which takes the value `theta`.
    fn pivot(&mut self, r: usize, q: usize, theta: f64, rhs: &[f64], clamp: bool) -> Result<()> {
        let n = self.n;
        let pivot = self.w[r];
        for v in self.binv[r * n..(r + 1) * n].iter_mut() {
            *v /= pivot;
        }
        let pivot_row: Vec<f64> = self.binv[r * n..(r + 1) * n].to_vec();
        for i in 0..n {
            let f = self.w[i];
            if i != r && f != 0.0 {
                for (a, b) in self.binv[i * n..(i + 1) * n].iter_mut().zip(&pivot_row) {
                    *a -= f * b;
                }
                let v = self.xb[i] - f * theta;
                self.xb[i] = if clamp { v.max(0.0) } else { v };
            }
        }
        self.xb[r] = theta;
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor(rhs, clamp)?;
        }
        Ok(())
    }

    /// Devex reference weights after `q` enters in row `r` (before the
    /// pivot, with `w` holding `B⁻¹ E_q`).
    fn update_devex(&mut self, r: usize, q: usize) {
        let n = self.n;
        let rho: Vec<f64> = self.binv[r * n..(r + 1) * n].to_vec();
        let alpha_q = self.w[r];
        let wq = self.devex[q];
        for j in 0..self.cols.cols() {
            if self.in_basis[j] || j == q {
                continue;
            }
            let ratio = self.cols.dot(j, &rho) / alpha_q;
            let cand = ratio * ratio * wq;
            if cand > self.devex[j] {
                self.devex[j] = cand;
            }
        }
        self.devex[self.basis[r]] = (wq / (alpha_q * alpha_q)).max(1.0);
    }

    /// Primal simplex to optimality from a primal feasible basis.
    fn primal(&mut self, rhs: &[f64]) -> Result<()> {
        let n = self.n;
        let mut stalled = 0usize;
        let mut best_objective = f64::INFINITY;
        loop {
            let objective = self.objective();
            if objective < best_objective - PROGRESS_TOL * (1.0 + objective.abs()) {
                best_objective = objective;
                stalled = 0;
            } else {
                stalled += 1;
            }
            let u = self.duals();
            let bland = stalled >= STALL_LIMIT;
            let mut entering = None;
            let mut best = 0.0;
            for j in 0..self.cols.cols() {
                if self.in_basis[j] {
                    continue;
                }
                let d = self.cols.cost(j) - self.cols.dot(j, &u);
                if d < -COST_TOL {
                    if bland {
                        entering = Some(j);
                        break;
                    }
                    let score = d * d / self.devex[j];
                    if score > best {
                        best = score;
                        entering = Some(j);
                    }
                }
            }
            let Some(q) = entering else { return Ok(()) };
            self.tick()?;
            self.ftran(q);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..n {
                if self.w[i] > PIVOT_TOL {
                    let ratio = self.xb[i] / self.w[i];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            if ratio < best_ratio - 1e-12 {
                                true
                            } else if ratio <= best_ratio + 1e-12 {
                                if bland {
                                    self.basis[i] < self.basis[l]
                                } else {
                                    self.w[i] > self.w[l]
                                }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        leave = Some(i);
                        best_ratio = ratio;
                    }
                }
            }
            let Some(r) = leave else {
                return Err(Error::Solver("objective unbounded below".into()));
            };
            self.update_devex(r, q);
            self.pivot(r, q, best_ratio.max(0.0), rhs, true)?;
        }
    }

    /// Dual simplex from a dual feasible basis until `x_B ≥ 0`, giving up
    /// after `limit` pivots. The most infeasible row leaves. The ratio test
    /// adds a tiny fixed amount per column to every reduced cost, which
    /// breaks the ties that make dual degenerate problems cycle, and among
    /// near-minimal ratios prefers the largest pivot.
    fn dual(&mut self, rhs: &[f64], limit: usize) -> Result<()> {
        let n = self.n;
        let shift = |j: usize| DUAL_SHIFT * (1.0 + (crate::rng::mix(1, j as u64) >> 11) as f64 / (1u64 << 53) as f64);
        for _ in 0..=limit {
            let Some(r) = (0..n)
                .filter(|&i| self.xb[i] < -PRIMAL_TOL)
                .min_by(|&a, &b| self.xb[a].total_cmp(&self.xb[b]))
            else {
                for v in self.xb.iter_mut() {
                    *v = v.max(0.0);
                }
                return Ok(());
            };
            self.tick()?;
            let u = self.duals();
            let rho: Vec<f64> = self.binv[r * n..(r + 1) * n].to_vec();
            let mut candidates = Vec::new();
            let mut bound = f64::INFINITY;
            for j in 0..self.cols.cols() {
                if self.in_basis[j] {
                    continue;
                }
                let alpha = self.cols.dot(j, &rho);
                if alpha < -DUAL_PIVOT_TOL {
                    let d = (self.cols.cost(j) - self.cols.dot(j, &u)).max(0.0) + shift(j);
                    bound = bound.min((d + COST_TOL) / -alpha);
                    candidates.push((j, d / -alpha, -alpha));
                }
            }
            let q = candidates
                .iter()
                .filter(|c| c.1 <= bound)
                .max_by(|a, b| a.2.total_cmp(&b.2).then(b.0.cmp(&a.0)))
                .map(|c| c.0);
            let Some(q) = q else {
                return Err(Error::Solver("system has no nonnegative solution".into()));
            };
            self.ftran(q);
            let theta = self.xb[r] / self.w[r];
            self.pivot(r, q, theta, rhs, false)?;
        }
        Err(Error::Solver("dual cleanup stalled".into()))
    }
}

/// Runs the simplex from `basis`, which must be feasible for `rhs`, or for
/// `rhs + δ` when a perturbation `δ` is given.
pub(crate) fn solve<C: Columns>(
    cols: &C,
    rhs: &[f64],
    basis: Vec<usize>,
    max_iterations: usize,
    perturbation: Option<&[f64]>,
) -> Result<Solution> {
    let n = cols.rows();
    if basis.len() != n || rhs.len() != n || perturbation.is_some_and(|d| d.len() != n) {
        return Err(Error::Solver("basis size does not match row count".into()));
    }
    let mut in_basis = vec![false; cols.cols()];
    for &j in &basis {
        in_basis[j] = true;
    }
    let mut st = State {
        cols,
        n,
        basis,
        in_basis,
        binv: Vec::new(),
        xb: vec![0.0; n],
        iterations: 0,
        max_iterations,
        since_refactor: 0,
        col: vec![0.0; n],
        w: vec![0.0; n],
        devex: vec![1.0; cols.cols()],
    };
    let mut shifted_basis = None;
    if let Some(delta) = perturbation {
        let shifted: Vec<f64> = rhs.iter().zip(delta).map(|(a, b)| a + b).collect();
        st.refactor(&shifted, true)?;
        st.primal(&shifted)?;
        let basis = st.basis.clone();
        st.refactor(rhs, false)?;
        if let Err(e) = st.dual(rhs, 20 * n + 200) {
            if matches!(e, Error::SolverIterationCap { .. }) {
                return Err(e);
            }
            // restart from the shifted optimum, reading its tiny
            // infeasibilities as degenerate zeros
            st.basis.clone_from(&basis);
            st.in_basis.iter_mut().for_each(|b| *b = false);
            for &j in &basis {
                st.in_basis[j] = true;
            }
            st.refactor(rhs, true)?;
        }
        shifted_basis = Some(basis);
    } else {
        st.refactor(rhs, true)?;
    }
    st.primal(rhs)?;
    st.refactor(rhs, true)?;
    Ok(Solution {
        objective: st.objective(),
        duals: st.duals(),
        iterations: st.iterations,
        shifted_basis,
    })
}

/// Gauss–Jordan inverse with partial pivoting; `None` if singular.
pub(crate) fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs()))?;
        if m[p * n + c].abs() < 1e-12 {
            return None;
        }
        if p != c {
            for k in 0..n {
                m.swap(p * n + k, c * n + k);
                inv.swap(p * n + k, c * n + k);
            }
        }
        let d = m[c * n + c];
        for k in 0..n {
            m[c * n + k] /= d;
            inv[c * n + k] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[i * n + c];
                if f != 0.0 {
                    for k in 0..n {
                        m[i * n + k] -= f * m[c * n + k];
                        inv[i * n + k] -= f * inv[c * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}
