//! Rank correlation and two-sample tests.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    TApprox,
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PMethod,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ. `Ok(None)` marks an undefined correlation (a constant
/// input). The permutation p-value is `(hits + 1) / (n_perm + 1)` over
/// shuffles of `ys` drawn from `seed`.
pub fn spearman(xs: &[f64], ys: &[f64], method: PMethod, seed: u64) -> Result<Option<CorrelationResult>> {
    spearman_with(xs, ys, method, seed, DEFAULT_PERMUTATIONS)
}

pub fn spearman_with(xs: &[f64], ys: &[f64], method: PMethod, seed: u64, n_perm: usize) -> Result<Option<CorrelationResult>> {
    if xs.len() != ys.len() {
        return Err(Error::arg(format!("{} x values but {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::arg("spearman needs at least three pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in correlation input".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(None);
    };
    let n = xs.len();
    let p_value = match method {
        PMethod::TApprox => t_approx_p(rho, n),
        PMethod::Permutation => {
            if n_perm == 0 {
                return Err(Error::arg("need at least one permutation"));
            }
            let mut r = rng::stream_rng(seed, Stream::Permutation);
            let mut shuffled = ry.clone();
            let mut hits = 0usize;
            for _ in 0..n_perm {
                shuffled.shuffle(&mut r);
                let q = pearson(&rx, &shuffled).unwrap_or(0.0);
                if q.abs() >= rho.abs() - 1e-12 {
                    hits += 1;
                }
            }
            (hits + 1) as f64 / (n_perm + 1) as f64
        }
    };
    Ok(Some(CorrelationResult {
        rho,
        p_value,
        n,
        method,
    }))
}

/// Two-sided p from `t = ρ √((n−2)/(1−ρ²))` on `n − 2` degrees of freedom.
pub fn t_approx_p(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    student_t_two_sided(t, df)
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance t-test, two-sided, with Welch–Satterthwaite
/// degrees of freedom. Positive `t` means `mean(xs) > mean(ys)`.
pub fn welch(xs: &[f64], ys: &[f64]) -> Result<WelchResult> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::arg("each sample needs at least two values"));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, var)
    };
    let (nx, mx, vx) = stats(xs);
    let (ny, my, vy) = stats(ys);
    let (sx, sy) = (vx / nx, vy / ny);
    let se2 = sx + sy;
    if !(se2 > 0.0) || !se2.is_finite() {
        return Err(Error::Numeric("both samples have zero variance".into()));
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (sx * sx / (nx - 1.0) + sy * sy / (ny - 1.0));
    Ok(WelchResult {
        t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularised incomplete beta `I_x(a, b)` by Lentz's continued fraction,
/// using the symmetry `I_x(a,b) = 1 − I_{1−x}(b,a)` where that converges faster.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn perfect_orderings() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman(&xs, &[2.0, 4.0, 8.0, 16.0, 32.0], PMethod::TApprox, 0).unwrap().unwrap();
        assert_eq!((up.rho, up.p_value), (1.0, 0.0));
        let down = spearman(&xs, &[5.0, 4.0, 3.0, 2.0, 1.0], PMethod::TApprox, 0).unwrap().unwrap();
        assert_eq!(down.rho, -1.0);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0], PMethod::TApprox, 0).unwrap(), None);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0], PMethod::TApprox, 0).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0], PMethod::TApprox, 0).is_err());
    }

    #[test]
    fn matches_squared_rank_difference_formula_on_all_permutations() {
        for n in 3..=6usize {
            let nn = (n * (n * n - 1)) as i64;
            for a in permutations(n) {
                for b in permutations(n) {
                    let xs: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                    let ys: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                    let d2: i64 = a.iter().zip(&b).map(|(&x, &y)| (x as i64 - y as i64).pow(2)).sum();
                    let oracle = (nn - 6 * d2) as f64 / nn as f64;
                    let got = spearman(&xs, &ys, PMethod::TApprox, 0).unwrap().unwrap().rho;
                    assert_eq!(got, oracle, "{a:?} {b:?}");
                }
            }
        }
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (1.0 - r.gen::<f64>(), r.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    #[test]
    fn rank_invariance_and_antisymmetry() {
        let xs = gaussian(40, 1);
        let ys: Vec<f64> = gaussian(40, 2).iter().zip(&xs).map(|(e, x)| x + e).collect();
        let base = spearman(&xs, &ys, PMethod::TApprox, 0).unwrap().unwrap();
        let ex: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert_eq!(spearman(&ex, &ys, PMethod::TApprox, 0).unwrap().unwrap().rho, base.rho);
        let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
        assert_eq!(spearman(&xs, &neg, PMethod::TApprox, 0).unwrap().unwrap().rho, -base.rho);
    }

    #[test]
    fn permutation_and_t_approx_agree() {
        for seed in 0..3 {
            let xs = gaussian(100, 10 + seed);
            let ys: Vec<f64> = gaussian(100, 20 + seed).iter().zip(&xs).map(|(e, x)| 0.2 * x + e).collect();
            let t = spearman(&xs, &ys, PMethod::TApprox, 0).unwrap().unwrap();
            let p = spearman(&xs, &ys, PMethod::Permutation, seed).unwrap().unwrap();
            assert_eq!(t.rho, p.rho);
            assert!((t.p_value - p.p_value).abs() < 0.02, "{} vs {}", t.p_value, p.p_value);
        }
    }

    #[test]
    fn incomplete_beta_matches_reference() {
        for &a in &[0.5, 1.0, 2.5, 10.0, 49.0] {
            for &b in &[0.5, 1.0, 3.0, 20.0] {
                for i in 1..20 {
                    let x = i as f64 / 20.0;
                    let ours = reg_inc_beta(a, b, x);
                    let theirs = statrs::function::beta::beta_reg(a, b, x);
                    assert!((ours - theirs).abs() < 1e-10, "I_{x}({a},{b}): {ours} vs {theirs}");
                }
            }
        }
    }

    #[test]
    fn t_tail_matches_reference() {
        for &df in &[1.0, 2.0, 7.3, 30.0, 98.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[0.0, 0.3, 1.0, 2.0, 4.5, 10.0] {
                let ours = student_t_two_sided(t, df);
                let theirs = 2.0 * (1.0 - dist.cdf(t));
                assert!((ours - theirs).abs() < 1e-10, "df {df} t {t}: {ours} vs {theirs}");
            }
        }
    }

    /// Welch by the textbook formulas, written independently of `welch`.
    fn textbook_welch(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        let (n1, n2) = (x.len() as f64, y.len() as f64);
        let (a, b) = (var(x) / n1, var(y) / n2);
        let t = (mean(x) - mean(y)) / (a + b).sqrt();
        let df = (a + b).powi(2) / (a.powi(2) / (n1 - 1.0) + b.powi(2) / (n2 - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        (t, df, 2.0 * dist.cdf(-t.abs()))
    }

    #[test]
    fn welch_cases() {
        let s = [0.91, 0.93, 0.92, 0.95, 0.90];
        let r = welch(&s, &s).unwrap();
        assert_eq!((r.t, r.p_value), (0.0, 1.0));

        let a: Vec<f64> = (0..10).map(|i| 1.0 + 1e-4 * i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!(welch(&b, &a).unwrap().p_value < 1e-6);

        let x = [0.853, 0.861, 0.849, 0.858, 0.866, 0.851, 0.860];
        let y = [0.871, 0.869, 0.880, 0.874, 0.862, 0.877];
        let ours = welch(&y, &x).unwrap();
        let (t, df, p) = textbook_welch(&y, &x);
        assert!((ours.t - t).abs() < 1e-12);
        assert!((ours.df - df).abs() < 1e-10);
        assert!((ours.p_value - p).abs() < 1e-10);

        assert!(welch(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn ln_gamma_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }
}
