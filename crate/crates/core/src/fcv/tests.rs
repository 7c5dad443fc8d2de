use super::*;
use crate::mlp::Dims;
use crate::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn fm(d: usize, k: usize, train: &[f64], labels: &[usize], probes: &[f64]) -> FeatureMatrix {
    FeatureMatrix::new(d, k, train.to_vec(), labels.to_vec(), probes.to_vec()).unwrap()
}

/// Independent slack substitution: every row of `p` computed from scratch.
fn check_witness(p: &FeasibilityProblem, w: &Witness) -> f64 {
    let mut worst = f64::INFINITY;
    for r in 0..p.len() {
        let (phi, a, b) = p.row(r);
        let mut s = 0.0;
        for (i, x) in phi.iter().enumerate() {
            s += w.w[a * phi.len() + i] * x - w.w[b * phi.len() + i] * x;
        }
        s += w.b[a] - w.b[b];
        worst = worst.min(s);
    }
    worst
}

fn random_instance(r: &mut rng::Rng, n: usize, m: usize, d: usize, k: usize) -> FeatureMatrix {
    let train: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let probes: Vec<f64> = (0..m * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    fm(d, k, &train, &labels, &probes)
}

fn no_box(epsilon: f64) -> ResolvedMargin {
    ResolvedMargin {
        epsilon,
        bound: None,
        epsilon_star: None,
    }
}

#[test]
fn contradictory_claims_are_infeasible() {
    let f = fm(1, 2, &[1.0], &[0], &[1.0, -1.0]);
    let p = build_problem(&f, &[(0, 1)], 0.5).unwrap();
    assert!(!lp_feasible(&p).unwrap().is_feasible());
}

#[test]
fn separable_claims_are_feasible() {
    let f = fm(1, 2, &[1.0], &[0], &[1.0, -1.0]);
    let p = build_problem(&f, &[(1, 1)], 0.5).unwrap();
    let hand = Witness {
        w: vec![1.0, 0.0],
        b: vec![0.0, 0.0],
    };
    assert_eq!(check_witness(&p, &hand), 1.0);
    let r = lp_feasible(&p).unwrap();
    let Verdict::Feasible(w) = r.verdict else { panic!("expected feasible") };
    assert!(check_witness(&p, &w) >= 0.5 - 1e-9);
}

#[test]
fn row_counts_and_dedup() {
    let mut r = rng::rng(11);
    let f = random_instance(&mut r, 250, 100, 8, 10);
    let p = build_problem(&f, &[(3, 7)], 1e-3).unwrap();
    assert_eq!(p.raw_rows, 2259);
    assert_eq!(p.len(), 2259);

    let twice = fm(2, 3, &[0.5, 0.25, 0.5, 0.25], &[1, 1], &[]);
    let once = fm(2, 3, &[0.5, 0.25], &[1], &[]);
    let pt = build_problem(&twice, &[], 0.1).unwrap();
    let po = build_problem(&once, &[], 0.1).unwrap();
    assert_eq!((pt.raw_rows, pt.len()), (4, 2));
    assert_eq!(lp_feasible(&pt).unwrap().is_feasible(), lp_feasible(&po).unwrap().is_feasible());
}

#[test]
fn empty_problem_is_vacuously_feasible() {
    let f = fm(3, 4, &[], &[], &[]);
    let p = build_problem(&f, &[], 1e-3).unwrap();
    assert!(p.is_empty());
    assert!(lp_feasible(&p).unwrap().is_feasible());
}

#[test]
fn bad_arguments() {
    let f = fm(1, 2, &[1.0], &[0], &[1.0]);
    assert!(matches!(build_problem(&f, &[(0, 2)], 0.1), Err(Error::Argument(_))));
    assert!(matches!(build_problem(&f, &[(1, 0)], 0.1), Err(Error::Argument(_))));
    assert!(matches!(build_problem(&f, &[], 0.0), Err(Error::Argument(_))));
    assert!(FeatureMatrix::new(1, 2, vec![1.0], vec![2], vec![]).is_err());
    assert!(FeatureMatrix::new(1, 2, vec![f64::NAN], vec![0], vec![]).is_err());
}

#[test]
fn planted_witness_instances_are_feasible() {
    let mut r = rng::rng(21);
    let eps = 0.05;
    for _ in 0..200 {
        let (d, k) = (r.gen_range(1..5), r.gen_range(2..5));
        let star = Witness {
            w: (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
            b: (0..k).map(|_| r.gen_range(-1.0..1.0)).collect(),
        };
        let (mut train, mut labels) = (Vec::new(), Vec::new());
        for _ in 0..40 {
            let phi: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
            let c = (0..k).max_by(|&a, &b| star.score(&phi, a).total_cmp(&star.score(&phi, b))).unwrap();
            if star.class_margin(&phi, c) >= 2.0 * eps {
                train.extend(phi);
                labels.push(c);
            }
        }
        let f = fm(d, k, &train, &labels, &[]);
        for bound in [None, Some(star.inf_norm())] {
            let p = build_problem_boxed(&f, &[], eps, bound).unwrap();
            let res = lp_feasible(&p).unwrap();
            let Verdict::Feasible(w) = res.verdict else { panic!("planted instance reported infeasible") };
            assert!(check_witness(&p, &w) >= eps - 1e-9);
            if let Some(b) = bound {
                assert!(w.inf_norm() <= b * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn random_search_never_beats_the_solver() {
    let mut r = rng::rng(31);
    let eps = 0.05;
    let mut found = 0;
    for _ in 0..1000 {
        let (d, k) = (r.gen_range(1..3), r.gen_range(2..4));
        let n = r.gen_range(1..5);
        let f = random_instance(&mut r, n, 0, d, k);
        let p = build_problem_boxed(&f, &[], eps, Some(1.0)).unwrap();
        let res = lp_feasible(&p).unwrap();
        if let Verdict::Feasible(w) = &res.verdict {
            assert!(check_witness(&p, w) >= eps - 1e-9);
            assert!(w.inf_norm() <= 1.0 + 1e-12);
        }
        let hit = (0..10_000).any(|_| {
            let z = Witness {
                w: (0..k * d).map(|_| r.gen_range(-1.0..=1.0)).collect(),
                b: (0..k).map(|_| r.gen_range(-1.0..=1.0)).collect(),
            };
            check_witness(&p, &z) >= eps
        });
        if hit {
            found += 1;
            assert!(res.is_feasible(), "random search found a witness the solver missed");
        }
    }
    assert!(found > 100, "search oracle too weak to be informative: {found}");
}

#[test]
fn feasibility_is_monotone_in_margin() {
    let mut r = rng::rng(41);
    let grid = [1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];
    for _ in 0..100 {
        let f = random_instance(&mut r, 4, 0, 2, 3);
        let verdicts: Vec<bool> = grid
            .iter()
            .map(|&e| lp_feasible(&build_problem_boxed(&f, &[], e, Some(1.0)).unwrap()).unwrap().is_feasible())
            .collect();
        for i in 1..grid.len() {
            assert!(!verdicts[i] || verdicts[i - 1], "feasible at {} but not at {}", grid[i], grid[i - 1]);
        }
        let free: Vec<bool> = grid
            .iter()
            .map(|&e| lp_feasible(&build_problem(&f, &[], e).unwrap()).unwrap().is_feasible())
            .collect();
        assert!(free.iter().all(|&v| v == free[0]));
    }
}

#[test]
fn doubling_a_witness_doubles_its_slack() {
    let mut r = rng::rng(51);
    let mut seen = 0;
    for _ in 0..100 {
        let f = random_instance(&mut r, 5, 0, 3, 3);
        let p = build_problem(&f, &[], 0.01).unwrap();
        if let Verdict::Feasible(w) = lp_feasible(&p).unwrap().verdict {
            seen += 1;
            let s = check_witness(&p, &w);
            let s2 = check_witness(&p, &w.scaled(2.0));
            assert!((s2 - 2.0 * s).abs() <= 1e-12 * (1.0 + s.abs()));
            let p2 = build_problem(&f, &[], 0.02).unwrap();
            assert!(check_witness(&p2, &w.scaled(2.0)) >= 0.02 - 1e-9);
            assert!(lp_feasible(&p2).unwrap().is_feasible());
        }
    }
    assert!(seen > 10);
}

/// Brute-force max over the lattice `{−1, −1/2, 0, 1/2, 1}` of the box.
fn grid_max_margin(f: &FeatureMatrix) -> f64 {
    let (d, k) = (f.d(), f.classes());
    let nv = k * (d + 1);
    let p = build_problem_boxed(f, &[], 1.0, Some(1.0)).unwrap();
    let levels = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; nv];
    loop {
        let vals: Vec<f64> = idx.iter().map(|&i| levels[i]).collect();
        let w = Witness {
            w: vals[..k * d].to_vec(),
            b: vals[k * d..].to_vec(),
        };
        best = best.max(check_witness(&p, &w));
        let mut i = 0;
        while i < nv && idx[i] == levels.len() - 1 {
            idx[i] = 0;
            i += 1;
        }
        if i == nv {
            return best;
        }
        idx[i] += 1;
    }
}

#[test]
fn max_margin_on_hand_instances() {
    let one = fm(1, 2, &[1.0], &[0], &[]);
    let two = fm(1, 2, &[2.0], &[0], &[]);
    assert_eq!(grid_max_margin(&one), 4.0);
    assert_eq!(grid_max_margin(&two), 6.0);
    let m1 = max_margin(&one).unwrap();
    let m2 = max_margin(&two).unwrap();
    assert!((m1.epsilon_star - 4.0).abs() < 1e-9);
    assert!((m2.epsilon_star - 6.0).abs() < 1e-9);
    // with a free bias, scaling features is not a pure rescaling of ε*
    assert!(m1.epsilon_star <= m2.epsilon_star && m2.epsilon_star <= 2.0 * m1.epsilon_star);
}

#[test]
fn max_margin_dominates_grid_and_is_attained() {
    let mut r = rng::rng(61);
    for _ in 0..30 {
        let f = random_instance(&mut r, 2, 0, 1, 2);
        let g = grid_max_margin(&f);
        match max_margin(&f) {
            Ok(m) => {
                assert!(m.epsilon_star >= g - 1e-9);
                let p = build_problem_boxed(&f, &[], 1.0, Some(1.0)).unwrap();
                assert!(check_witness(&p, &m.witness) >= m.epsilon_star - 1e-7);
                assert!(m.witness.inf_norm() <= 1.0 + 1e-12);
            }
            Err(Error::DegeneratePolicy(_)) => assert!(g <= 1e-9),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn feature_scaling_bounds_max_margin() {
    let mut r = rng::rng(71);
    for _ in 0..30 {
        let f = random_instance(&mut r, 6, 0, 3, 3);
        let Ok(m1) = max_margin(&f) else { continue };
        let scaled = f.transformed(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let m2 = max_margin(&scaled).unwrap();
        assert!(m2.epsilon_star >= m1.epsilon_star - 1e-9);
        assert!(m2.epsilon_star <= 2.0 * m1.epsilon_star + 1e-9);
    }
}

#[test]
fn contradictory_training_set_is_degenerate() {
    let f = fm(1, 2, &[1.0, 1.0], &[0, 1], &[]);
    assert!(matches!(max_margin(&f), Err(Error::DegeneratePolicy(_))));
    assert!(matches!(MarginPolicy::Adaptive.resolve(&f), Err(Error::DegeneratePolicy(_))));
    let empty = fm(1, 2, &[], &[], &[]);
    assert!(matches!(max_margin(&empty), Err(Error::Argument(_))));
}

#[test]
fn adaptive_policy_halves_the_max_margin() {
    let f = fm(1, 2, &[1.0], &[0], &[1.0, -1.0]);
    let m = MarginPolicy::Adaptive.resolve(&f).unwrap();
    assert!((m.epsilon - 2.0).abs() < 1e-9);
    assert_eq!(m.bound, Some(1.0));
    assert_eq!(pointwise_extension(&f, 0, m).unwrap(), vec![0]);
    assert_eq!(pointwise_extension(&f, 1, m).unwrap(), vec![0, 1]);
}

#[test]
fn probe_on_a_training_point_is_pinned() {
    let f = fm(1, 2, &[1.0], &[0], &[1.0]);
    assert_eq!(pointwise_extension(&f, 0, no_box(1e-3)).unwrap(), vec![0]);
}

#[test]
fn trained_layer_certifies_the_nets_own_class() {
    let dims = Dims::new(5, 7, 6, 10);
    let mut r = rng::rng(81);
    let mut net = MlpParams::glorot(dims, &mut r);
    net.b2.iter_mut().for_each(|b| *b = 0.1);
    let xs: Vec<f64> = (0..40 * 5).map(|_| r.gen_range(0.0..1.0)).collect();
    let (train_xs, probe_xs) = xs.split_at(30 * 5);
    let ys = net.predict_batch(train_xs).unwrap();
    let f = FeatureMatrix::from_network(&net, train_xs, &ys, probe_xs).unwrap();
    let own = Witness::from_network(&net);
    let margin = no_box(1e-3);
    let out = pair_proxy(&f, margin, &[own.clone()]).unwrap();
    let preds = net.predict_batch(probe_xs).unwrap();
    for (j, ext) in out.per_probe.iter().enumerate() {
        assert!(!ext.is_empty() && ext.len() <= 10);
        if own.class_margin(f.probe_row(j), preds[j]) > 0.0 {
            assert!(ext.contains(&preds[j]));
        }
    }
    assert!(out.total <= 10 * f.n_probes());
    // the seed cache never changes a verdict
    let cold = pair_proxy(&f, margin, &[]).unwrap();
    assert_eq!(cold.per_probe, out.per_probe);
    assert!(out.stats.cache_hits > 0);
}

#[test]
fn extension_matches_joint_assignments() {
    let mut r = rng::rng(91);
    for trial in 0..60 {
        let (d, k, m) = (r.gen_range(1..3), r.gen_range(2..4), r.gen_range(1..4));
        let n = r.gen_range(1..4);
        let f = random_instance(&mut r, n, m, d, k);
        let eps = 1e-3;
        if !lp_feasible(&build_problem(&f, &[], eps).unwrap()).unwrap().is_feasible() {
            continue;
        }
        let mut joint: Vec<Vec<bool>> = vec![vec![false; k]; m];
        let total = k.pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let extra: Vec<(usize, usize)> = (0..m)
                .map(|j| {
                    let cls = c % k;
                    c /= k;
                    (j, cls)
                })
                .collect();
            if lp_feasible(&build_problem(&f, &extra, eps).unwrap()).unwrap().is_feasible() {
                for &(j, cls) in &extra {
                    joint[j][cls] = true;
                }
            }
        }
        let ext = pair_proxy(&f, no_box(eps), &[]).unwrap();
        for j in 0..m {
            let from_joint: Vec<usize> = (0..k).filter(|&c| joint[j][c]).collect();
            assert_eq!(ext.per_probe[j], from_joint, "trial {trial}, probe {j}");
        }
    }
}

#[test]
fn affine_maps_preserve_extensions() {
    let mut r = rng::rng(101);
    let f = random_instance(&mut r, 6, 5, 2, 3);
    assert!(affine_invariance_check(&f, &[1.0, 0.0, 0.0, 1.0], 1e-3).unwrap());
    assert!(affine_invariance_check(&f, &[2.0, 0.0, 0.0, 2.0], 1e-3).unwrap());
    let mut checked = 0;
    while checked < 20 {
        let a: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        if condition_number(&a, 2).map_or(true, |c| c > 100.0) {
            continue;
        }
        assert!(affine_invariance_check(&f, &a, 1e-3).unwrap(), "A = {a:?}");
        checked += 1;
    }
    assert!(matches!(affine_invariance_check(&f, &[1.0, 2.0, 2.0, 4.0], 1e-3), Err(Error::Argument(_))));
    assert!(matches!(affine_invariance_check(&f, &[1.0, 0.0, 0.0, 1e-10], 1e-3), Err(Error::Argument(_))));
}

#[test]
fn separated_blobs_have_positive_margin() {
    let ds = crate::data::synthetic_gaussian(60, 4, 3, 5).unwrap();
    let (xs, ys) = ds.all();
    let f = FeatureMatrix::new(4, 3, xs, ys, vec![]).unwrap();
    assert!(max_margin(&f).unwrap().epsilon_star > 0.0);
}

#[test]
fn warm_started_extensions_match_cold_solves() {
    let mut r = rng::rng(121);
    for (trial, bound) in [None, Some(1.0), None, Some(1.0)].into_iter().enumerate() {
        let (d, k) = (4, 5);
        let star = Witness {
            w: (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect(),
            b: (0..k).map(|_| r.gen_range(-0.5..0.5)).collect(),
        };
        let train: Vec<f64> = (0..80 * d).map(|_| r.gen_range(0.0..2.0)).collect();
        let labels: Vec<usize> = train
            .chunks(d)
            .map(|phi| (0..k).max_by(|&a, &b| star.score(phi, a).total_cmp(&star.score(phi, b))).unwrap())
            .collect();
        let probes: Vec<f64> = (0..12 * d).map(|_| r.gen_range(0.0..2.0)).collect();
        let f = fm(d, k, &train, &labels, &probes);
        let eps = match bound {
            None => 1e-3,
            Some(_) => max_margin(&f).unwrap().epsilon_star / 2.0,
        };
        let margin = ResolvedMargin {
            epsilon: eps,
            bound,
            epsilon_star: None,
        };
        let warm = pair_proxy(&f, margin, &[]).unwrap();
        for j in 0..f.n_probes() {
            let cold: Vec<usize> = (0..k)
                .filter(|&c| lp_feasible(&build_problem_boxed(&f, &[(j, c)], eps, bound).unwrap()).unwrap().is_feasible())
                .collect();
            assert_eq!(warm.per_probe[j], cold, "trial {trial}, probe {j}");
        }
    }
}

#[test]
fn solver_is_deterministic() {
    let mut r = rng::rng(111);
    let f = random_instance(&mut r, 30, 0, 4, 5);
    let p = build_problem(&f, &[], 1e-3).unwrap();
    assert_eq!(lp_feasible(&p).unwrap(), lp_feasible(&p).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_verdicts_are_sound(seed in any::<u64>(), n in 1usize..8, d in 1usize..4, k in 2usize..5, boxed in any::<bool>()) {
        let mut r = rng::rng(seed);
        let f = random_instance(&mut r, n, 0, d, k);
        let p = build_problem_boxed(&f, &[], 0.01, boxed.then_some(1.0)).unwrap();
        if let Verdict::Feasible(w) = lp_feasible(&p).unwrap().verdict {
            prop_assert!(check_witness(&p, &w) >= 0.01 - 1e-9);
        }
    }
}
