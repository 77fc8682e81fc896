use forge_core::attribution::*;
use forge_core::surrogate::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{cond_exp, exhaustive_shapley, random_tree};

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn matches_exhaustive_oracle_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let t = random_tree(&mut rng, d, 3);
        let bg = random_rows(&mut rng, 40, d);
        let bg = Rows::new(&bg, d).unwrap();
        let covers = t.covers(bg);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (phi0, phi) = tree_shap(&t, &x, bg).unwrap();
        let oracle = exhaustive_shapley(&t, &covers, &x);
        assert!((phi0 - cond_exp(&t, &covers, &x, 0, 0)).abs() < 1e-12);
        for (a, b) in phi.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-8, "max deviation {worst:e}");
}

#[test]
fn local_accuracy_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let d = rng.gen_range(1..=6);
        let t = random_tree(&mut rng, d, 6);
        let bg = random_rows(&mut rng, 50, d);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (phi0, phi) = tree_shap(&t, &x, Rows::new(&bg, d).unwrap()).unwrap();
        let err = (t.predict_row(&x) - phi0 - phi.iter().sum::<f64>()).abs();
        assert!(err <= 1e-8, "local accuracy error {err:e}");
    }
}

#[test]
fn depth_one_stump_matches_single_player() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let t = RegressionTree {
            n_features: 3,
            depth: 1,
            feature: vec![1, -1, -1],
            value: vec![0.5, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            left: vec![1, 0, 0],
            right: vec![2, 0, 0],
            count: vec![2, 1, 1],
        };
        let bg = random_rows(&mut rng, 20, 3);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (phi0, phi) = tree_shap(&t, &x, Rows::new(&bg, 3).unwrap()).unwrap();
        assert_eq!(phi[0], 0.0);
        assert_eq!(phi[2], 0.0);
        assert!((phi[1] - (t.predict_row(&x) - phi0)).abs() < 1e-14);
    }
}

#[test]
fn consistency_spot_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    while checked < 50 {
        let d = rng.gen_range(2..=4);
        let t = random_tree(&mut rng, d, 3);
        let j = rng.gen_range(0..d);
        let bg = random_rows(&mut rng, 40, d);
        let bg = Rows::new(&bg, d).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Raise every leaf whose path agrees with x on all splits over j.
        let mut t2 = t.clone();
        let mut stack = vec![(0usize, true)];
        while let Some((node, ok)) = stack.pop() {
            if t.is_leaf(node) {
                if ok {
                    t2.value[node] += rng.gen_range(0.0..2.0);
                }
                continue;
            }
            let f = t.feature[node] as usize;
            let goes_left = x[f] <= t.value[node];
            let (l, r) = (t.left[node] as usize, t.right[node] as usize);
            stack.push((l, ok && (f != j || goes_left)));
            stack.push((r, ok && (f != j || !goes_left)));
        }
        let covers = t.covers(bg);
        // The oracle confirms j's marginal contribution weakly grows for
        // every coalition.
        for mask in 0u32..(1 << d) {
            if mask & (1 << j) != 0 {
                continue;
            }
            let m1 = cond_exp(&t, &covers, &x, mask | (1 << j), 0) - cond_exp(&t, &covers, &x, mask, 0);
            let m2 = cond_exp(&t2, &covers, &x, mask | (1 << j), 0) - cond_exp(&t2, &covers, &x, mask, 0);
            assert!(m2 >= m1 - 1e-12);
        }
        let (_, p1) = tree_shap(&t, &x, bg).unwrap();
        let (_, p2) = tree_shap(&t2, &x, bg).unwrap();
        assert!(p2[j] >= p1[j] - 1e-8, "{} < {}", p2[j], p1[j]);
        checked += 1;
    }
}

fn toy_data(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.gen_range(0.0..1.0);
        let b: f64 = rng.gen_range(0.0..1.0);
        let c: f64 = rng.gen_range(0.0..1.0);
        // Column 3 is constant, so no tree can split on it.
        x.extend([a, b, c, 0.5]);
        y.push(3.0 * a + (b > 0.5) as u8 as f64 - c * c);
    }
    (x, y)
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

#[test]
fn missing_feature_gets_exact_zero() {
    let (x, y) = toy_data(200, 1);
    let cfg = EnsembleConfig { n_folds: 3, trees_per_forest: 5, seed: 4, ..Default::default() };
    let e = fit_ensemble(Rows::new(&x, 4).unwrap(), &y, &names(4), "y", cfg).unwrap();
    for f in &e.folds {
        for t in &f.trees {
            assert!(!t.used_features().contains(&3));
        }
    }
    let rows = Rows::new(&x, 4).unwrap();
    let a = ensemble_shap(&e, rows, rows, ShapConfig { subsamples: 2, subsample_size: 40, seed: 1 }).unwrap();
    for i in 0..a.n_rows() {
        assert_eq!(a.row(i)[3], 0.0);
    }
    assert!(a.max_local_error() <= 1e-8);
}

#[test]
fn ensemble_average_matches_manual_expansion() {
    let (x, y) = toy_data(60, 3);
    let rows = Rows::new(&x, 4).unwrap();
    let cfg = EnsembleConfig { n_folds: 2, trees_per_forest: 2, seed: 9, ..Default::default() };
    let e = fit_ensemble(rows, &y, &names(4), "y", cfg).unwrap();
    let n = rows.n();
    let a = ensemble_shap(&e, rows, rows, ShapConfig { subsamples: 1, subsample_size: n, seed: 0 }).unwrap();
    for i in [0, 17, 59] {
        let xi = rows.row(i);
        let mut manual = [0.0; 4];
        let mut phi0 = 0.0;
        for f in &e.folds {
            for t in &f.trees {
                let (p0, p) = tree_shap(t, xi, rows).unwrap();
                phi0 += p0 / 4.0;
                for j in 0..4 {
                    manual[j] += p[j] / 4.0;
                }
            }
        }
        assert!((a.phi0 - phi0).abs() < 1e-12);
        for j in 0..4 {
            assert!((a.row(i)[j] - manual[j]).abs() < 1e-12);
        }
        assert!((a.prediction[i] - e.predict_scaled_row(xi)).abs() < 1e-12);
    }
}

#[test]
fn identical_folds_give_single_forest_values() {
    let (x, y) = toy_data(50, 8);
    let rows = Rows::new(&x, 4).unwrap();
    let cfg = EnsembleConfig { n_folds: 1, trees_per_forest: 3, seed: 2, ..Default::default() };
    let single = fit_ensemble(rows, &y, &names(4), "y", cfg).unwrap();
    let mut doubled = single.clone();
    doubled.folds.push(single.folds[0].clone());
    let sc = ShapConfig { subsamples: 1, subsample_size: 50, seed: 0 };
    let a = ensemble_shap(&single, rows, rows, sc).unwrap();
    let b = ensemble_shap(&doubled, rows, rows, sc).unwrap();
    for (p, q) in a.phi.iter().zip(&b.phi) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn original_units_keep_local_accuracy() {
    let (x, y) = toy_data(120, 6);
    let rows = Rows::new(&x, 4).unwrap();
    let cfg = EnsembleConfig { n_folds: 2, trees_per_forest: 4, seed: 1, ..Default::default() };
    let e = fit_ensemble(rows, &y, &names(4), "y", cfg).unwrap();
    let a = ensemble_shap(&e, rows, rows, ShapConfig { subsamples: 2, subsample_size: 30, seed: 5 }).unwrap();
    let o = a.to_original_units(e.target_scaler);
    let range = e.target_scaler.1 - e.target_scaler.0;
    assert!(o.max_local_error() <= 1e-8 * range.max(1.0));
    let g = global_importance(&o).unwrap();
    let mut sorted = g.ranking.clone();
    sorted.sort();
    assert_eq!(sorted, names(4));
}

#[test]
fn importance_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let phi: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = AttributionMatrix {
        feature_names: names(3),
        phi0: 0.0,
        prediction: (0..5).map(|i| phi[i * 3..i * 3 + 3].iter().sum()).collect(),
        phi: phi.clone(),
        sources: vec![vec![]; 5],
        feature_values: vec![0.0; 15],
        original_units: false,
    };
    let g = global_importance(&a).unwrap();
    for j in 0..3 {
        let mut s = 0.0;
        for i in 0..5 {
            s += phi[i * 3 + j].abs();
        }
        assert!((g.values[j] - s / 5.0).abs() < 1e-12);
    }
    let payload = shap_prompt_payload(&g, &a, 3).unwrap();
    assert_eq!(payload.len(), 3);
    assert_eq!(payload.iter().map(|p| p.feature.clone()).collect::<Vec<_>>(), g.ranking);
}
