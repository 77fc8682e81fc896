use forge_core::similarity::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_force_upgma, dyadic_condensed};

#[test]
fn upgma_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let n = rng.gen_range(2..=12);
        let d = dyadic_condensed(&mut rng, n);
        let dist = |i: usize, j: usize| if i == j { 0.0 } else { d[condensed_index(n, i.min(j), i.max(j))] };
        let z = average_linkage(&d).unwrap();
        let oracle = brute_force_upgma(n, &dist);
        assert_eq!(z.merges.len(), n - 1);
        for (m, o) in z.merges.iter().zip(&oracle) {
            assert_eq!((m.a, m.b, m.size), (o.a, o.b, o.size), "case {case}");
            assert_eq!(m.height, o.height, "case {case}");
        }
    }
}

#[test]
fn flat_clusters_match_component_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let d = dyadic_condensed(&mut rng, n);
        let z = average_linkage(&d).unwrap();
        let t = rng.gen_range(0..32) as f64 / 16.0;
        let labels = flat_clusters(&z, t);
        // Members of each merged cluster up to height t share a component.
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut comp: Vec<usize> = (0..n).collect();
        for m in &z.merges {
            let mut joined = members[m.a].clone();
            joined.extend(&members[m.b]);
            if m.height <= t {
                let c = comp[joined[0]];
                for &i in &joined {
                    comp[i] = c;
                }
            }
            members.push(joined);
        }
        for i in 0..n {
            for j in 0..n {
                assert_eq!(labels[i] == labels[j], comp[i] == comp[j]);
            }
        }
        assert_eq!(labels[0], 1);
        let k = *labels.iter().max().unwrap();
        for l in 1..=k {
            assert!(labels.contains(&l));
        }
    }
}

fn random_grids(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize) -> Vec<ScenarioGrid> {
    (0..n)
        .map(|s| ScenarioGrid {
            id: format!("S{:02}", s + 1),
            rows,
            cols,
            values: (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        })
        .collect()
}

fn oracle_rho(a: &ScenarioGrid, b: &ScenarioGrid) -> f64 {
    let z = |g: &ScenarioGrid| {
        let mut out = vec![0.0; g.values.len()];
        for c in 0..g.cols {
            let col: Vec<f64> = (0..g.rows).map(|r| g.values[r * g.cols + c]).collect();
            let mean = col.iter().sum::<f64>() / g.rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g.rows - 1) as f64;
            for r in 0..g.rows {
                out[r * g.cols + c] = if var > 0.0 { (col[r] - mean) / var.sqrt() } else { 0.0 };
            }
        }
        out
    };
    let (u, v) = (z(a), z(b));
    // Columns of z-scores have zero mean, so the flattened means vanish.
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(&u, &v) / (dot(&u, &u) * dot(&v, &v)).sqrt()
}

#[test]
fn correlation_matches_oracle_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grids = random_grids(&mut rng, 7, 12, 5);
    let c = scenario_correlation(&grids).unwrap();
    for i in 0..7 {
        assert_eq!(c.get(i, i), Some(1.0));
        for j in 0..7 {
            let r = c.get(i, j).unwrap();
            assert_eq!(Some(r), c.get(j, i));
            assert!((-1.0..=1.0).contains(&r));
            if i != j {
                assert!((r - oracle_rho(&grids[i], &grids[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn positive_affine_column_maps_are_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut grids = random_grids(&mut rng, 2, 8, 3);
    let mut scaled = grids[0].clone();
    scaled.id = "S03".into();
    for r in 0..8 {
        for c in 0..3 {
            let v = &mut scaled.values[r * 3 + c];
            *v = *v * (c as f64 + 1.5) + 10.0 * c as f64;
        }
    }
    grids.push(scaled);
    let c = scenario_correlation(&grids).unwrap();
    assert!((c.get(0, 2).unwrap() - 1.0).abs() < 1e-12);
    assert!((c.get(1, 2).unwrap() - c.get(1, 0).unwrap()).abs() < 1e-12);
}

#[test]
fn intra_mean_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grids = random_grids(&mut rng, 9, 6, 4);
    let c = scenario_correlation(&grids).unwrap();
    let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(1..=3)).collect();
    for k in 1..=3 {
        let members: Vec<usize> = (0..9).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            assert!(intra_cluster_mean(&c, &labels, k).is_err());
            continue;
        }
        let mut s = 0.0;
        for &i in &members {
            for &j in &members {
                s += c.get(i, j).unwrap();
            }
        }
        let expect = s / (members.len() * members.len()) as f64;
        assert!((intra_cluster_mean(&c, &labels, k).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn constant_grid_yields_typed_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut grids = random_grids(&mut rng, 3, 5, 2);
    grids[1].values = vec![4.0; 10];
    let c = scenario_correlation(&grids).unwrap();
    assert_eq!(c.get(0, 1), None);
    assert!(!c.undefined_pairs().is_empty());
    assert!(matches!(to_dissimilarity(&c), Err(SimilarityError::Undefined(..))));
    assert!(cluster_report(&grids, 0.3).is_err());
}

#[test]
fn report_round_trips_through_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grids = random_grids(&mut rng, 6, 10, 3);
    let rep = cluster_report(&grids, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rep.write(dir.path(), "fm_input").unwrap();
    let back = ClusterReport::read(dir.path(), "fm_input").unwrap();
    assert_eq!(back, rep);
    for f in ["fm_input_correlation.csv", "fm_input_linkage.csv", "fm_input_labels.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
