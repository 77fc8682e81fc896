//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use forge_core::surrogate::RegressionTree;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solves the square system by Gaussian elimination with partial pivoting.
pub fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[p][k].abs() < 1e-10 {
            return None;
        }
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Minimum over all basic feasible points, or None when the region is empty.
pub fn vertex_oracle(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<f64> {
    let n = c.len();
    // all constraints as g·x ≥ h: rows of A, then x_j ≥ 0
    let mut g: Vec<Vec<f64>> = a.to_vec();
    let mut h: Vec<f64> = b.to_vec();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        g.push(e);
        h.push(0.0);
    }
    let mut best: Option<f64> = None;
    for set in combinations(g.len(), n) {
        let sa: Vec<Vec<f64>> = set.iter().map(|&i| g[i].clone()).collect();
        let sb: Vec<f64> = set.iter().map(|&i| h[i]).collect();
        let Some(x) = gauss(sa, sb) else { continue };
        let feasible = g.iter().zip(&h).all(|(gi, &hi)| gi.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() >= hi - 1e-7);
        if feasible {
            let z: f64 = c.iter().zip(&x).map(|(p, q)| p * q).sum();
            best = Some(best.map_or(z, |bz: f64| bz.min(z)));
        }
    }
    best
}

/// Random tree of depth ≤ `max_depth` over `d` features.
pub fn random_tree(rng: &mut ChaCha8Rng, d: usize, max_depth: usize) -> RegressionTree {
    let mut t = RegressionTree {
        n_features: d,
        depth: 0,
        feature: vec![],
        value: vec![],
        left: vec![],
        right: vec![],
        count: vec![],
    };
    fn grow(t: &mut RegressionTree, rng: &mut ChaCha8Rng, d: usize, depth: usize, max_depth: usize) -> usize {
        t.depth = t.depth.max(depth);
        let i = t.feature.len();
        t.feature.push(-1);
        t.value.push(0.0);
        t.left.push(0);
        t.right.push(0);
        t.count.push(1);
        if depth < max_depth && (depth == 0 || rng.gen_bool(0.75)) {
            t.feature[i] = rng.gen_range(0..d) as i32;
            t.value[i] = rng.gen_range(0.1..0.9);
            let l = grow(t, rng, d, depth + 1, max_depth);
            let r = grow(t, rng, d, depth + 1, max_depth);
            t.left[i] = l as u32;
            t.right[i] = r as u32;
        } else {
            t.value[i] = rng.gen_range(-5.0..5.0);
        }
        i
    }
    grow(&mut t, rng, d, 0, max_depth);
    t
}

/// Path-conditioned expectation with coalition `mask`.
pub fn cond_exp(t: &RegressionTree, covers: &[f64], x: &[f64], mask: u32, node: usize) -> f64 {
    if t.is_leaf(node) {
        return t.value[node];
    }
    let f = t.feature[node] as usize;
    let (l, r) = (t.left[node] as usize, t.right[node] as usize);
    if mask & (1 << f) != 0 {
        let next = if x[f] <= t.value[node] { l } else { r };
        return cond_exp(t, covers, x, mask, next);
    }
    if covers[node] == 0.0 {
        return 0.0;
    }
    (covers[l] * cond_exp(t, covers, x, mask, l) + covers[r] * cond_exp(t, covers, x, mask, r)) / covers[node]
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values by enumerating all 2^d coalitions.
pub fn exhaustive_shapley(t: &RegressionTree, covers: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let v = |mask: u32| cond_exp(t, covers, x, mask, 0);
    (0..d)
        .map(|i| {
            let mut phi = 0.0;
            for mask in 0u32..(1 << d) {
                if mask & (1 << i) != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = factorial(s) * factorial(d - s - 1) / factorial(d);
                phi += w * (v(mask | (1 << i)) - v(mask));
            }
            phi
        })
        .collect()
}

pub struct OracleMerge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

/// Average linkage recomputed from member lists at every step.
pub fn brute_force_upgma(n: usize, dist: &dyn Fn(usize, usize) -> f64) -> Vec<OracleMerge> {
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    for step in 0..n - 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for p in 0..clusters.len() {
            for q in 0..clusters.len() {
                if p == q {
                    continue;
                }
                let (a, b) = (&clusters[p], &clusters[q]);
                let mut s = 0.0;
                for &i in &a.1 {
                    for &j in &b.1 {
                        s += dist(i, j);
                    }
                }
                let h = s / (a.1.len() * b.1.len()) as f64;
                let key = (a.0.min(b.0), a.0.max(b.0));
                let take = match &best {
                    None => true,
                    Some((bh, bk, _, _)) => h < *bh || (h == *bh && key < *bk),
                };
                if take {
                    best = Some((h, key, p, q));
                }
            }
        }
        let (h, key, p, q) = best.unwrap();
        let mut members = clusters[p].1.clone();
        members.extend(&clusters[q].1);
        out.push(OracleMerge { a: key.0, b: key.1, height: h, size: members.len() });
        let (hi, lo) = (p.max(q), p.min(q));
        clusters.remove(hi);
        clusters.remove(lo);
        clusters.push((n + step, members));
    }
    out
}

pub fn dyadic_condensed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Multiples of 1/16 keep every partial sum exact and produce ties.
    (0..n * (n - 1) / 2).map(|_| rng.gen_range(0..32) as f64 / 16.0).collect()
}

