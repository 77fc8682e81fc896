//! Shapley attributions for tree ensembles.
//!
//! Tree attributions follow the path-dependent formulation: a feature
//! outside the coalition averages over both children of its split, weighted
//! by how many background rows reach each child.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::surrogate::{derive_seed, ForestEnsemble, RegressionTree, Rows};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("empty background")]
    EmptyBackground,
    #[error("expected {expected} features, got {found}")]
    Columns { expected: usize, found: usize },
    #[error("subsample size {m} exceeds {rows} rows")]
    SubsampleTooLarge { m: usize, rows: usize },
    #[error("no samples to attribute")]
    Empty,
    #[error("top {k} requested from {d} features")]
    TooManyDrivers { k: usize, d: usize },
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature: i32,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut [PathElement], depth: usize, zero: f64, one: f64, feature: i32) {
    path[depth] = PathElement { feature, zero, one, weight: if depth == 0 { 1.0 } else { 0.0 } };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind(path: &mut [PathElement], depth: usize, index: usize) {
    let PathElement { one, zero, .. } = path[index];
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
}

fn unwound_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let PathElement { one, zero, .. } = path[index];
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64 / d1;
        } else if zero != 0.0 {
            total += path[i].weight / zero * d1 / (depth - i) as f64;
        }
    }
    total
}

struct Walker<'a> {
    tree: &'a RegressionTree,
    covers: &'a [f64],
    x: &'a [f64],
    phi: &'a mut [f64],
    buf: Vec<PathElement>,
}

impl Walker<'_> {
    /// `start` is the offset of this level's path copy in `buf`; the parent
    /// path of length `depth` sits at `parent`.
    #[allow(clippy::too_many_arguments)]
    fn recurse(&mut self, node: usize, parent: usize, start: usize, depth: usize, zero: f64, one: f64, feature: i32) {
        let path_end = start + depth + 1;
        if self.buf.len() < path_end {
            self.buf.resize(path_end, PathElement::default());
        }
        if depth > 0 {
            self.buf.copy_within(parent..parent + depth, start);
        }
        extend(&mut self.buf[start..path_end], depth, zero, one, feature);
        let t = self.tree;
        if t.is_leaf(node) {
            let path = &self.buf[start..path_end];
            for i in 1..=depth {
                let w = unwound_sum(path, depth, i);
                let e = path[i];
                self.phi[e.feature as usize] += w * (e.one - e.zero) * t.value[node];
            }
            return;
        }
        let f = t.feature[node];
        let (l, r) = (t.left[node] as usize, t.right[node] as usize);
        let (hot, cold) = if self.x[f as usize] <= t.value[node] { (l, r) } else { (r, l) };
        let w = self.covers[node];
        let (hot_zero, cold_zero) = if w > 0.0 { (self.covers[hot] / w, self.covers[cold] / w) } else { (0.0, 0.0) };
        let (mut in_zero, mut in_one) = (1.0, 1.0);
        let mut depth = depth;
        if let Some(k) = (1..=depth).find(|&k| self.buf[start + k].feature == f) {
            in_zero = self.buf[start + k].zero;
            in_one = self.buf[start + k].one;
            unwind(&mut self.buf[start..path_end], depth, k);
            depth -= 1;
        }
        // A child both unreachable for x and uncovered contributes nothing.
        let child_start = start + depth + 1;
        if hot_zero * in_zero != 0.0 || in_one != 0.0 {
            self.recurse(hot, start, child_start, depth + 1, hot_zero * in_zero, in_one, f);
        }
        if cold_zero * in_zero != 0.0 {
            self.recurse(cold, start, child_start, depth + 1, cold_zero * in_zero, 0.0, f);
        }
    }
}

/// Expected tree output under the cover distribution.
pub fn expected_value(tree: &RegressionTree, covers: &[f64]) -> f64 {
    let root = covers[0];
    if root == 0.0 {
        return 0.0;
    }
    (0..tree.n_nodes()).filter(|&i| tree.is_leaf(i)).map(|i| tree.value[i] * covers[i] / root).sum()
}

/// Adds the attributions of `x` to `phi` given precomputed node covers.
pub fn tree_shap_with_covers(tree: &RegressionTree, covers: &[f64], x: &[f64], phi: &mut [f64]) {
    let cap = (tree.depth + 2) * (tree.depth + 3) / 2;
    let mut w = Walker { tree, covers, x, phi, buf: vec![PathElement::default(); cap] };
    w.recurse(0, 0, 0, 0, 1.0, 1.0, -1);
}

/// (φ₀, φ) of one tree at `x`, covers taken from the background rows.
pub fn tree_shap(tree: &RegressionTree, x: &[f64], background: Rows<'_>) -> Result<(f64, Vec<f64>), AttributionError> {
    if background.n() == 0 {
        return Err(AttributionError::EmptyBackground);
    }
    if x.len() != tree.n_features || background.cols != tree.n_features {
        return Err(AttributionError::Columns { expected: tree.n_features, found: x.len() });
    }
    let covers = tree.covers(background);
    let mut phi = vec![0.0; tree.n_features];
    tree_shap_with_covers(tree, &covers, x, &mut phi);
    Ok((expected_value(tree, &covers), phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    /// Subsamples per fold.
    pub subsamples: usize,
    /// Rows per subsample, drawn without replacement.
    pub subsample_size: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig { subsamples: 3, subsample_size: 32, seed: 0 }
    }
}

/// Row i of every field aggregates the i-th row of each (fold, subsample)
/// draw. Values are in the scaled target space unless `original_units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub feature_names: Vec<String>,
    pub phi0: f64,
    /// Row-major m×d.
    pub phi: Vec<f64>,
    /// Test-set row indices averaged into each row, in (fold, subsample)
    /// order.
    pub sources: Vec<Vec<usize>>,
    /// Averaged model output of each row; equals φ₀ + Σφ.
    pub prediction: Vec<f64>,
    /// Averaged feature values of each row, m×d.
    pub feature_values: Vec<f64>,
    pub original_units: bool,
}

impl AttributionMatrix {
    pub fn n_rows(&self) -> usize {
        self.sources.len()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.d()..(i + 1) * self.d()]
    }

    /// Largest |prediction − φ₀ − Σφ| over rows.
    pub fn max_local_error(&self) -> f64 {
        (0..self.n_rows())
            .map(|i| (self.prediction[i] - self.phi0 - self.row(i).iter().sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    /// Maps attributions to target units: φ scales by the range, the
    /// offset goes to φ₀.
    pub fn to_original_units(&self, scaler: (f64, f64)) -> AttributionMatrix {
        if self.original_units {
            return self.clone();
        }
        let (lo, hi) = scaler;
        let range = hi - lo;
        AttributionMatrix {
            phi0: lo + self.phi0 * range,
            phi: self.phi.iter().map(|v| v * range).collect(),
            prediction: self.prediction.iter().map(|v| lo + v * range).collect(),
            original_units: true,
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,prediction");
        for f in &self.feature_names {
            write!(s, ",{f}").expect("string write");
        }
        s.push('\n');
        for i in 0..self.n_rows() {
            write!(s, "{i},{}", self.prediction[i]).expect("string write");
            for v in self.row(i) {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-tree covers for one forest, plus its expected value.
struct ForestCovers {
    covers: Vec<Vec<f64>>,
    phi0: f64,
}

fn forest_covers(e: &ForestEnsemble, background: Rows<'_>) -> Vec<ForestCovers> {
    e.folds
        .par_iter()
        .map(|forest| {
            let covers: Vec<Vec<f64>> = forest.trees.iter().map(|t| t.covers(background)).collect();
            let phi0 = forest.trees.iter().zip(&covers).map(|(t, c)| expected_value(t, c)).sum::<f64>()
                / forest.trees.len() as f64;
            ForestCovers { covers, phi0 }
        })
        .collect()
}

/// Attributions of one forest at `x`: the mean over its trees.
fn forest_shap(forest: &crate::surrogate::Forest, fc: &ForestCovers, x: &[f64]) -> Vec<f64> {
    let mut phi = vec![0.0; x.len()];
    for (t, c) in forest.trees.iter().zip(&fc.covers) {
        tree_shap_with_covers(t, c, x, &mut phi);
    }
    let n = forest.trees.len() as f64;
    phi.iter_mut().for_each(|v| *v /= n);
    phi
}

/// Per fold k, averages forest attributions over `subsamples` seeded
/// draws of `subsample_size` test rows; then averages the folds. Output is
/// in the scaled target space.
pub fn ensemble_shap(
    e: &ForestEnsemble,
    x_test: Rows<'_>,
    background: Rows<'_>,
    cfg: ShapConfig,
) -> Result<AttributionMatrix, AttributionError> {
    let d = e.n_features();
    if x_test.cols != d || background.cols != d {
        return Err(AttributionError::Columns { expected: d, found: x_test.cols });
    }
    if background.n() == 0 {
        return Err(AttributionError::EmptyBackground);
    }
    let (m, l_count) = (cfg.subsample_size, cfg.subsamples.max(1));
    if m > x_test.n() {
        return Err(AttributionError::SubsampleTooLarge { m, rows: x_test.n() });
    }
    if m == 0 {
        return Err(AttributionError::Empty);
    }
    let fcs = forest_covers(e, background);
    let k_count = e.folds.len();
    let draws: Vec<Vec<usize>> = (0..k_count * l_count)
        .map(|j| {
            let (k, l) = (j / l_count, j % l_count);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64, l as u64));
            let mut idx = sample(&mut rng, x_test.n(), m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    // Φ^(k,ℓ) and f_k for every draw, computed in parallel.
    let per_draw: Vec<(Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .enumerate()
        .map(|(j, idx)| {
            let k = j / l_count;
            let mut phi = Vec::with_capacity(m * d);
            let mut pred = Vec::with_capacity(m);
            for &i in idx {
                let x = x_test.row(i);
                phi.extend(forest_shap(&e.folds[k], &fcs[k], x));
                pred.push(e.folds[k].predict_row(x));
            }
            (phi, pred)
        })
        .collect();
    let mut phi = vec![0.0; m * d];
    let mut prediction = vec![0.0; m];
    let mut feature_values = vec![0.0; m * d];
    for k in 0..k_count {
        let mut fold_phi = vec![0.0; m * d];
        let mut fold_pred = vec![0.0; m];
        for l in 0..l_count {
            let (p, f) = &per_draw[k * l_count + l];
            fold_phi.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            fold_pred.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            for (r, &i) in draws[k * l_count + l].iter().enumerate() {
                for c in 0..d {
                    feature_values[r * d + c] += x_test.row(i)[c];
                }
            }
        }
        phi.iter_mut().zip(&fold_phi).for_each(|(a, b)| *a += b / l_count as f64);
        prediction.iter_mut().zip(&fold_pred).for_each(|(a, b)| *a += b / l_count as f64);
    }
    let kf = k_count as f64;
    phi.iter_mut().for_each(|v| *v /= kf);
    prediction.iter_mut().for_each(|v| *v /= kf);
    feature_values.iter_mut().for_each(|v| *v /= (k_count * l_count) as f64);
    let phi0 = fcs.iter().map(|f| f.phi0).sum::<f64>() / kf;
    let sources = (0..m).map(|r| draws.iter().map(|dr| dr[r]).collect()).collect();
    Ok(AttributionMatrix {
        feature_names: e.feature_names.clone(),
        phi0,
        phi,
        sources,
        prediction,
        feature_values,
        original_units: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub feature_names: Vec<String>,
    /// Mean |φ| per feature, in feature order.
    pub values: Vec<f64>,
    /// Feature names by descending importance, ties by name.
    pub ranking: Vec<String>,
}

impl GlobalImportance {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.feature_names.iter().position(|f| f == name).map(|j| self.values[j])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,feature,importance\n");
        for (r, name) in self.ranking.iter().enumerate() {
            writeln!(s, "{},{name},{}", r + 1, self.value(name).expect("ranked feature")).expect("string write");
        }
        s
    }
}

pub fn global_importance(a: &AttributionMatrix) -> Result<GlobalImportance, AttributionError> {
    let (m, d) = (a.n_rows(), a.d());
    if m == 0 {
        return Err(AttributionError::Empty);
    }
    let values: Vec<f64> = (0..d).map(|j| (0..m).map(|i| a.phi[i * d + j].abs()).sum::<f64>() / m as f64).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then_with(|| a.feature_names[i].cmp(&a.feature_names[j])));
    Ok(GlobalImportance {
        feature_names: a.feature_names.clone(),
        values,
        ranking: order.into_iter().map(|j| a.feature_names[j].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub feature: String,
    /// Global mean |φ|.
    pub magnitude: f64,
    /// Sign of the mean signed φ: −1, 0 or 1.
    pub sign: i8,
    /// Mean feature value over the attributed rows.
    pub mean_value: f64,
}

pub fn shap_prompt_payload(g: &GlobalImportance, a: &AttributionMatrix, k: usize) -> Result<Vec<Driver>, AttributionError> {
    let d = a.d();
    if k > d {
        return Err(AttributionError::TooManyDrivers { k, d });
    }
    let m = a.n_rows();
    if m == 0 {
        return Err(AttributionError::Empty);
    }
    Ok(g.ranking[..k]
        .iter()
        .map(|name| {
            let j = a.feature_names.iter().position(|f| f == name).expect("ranked feature");
            let mean_phi = (0..m).map(|i| a.phi[i * d + j]).sum::<f64>() / m as f64;
            let mean_value = (0..m).map(|i| a.feature_values[i * d + j]).sum::<f64>() / m as f64;
            let sign = if mean_phi > 0.0 {
                1
            } else if mean_phi < 0.0 {
                -1
            } else {
                0
            };
            Driver { feature: name.clone(), magnitude: g.values[j], sign, mean_value }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump() -> RegressionTree {
        RegressionTree {
            n_features: 3,
            depth: 1,
            feature: vec![1, -1, -1],
            value: vec![0.5, 2.0, 6.0],
            left: vec![1, 0, 0],
            right: vec![2, 0, 0],
            count: vec![4, 3, 1],
        }
    }

    #[test]
    fn stump_puts_everything_on_its_feature() {
        let bg = [0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.4, 0.0, 0.0, 0.9, 0.0];
        let (phi0, phi) = tree_shap(&stump(), &[9.0, 1.0, 9.0], Rows::new(&bg, 3).unwrap()).unwrap();
        assert_eq!(phi0, 3.0);
        assert_eq!(phi, vec![0.0, 3.0, 0.0]);
    }

    #[test]
    fn single_leaf_has_no_attribution() {
        let t = RegressionTree {
            n_features: 2,
            depth: 0,
            feature: vec![-1],
            value: vec![4.0],
            left: vec![0],
            right: vec![0],
            count: vec![1],
        };
        let (phi0, phi) = tree_shap(&t, &[1.0, 2.0], Rows::new(&[0.0, 0.0], 2).unwrap()).unwrap();
        assert_eq!((phi0, phi), (4.0, vec![0.0, 0.0]));
        assert!(tree_shap(&t, &[1.0, 2.0], Rows { values: &[], cols: 2 }).is_err());
    }

    fn matrix(phi: Vec<f64>, d: usize) -> AttributionMatrix {
        let m = phi.len() / d;
        AttributionMatrix {
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            phi0: 0.0,
            prediction: (0..m).map(|i| phi[i * d..(i + 1) * d].iter().sum()).collect(),
            phi,
            sources: vec![vec![]; m],
            feature_values: vec![0.5; m * d],
            original_units: false,
        }
    }

    #[test]
    fn importance_symmetry_and_ties() {
        let g = global_importance(&matrix(vec![1.0, -1.0, -1.0, 1.0], 2)).unwrap();
        assert_eq!(g.values, vec![1.0, 1.0]);
        assert_eq!(g.ranking, vec!["f0", "f1"]);
    }

    #[test]
    fn single_column_ranks_first() {
        let a = matrix(vec![0.0, 0.0, 2.0, 0.0, 0.0, -4.0], 3);
        let g = global_importance(&a).unwrap();
        assert_eq!(g.ranking[0], "f2");
        assert_eq!(g.values, vec![0.0, 0.0, 3.0]);
        let p = shap_prompt_payload(&g, &a, 1).unwrap();
        assert_eq!(p, vec![Driver { feature: "f2".into(), magnitude: 3.0, sign: -1, mean_value: 0.5 }]);
        assert!(shap_prompt_payload(&g, &a, 4).is_err());
    }
}
