//! Regression trees, bagged forests and the K-forest ensemble surrogate.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENSEMBLE_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("empty dataset")]
    Empty,
    #[error("{values} values do not form rows of {cols} columns")]
    Ragged { values: usize, cols: usize },
    #[error("{rows} rows but {targets} targets")]
    Length { rows: usize, targets: usize },
    #[error("expected {expected} columns, got {found}")]
    Columns { expected: usize, found: usize },
    #[error("need at least {need} rows for {need} folds, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("target range is degenerate (all values {0})")]
    DegenerateTarget(f64),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    pub values: &'a [f64],
    pub cols: usize,
}

impl<'a> Rows<'a> {
    pub fn new(values: &'a [f64], cols: usize) -> Result<Self, SurrogateError> {
        if cols == 0 || values.len() % cols != 0 {
            return Err(SurrogateError::Ragged { values: values.len(), cols });
        }
        Ok(Rows { values, cols })
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.cols
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    /// ⌈p/3⌉ candidate features per node.
    Third,
    All,
    Count(usize),
}

impl FeatureSubsample {
    pub fn size(self, p: usize) -> usize {
        match self {
            FeatureSubsample::Third => p.div_ceil(3),
            FeatureSubsample::All => p,
            FeatureSubsample::Count(c) => c.clamp(1, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: None, min_leaf: 1, feature_subsample: FeatureSubsample::Third, seed: 0 }
    }
}

/// Nodes stored as parallel arrays. `feature[i] < 0` marks a leaf whose
/// prediction is `value[i]`; otherwise `value[i]` is the threshold and rows
/// with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub n_features: usize,
    pub depth: usize,
    pub feature: Vec<i32>,
    pub value: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Training rows (with bootstrap multiplicity) reaching each node.
    pub count: Vec<u32>,
}

impl RegressionTree {
    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] < 0
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while self.feature[i] >= 0 {
            i = if x[self.feature[i] as usize] <= self.value[i] { self.left[i] } else { self.right[i] } as usize;
        }
        i
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.value[self.leaf(x)]
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.feature.iter().filter(|&&f| f >= 0).map(|&f| f as usize).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Number of `rows` passing through each node.
    pub fn covers(&self, rows: Rows<'_>) -> Vec<f64> {
        let mut c = vec![0.0; self.n_nodes()];
        for i in 0..rows.n() {
            let x = rows.row(i);
            let mut j = 0;
            loop {
                c[j] += 1.0;
                if self.feature[j] < 0 {
                    break;
                }
                j = if x[self.feature[j] as usize] <= self.value[j] { self.left[j] } else { self.right[j] } as usize;
            }
        }
        c
    }

    fn push(&mut self, feature: i32, value: f64, count: usize) -> usize {
        self.feature.push(feature);
        self.value.push(value);
        self.left.push(0);
        self.right.push(0);
        self.count.push(count as u32);
        self.feature.len() - 1
    }
}

fn check_finite(v: &[f64]) -> Result<(), SurrogateError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(SurrogateError::NonFinite(i)),
        None => Ok(()),
    }
}

struct Builder<'a> {
    x: Rows<'a>,
    y: &'a [f64],
    params: TreeParams,
    m_try: usize,
    rng: ChaCha8Rng,
    tree: RegressionTree,
    order: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.tree.push(-1, mean, idx.len())
    }

    /// Best (feature, threshold) by variance reduction over the candidate
    /// features, or `None` when no feature admits a split. Constant features
    /// do not count towards the candidate budget.
    fn best_split(&mut self, idx: &mut [usize]) -> Option<(usize, f64)> {
        let p = self.x.cols;
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let min_leaf = self.params.min_leaf.max(1);
        self.order.clear();
        self.order.extend(0..p);
        self.order.shuffle(&mut self.rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut tried = 0;
        let order = std::mem::take(&mut self.order);
        for &f in &order {
            if tried >= self.m_try && best.is_some() {
                break;
            }
            let xv = |i: usize| self.x.values[i * p + f];
            let first = xv(idx[0]);
            if idx.iter().all(|&i| xv(i) == first) {
                continue;
            }
            tried += 1;
            idx.sort_by(|&a, &b| xv(a).total_cmp(&xv(b)).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for s in 0..n - 1 {
                left_sum += self.y[idx[s]];
                let (nl, nr) = (s + 1, n - s - 1);
                let (a, b) = (xv(idx[s]), xv(idx[s + 1]));
                if a == b || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                if best.is_none_or(|(bs, _, _)| score > bs) {
                    let mid = 0.5 * (a + b);
                    let thr = if mid < b { mid } else { a };
                    best = Some((score, f, thr));
                }
            }
        }
        self.order = order;
        best.map(|(_, f, thr)| (f, thr))
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        self.tree.depth = self.tree.depth.max(depth);
        let n = idx.len();
        let first = self.y[idx[0]];
        let constant = idx.iter().all(|&i| self.y[i] == first);
        let depth_cap = self.params.max_depth.is_some_and(|d| depth >= d);
        if constant || depth_cap || n < 2 * self.params.min_leaf.max(1) {
            return self.leaf(idx);
        }
        let Some((f, thr)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let node = self.tree.push(f as i32, thr, n);
        let p = self.x.cols;
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x.values[i * p + f] <= thr);
        let li = self.build(&mut l, depth + 1);
        let ri = self.build(&mut r, depth + 1);
        self.tree.left[node] = li as u32;
        self.tree.right[node] = ri as u32;
        node
    }
}

/// Fits a CART regression tree on the rows listed in `sample` (repeats
/// allowed, as in a bootstrap).
pub fn fit_tree_on(x: Rows<'_>, y: &[f64], sample: &[usize], params: TreeParams) -> Result<RegressionTree, SurrogateError> {
    if x.n() != y.len() {
        return Err(SurrogateError::Length { rows: x.n(), targets: y.len() });
    }
    if sample.is_empty() {
        return Err(SurrogateError::Empty);
    }
    let mut b = Builder {
        x,
        y,
        params,
        m_try: params.feature_subsample.size(x.cols),
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        tree: RegressionTree {
            n_features: x.cols,
            depth: 0,
            feature: Vec::new(),
            value: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            count: Vec::new(),
        },
        order: Vec::with_capacity(x.cols),
    };
    let mut idx = sample.to_vec();
    b.build(&mut idx, 0);
    Ok(b.tree)
}

pub fn fit_tree(x: Rows<'_>, y: &[f64], params: TreeParams) -> Result<RegressionTree, SurrogateError> {
    let all: Vec<usize> = (0..x.n()).collect();
    fit_tree_on(x, y, &all, params)
}

/// Deterministic child seed for (seed, a, b).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub seed: u64,
    pub trees: Vec<RegressionTree>,
}

impl Forest {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_folds: usize,
    pub trees_per_forest: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_folds: 10,
            trees_per_forest: 50,
            max_depth: None,
            min_leaf: 1,
            feature_subsample: FeatureSubsample::Third,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestEnsemble {
    pub schema: u32,
    pub config: EnsembleConfig,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// (min, max) of the training targets.
    pub target_scaler: (f64, f64),
    pub folds: Vec<Forest>,
}

impl ForestEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        let (lo, hi) = self.target_scaler;
        (y - lo) / (hi - lo)
    }

    pub fn unscale_target(&self, s: f64) -> f64 {
        let (lo, hi) = self.target_scaler;
        lo + s * (hi - lo)
    }

    /// Mean over forests in the scaled target space.
    pub fn predict_scaled_row(&self, x: &[f64]) -> f64 {
        self.folds.iter().map(|f| f.predict_row(x)).sum::<f64>() / self.folds.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, SurrogateError> {
        let e: ForestEnsemble =
            serde_json::from_str(s).map_err(|e| SurrogateError::Io { path: "<json>".into(), message: e.to_string() })?;
        if e.schema != ENSEMBLE_SCHEMA {
            return Err(SurrogateError::Io { path: "<json>".into(), message: format!("unsupported schema {}", e.schema) });
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        fs::write(path, self.to_json())
            .map_err(|e| SurrogateError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let s = fs::read_to_string(path)
            .map_err(|e| SurrogateError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&s)
    }
}

/// Fits K forests, each on a seeded bootstrap of round((1 − 1/K)·n) rows.
/// Trees of one forest share the fold's rows and differ in their feature
/// subsampling seed. Targets are min-max scaled before fitting.
pub fn fit_ensemble(
    x: Rows<'_>,
    y: &[f64],
    feature_names: &[String],
    target_name: &str,
    config: EnsembleConfig,
) -> Result<ForestEnsemble, SurrogateError> {
    let n = x.n();
    if n != y.len() {
        return Err(SurrogateError::Length { rows: n, targets: y.len() });
    }
    if feature_names.len() != x.cols {
        return Err(SurrogateError::Columns { expected: x.cols, found: feature_names.len() });
    }
    let k = config.n_folds.max(1);
    if n < k || n == 0 {
        return Err(SurrogateError::TooFewRows { need: k, got: n });
    }
    check_finite(x.values)?;
    check_finite(y)?;
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(SurrogateError::DegenerateTarget(lo));
    }
    let ys: Vec<f64> = y.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let fold_size = if k == 1 { n } else { ((n as f64) * (1.0 - 1.0 / k as f64)).round().max(1.0) as usize };

    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|f| (0..config.trees_per_forest).map(move |t| (f, t))).collect();
    let fold_seeds: Vec<u64> = (0..k).map(|f| derive_seed(config.seed, 1, f as u64)).collect();
    let fold_rows: Vec<Vec<usize>> = fold_seeds
        .iter()
        .map(|&s| {
            if k == 1 {
                return (0..n).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..fold_size).map(|_| rng.gen_range(0..n)).collect()
        })
        .collect();
    let trees: Vec<Result<RegressionTree, SurrogateError>> = jobs
        .par_iter()
        .map(|&(f, t)| {
            let tree_seed = derive_seed(fold_seeds[f], 2, t as u64);
            let params = TreeParams {
                max_depth: config.max_depth,
                min_leaf: config.min_leaf,
                feature_subsample: config.feature_subsample,
                seed: tree_seed,
            };
            fit_tree_on(x, &ys, &fold_rows[f], params)
        })
        .collect();
    let mut folds: Vec<Forest> = fold_seeds.iter().map(|&seed| Forest { seed, trees: Vec::new() }).collect();
    for (&(f, _), tree) in jobs.iter().zip(trees) {
        folds[f].trees.push(tree?);
    }
    Ok(ForestEnsemble {
        schema: ENSEMBLE_SCHEMA,
        config,
        feature_names: feature_names.to_vec(),
        target_name: target_name.to_string(),
        target_scaler: (lo, hi),
        folds,
    })
}

/// Ensemble predictions in original target units.
pub fn predict(e: &ForestEnsemble, x: Rows<'_>) -> Result<Vec<f64>, SurrogateError> {
    if x.cols != e.n_features() {
        return Err(SurrogateError::Columns { expected: e.n_features(), found: x.cols });
    }
    Ok((0..x.n()).into_par_iter().map(|i| e.unscale_target(e.predict_scaled_row(x.row(i)))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

/// RMSE and R² against the empirical mean of `y_true`. A constant
/// `y_true` scores R² = 1 when predicted exactly and 0 otherwise.
pub fn evaluate(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionMetrics, SurrogateError> {
    if y_true.len() != y_pred.len() {
        return Err(SurrogateError::Length { rows: y_pred.len(), targets: y_true.len() });
    }
    if y_true.is_empty() {
        return Err(SurrogateError::Empty);
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y_true.iter().map(|a| (a - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(RegressionMetrics { rmse: (ss_res / n).sqrt(), r2, n: y_true.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_is_a_leaf() {
        let t = fit_tree(Rows::new(&[3.0, 4.0], 2).unwrap(), &[7.5], TreeParams::default()).unwrap();
        assert_eq!(t.n_nodes(), 1);
        assert_eq!(t.predict_row(&[0.0, 0.0]), 7.5);
    }

    #[test]
    fn constant_target_depth_zero() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let t = fit_tree(Rows::new(&x, 1).unwrap(), &[2.0; 10], TreeParams::default()).unwrap();
        assert_eq!((t.n_nodes(), t.depth), (1, 0));
    }

    #[test]
    fn memorizes_unique_points() {
        let x: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let y: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let t = fit_tree(Rows::new(&x, 1).unwrap(), &y, TreeParams::default()).unwrap();
        for i in 0..10 {
            assert_eq!(t.predict_row(&x[i..i + 1]), y[i]);
        }
    }

    #[test]
    fn evaluate_hand_case() {
        let m = evaluate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((m.rmse - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.r2 - 0.5).abs() < 1e-15);
        assert_eq!(evaluate(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap().r2, 0.0);
        assert_eq!(evaluate(&[1.0, 2.0], &[1.0, 2.0]).unwrap().rmse, 0.0);
    }

    #[test]
    fn degenerate_target_rejected() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let names = vec!["a".to_string()];
        let err = fit_ensemble(Rows::new(&x, 1).unwrap(), &[4.0; 12], &names, "y", EnsembleConfig::default());
        assert!(matches!(err, Err(SurrogateError::DegenerateTarget(_))));
    }
}
