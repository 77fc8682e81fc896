//! Scenario correlation matrices and average-linkage clustering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::model::Tensor;

/// Default cut height on the 1 − ρ scale.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("shape mismatch: {a} is {shape_a:?}, {b} is {shape_b:?}")]
    Shape { a: String, b: String, shape_a: (usize, usize), shape_b: (usize, usize) },
    #[error("correlation between {0} and {1} is undefined (constant data)")]
    Undefined(String, String),
    #[error("need at least {need} scenarios, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Column-wise z-score of a row-major `rows × cols` grid with sample
/// standard deviation; constant columns map to 0.
pub fn zscore(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    if rows == 0 {
        return out;
    }
    for j in 0..cols {
        // The rounded mean of equal values can miss them by an ulp, which
        // the division below would blow up to O(1).
        let first = values[j];
        if (0..rows).all(|i| values[i * cols + j] == first) {
            for i in 0..rows {
                out[i * cols + j] = 0.0;
            }
            continue;
        }
        let mean = (0..rows).map(|i| values[i * cols + j]).sum::<f64>() / rows as f64;
        let ss: f64 = (0..rows).map(|i| (values[i * cols + j] - mean).powi(2)).sum();
        let sd = if rows > 1 { (ss / (rows - 1) as f64).sqrt() } else { 0.0 };
        for i in 0..rows {
            out[i * cols + j] = if sd > 0.0 { (values[i * cols + j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Pearson correlation; `None` when either vector is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> Option<f64> {
    assert_eq!(u.len(), v.len(), "pearson needs equal lengths");
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return None;
    }
    Some((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// A scenario's data as a row-major grid, columns being the features.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGrid {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScenarioGrid {
    /// Numeric part of a feature matrix.
    pub fn from_features(id: &str, m: &FeatureMatrix) -> Self {
        ScenarioGrid { id: id.to_string(), rows: m.rows.len(), cols: m.n_numeric(), values: m.values.clone() }
    }

    /// A (year, tech, region) output tensor with rows (region, tech) and
    /// one column per year.
    pub fn from_output(id: &str, t: &Tensor) -> Self {
        let (ny, nk, nr) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut values = Vec::with_capacity(ny * nk * nr);
        for r in 0..nr {
            for k in 0..nk {
                for y in 0..ny {
                    values.push(t.get(&[y, k, r]));
                }
            }
        }
        ScenarioGrid { id: id.to_string(), rows: nr * nk, cols: ny, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub ids: Vec<String>,
    /// Row-major N×N; `None` marks an undefined pair.
    pub rho: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rho[i * self.n() + j]
    }

    pub fn undefined_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| self.get(i, j).is_none()).collect()
    }

    /// Defined off-diagonal values, upper triangle.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).filter_map(move |j| self.get(i, j))).collect()
    }

    pub fn min_off_diagonal(&self) -> Option<f64> {
        self.off_diagonal().into_iter().reduce(f64::min)
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let v = self.off_diagonal();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..self.n()).map(|j| self.get(i, j).map(|v| format!("{v}")).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }
}

/// Z-scores each scenario grid per column, vectorizes row-major and
/// correlates every pair. Undefined pairs are kept as `None` and logged.
pub fn scenario_correlation(grids: &[ScenarioGrid]) -> Result<CorrelationMatrix, SimilarityError> {
    let n = grids.len();
    if let Some(first) = grids.first() {
        for g in &grids[1..] {
            if (g.rows, g.cols) != (first.rows, first.cols) {
                return Err(SimilarityError::Shape {
                    a: first.id.clone(),
                    b: g.id.clone(),
                    shape_a: (first.rows, first.cols),
                    shape_b: (g.rows, g.cols),
                });
            }
        }
    }
    let z: Vec<Vec<f64>> = grids.par_iter().map(|g| zscore(&g.values, g.rows, g.cols)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals: Vec<Option<f64>> = pairs.par_iter().map(|&(i, j)| pearson(&z[i], &z[j])).collect();
    let mut rho = vec![None; n * n];
    for i in 0..n {
        rho[i * n + i] = Some(1.0);
    }
    for (&(i, j), v) in pairs.iter().zip(vals) {
        if v.is_none() {
            log::warn!("correlation between {} and {} is undefined", grids[i].id, grids[j].id);
        }
        rho[i * n + j] = v;
        rho[j * n + i] = v;
    }
    Ok(CorrelationMatrix { ids: grids.iter().map(|g| g.id.clone()).collect(), rho })
}

/// Index of pair (i, j), i < j, in a condensed vector of n points.
pub fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    n * i - i * (i + 1) / 2 + (j - i - 1)
}

/// `1 − ρ` for the upper triangle in row-major order.
pub fn to_dissimilarity(c: &CorrelationMatrix) -> Result<Vec<f64>, SimilarityError> {
    let n = c.n();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let rho = c.get(i, j).ok_or_else(|| SimilarityError::Undefined(c.ids[i].clone(), c.ids[j].clone()))?;
            d.push(1.0 - rho);
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Cluster ids: originals are `0..n`, the i-th merge creates `n + i`.
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageMatrix {
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl LinkageMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,height,size\n");
        for m in &self.merges {
            writeln!(s, "{},{},{},{}", m.a, m.b, m.height, m.size).expect("string write");
        }
        s
    }

    pub fn max_height(&self) -> f64 {
        self.merges.iter().map(|m| m.height).fold(0.0, f64::max)
    }
}

/// Unweighted average linkage over a condensed distance vector.
///
/// Between-cluster distance sums are carried exactly as sums and divided
/// once by `|A|·|B|`. Ties go to the pair with the smallest
/// (min id, max id).
pub fn average_linkage(d: &[f64]) -> Result<LinkageMatrix, SimilarityError> {
    let n = ((1.0 + (1.0 + 8.0 * d.len() as f64).sqrt()) / 2.0).round() as usize;
    if n < 2 || n * (n - 1) / 2 != d.len() {
        return Err(SimilarityError::TooFew { need: 2, got: n });
    }
    // Active clusters: (id, size); sums[a][b] over member pairs.
    let mut active: Vec<(usize, usize)> = (0..n).map(|i| (i, 1)).collect();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = d[condensed_index(n, i, j)];
            sums[i][j] = v;
            sums[j][i] = v;
        }
    }
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in 0..active.len() {
            for q in p + 1..active.len() {
                let h = sums[p][q] / (active[p].1 * active[q].1) as f64;
                let (lo, hi) = {
                    let (x, y) = (active[p].0, active[q].0);
                    (x.min(y), x.max(y))
                };
                let better = match best {
                    None => true,
                    Some((bh, bp, bq)) => {
                        let (blo, bhi) = (active[bp].0.min(active[bq].0), active[bp].0.max(active[bq].0));
                        h < bh || (h == bh && (lo, hi) < (blo, bhi))
                    }
                };
                if better {
                    best = Some((h, p, q));
                }
            }
        }
        let (h, p, q) = best.expect("at least two active clusters");
        let (ida, idb) = (active[p].0.min(active[q].0), active[p].0.max(active[q].0));
        let size = active[p].1 + active[q].1;
        merges.push(Merge { a: ida, b: idb, height: h, size });
        // Merge q into p, then drop q.
        for r in 0..active.len() {
            if r != p && r != q {
                let s = sums[p][r] + sums[q][r];
                sums[p][r] = s;
                sums[r][p] = s;
            }
        }
        active[p] = (n + step, size);
        active.remove(q);
        sums.remove(q);
        for row in &mut sums {
            row.remove(q);
        }
    }
    Ok(LinkageMatrix { n, merges })
}

/// Cuts the tree at height `t`: ids joined by merges of height ≤ t share a
/// label. Labels are dense from 1 in order of first appearance.
pub fn flat_clusters(z: &LinkageMatrix, t: f64) -> Vec<usize> {
    let n = z.n;
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, m) in z.merges.iter().enumerate() {
        let new = n + i;
        if m.height <= t {
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = new;
            parent[rb] = new;
        }
    }
    let mut labels = vec![0; n];
    let mut seen: Vec<usize> = Vec::new();
    for (i, label) in labels.iter_mut().enumerate() {
        let root = find(&mut parent, i);
        let pos = seen.iter().position(|&r| r == root).unwrap_or_else(|| {
            seen.push(root);
            seen.len() - 1
        });
        *label = pos + 1;
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalPairs {
    pub most: Pair,
    pub least: Pair,
}

impl ExtremalPairs {
    pub fn render(&self) -> String {
        format!(
            "Most similar scenarios: ('{}', '{}') with correlation {:.4}\nLeast similar scenarios: ('{}', '{}') with correlation {:.4}",
            self.most.a, self.most.b, self.most.rho, self.least.a, self.least.b, self.least.rho
        )
    }
}

/// Most and least correlated pairs over defined i < j entries; ties keep
/// the lexicographically first pair.
pub fn extremal_pairs(c: &CorrelationMatrix) -> Result<ExtremalPairs, SimilarityError> {
    let n = c.n();
    let mut most: Option<(f64, usize, usize)> = None;
    let mut least: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let Some(v) = c.get(i, j) else { continue };
            if most.is_none_or(|(m, _, _)| v > m) {
                most = Some((v, i, j));
            }
            if least.is_none_or(|(m, _, _)| v < m) {
                least = Some((v, i, j));
            }
        }
    }
    let pair = |(rho, i, j): (f64, usize, usize)| Pair { a: c.ids[i].clone(), b: c.ids[j].clone(), rho };
    match (most, least) {
        (Some(m), Some(l)) => Ok(ExtremalPairs { most: pair(m), least: pair(l) }),
        _ => Err(SimilarityError::TooFew { need: 2, got: n }),
    }
}

/// Mean of ρ over all ordered member pairs of cluster `k`, diagonal
/// included. Undefined pairs are skipped.
pub fn intra_cluster_mean(c: &CorrelationMatrix, labels: &[usize], k: usize) -> Result<f64, SimilarityError> {
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
    if members.is_empty() {
        return Err(SimilarityError::EmptyCluster(k));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for &i in &members {
        for &j in &members {
            if let Some(v) = c.get(i, j) {
                sum += v;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Correlation, linkage, labels and extremal pairs of one scenario space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub correlation: CorrelationMatrix,
    pub linkage: LinkageMatrix,
    pub threshold: f64,
    pub labels: Vec<usize>,
    pub extremal: ExtremalPairs,
}

pub fn cluster_report(grids: &[ScenarioGrid], threshold: f64) -> Result<ClusterReport, SimilarityError> {
    let correlation = scenario_correlation(grids)?;
    let linkage = average_linkage(&to_dissimilarity(&correlation)?)?;
    let labels = flat_clusters(&linkage, threshold);
    let extremal = extremal_pairs(&correlation)?;
    Ok(ClusterReport { correlation, linkage, threshold, labels, extremal })
}

impl ClusterReport {
    pub fn labels_csv(&self) -> String {
        let mut s = String::from("id,label\n");
        for (id, l) in self.correlation.ids.iter().zip(&self.labels) {
            writeln!(s, "{id},{l}").expect("string write");
        }
        s
    }

    /// Writes `<stem>_correlation.csv`, `<stem>_linkage.csv`,
    /// `<stem>_labels.csv` and `<stem>_clusters.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), SimilarityError> {
        let io = |p: &Path, e: &dyn std::fmt::Display| SimilarityError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let files = [
            (format!("{stem}_correlation.csv"), self.correlation.to_csv()),
            (format!("{stem}_linkage.csv"), self.linkage.to_csv()),
            (format!("{stem}_labels.csv"), self.labels_csv()),
            (format!("{stem}_clusters.json"), serde_json::to_string_pretty(self).expect("serializable") + "\n"),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io(&p, &e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<ClusterReport, SimilarityError> {
        let p = dir.join(format!("{stem}_clusters.json"));
        let text = fs::read_to_string(&p)
            .map_err(|e| SimilarityError::Io { path: p.display().to_string(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| SimilarityError::Io { path: p.display().to_string(), message: e.to_string() })
    }
}
