//! Scenario feature matrices: per-series trend triples, broadcast global
//! series, min-max scaling, and the one-hot design matrix used for learning.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Param, ScenarioData, Sector, SetsSpec, Solution, Tensor};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("trend needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("trend years must be distinct")]
    DuplicateYears,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite value in column {0}")]
    NonFinite(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> FeatureError {
    FeatureError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTriple {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    /// OLS slope per year.
    pub slope: f64,
}

pub fn trend(years: &[i32], values: &[f64]) -> Result<TrendTriple, FeatureError> {
    if years.len() != values.len() {
        return Err(FeatureError::Length(format!("{} years, {} values", years.len(), values.len())));
    }
    let n = years.len();
    if n < 2 {
        return Err(FeatureError::TooFewPoints(n));
    }
    let t_mean = years.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
    let y_mean = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&t, &y) in years.iter().zip(values) {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    if sxx == 0.0 {
        return Err(FeatureError::DuplicateYears);
    }
    Ok(TrendTriple { initial: values[0], last: values[n - 1], slope: sxy / sxx })
}

pub fn broadcast_global(t: TrendTriple, n_regions: usize) -> Vec<TrendTriple> {
    vec![t; n_regions]
}

/// Rows are (region, technology) pairs; `values` holds only the numeric
/// columns, row-major. `columns` lists every column including the two
/// leading categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub values: Vec<f64>,
    pub scaling: Option<Vec<(f64, f64)>>,
}

pub const CATEGORICAL: [&str; 2] = ["Region", "Technology"];

impl FeatureMatrix {
    /// (rows, columns) counting the categorical columns.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.columns.len())
    }

    pub fn numeric_columns(&self) -> &[String] {
        &self.columns[CATEGORICAL.len()..]
    }

    pub fn n_numeric(&self) -> usize {
        self.columns.len() - CATEGORICAL.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_numeric();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.numeric_columns().iter().position(|c| c == name)?;
        let p = self.n_numeric();
        Some((0..self.rows.len()).map(|i| self.values[i * p + j]).collect())
    }

    pub fn get(&self, region: &str, tech: &str, column: &str) -> Option<f64> {
        let i = self.rows.iter().position(|(r, t)| r == region && t == tech)?;
        let j = self.numeric_columns().iter().position(|c| c == column)?;
        Some(self.values[i * self.n_numeric() + j])
    }
}

struct SeriesSpec {
    stem: &'static str,
    param: Param,
}

fn series_specs(bank: Sector) -> (Vec<SeriesSpec>, Vec<SeriesSpec>, Vec<(&'static str, Param)>) {
    let s = |stem, param| SeriesSpec { stem, param };
    match bank {
        Sector::Fm => (
            vec![
                s("CostMarg", Param::CostMargFms),
                s("CostInv", Param::CostInvFms),
                s("CostInvLevel", Param::CostInvLevelFms),
                s("GHG", Param::GhgFms),
                s("ForestGrowth", Param::FmsGrowth),
            ],
            vec![s("CO2", Param::Co2Price), s("GHGTarget", Param::GhgTarget)],
            vec![("InitialBeechArea", Param::BeechArea0), ("InitialGrassArea", Param::GrassArea0)],
        ),
        Sector::Agri => (
            vec![
                s("CostMargAgri", Param::CostMargAgri),
                s("CostInvAgri", Param::CostInvAgri),
                s("CostInvLevAgri", Param::CostInvLevelAgri),
                s("GHGAgri", Param::GhgAgri),
                s("AgriGrowth", Param::AgriGrowth),
                s("Peat_Extraction", Param::PeatExtract),
            ],
            vec![],
            vec![("Agriarea0", Param::AgriArea0)],
        ),
    }
}

fn triple_names(stem: &str, sets: &SetsSpec) -> [String; 3] {
    [format!("{stem}_{}", sets.first_year()), format!("{stem}_{}", sets.last_year()), format!("{stem}_Slope")]
}

/// Column names of the feature matrix for a bank, categorical first.
pub fn feature_columns(bank: Sector, sets: &SetsSpec) -> Vec<String> {
    let (cell, global, stat) = series_specs(bank);
    let mut cols: Vec<String> = CATEGORICAL.iter().map(|s| s.to_string()).collect();
    for s in cell.iter().chain(&global) {
        cols.extend(triple_names(s.stem, sets));
    }
    cols.extend(stat.iter().map(|(n, _)| n.to_string()));
    cols
}

/// Series of a (year, [tech,] [region]) tensor at a fixed tech and region.
fn series(t: &Tensor, k: usize, r: usize) -> Vec<f64> {
    let ny = t.shape()[0];
    match t.shape().len() {
        1 => t.values().to_vec(),
        2 => (0..ny).map(|y| t.get(&[y, r])).collect(),
        _ => (0..ny).map(|y| t.get(&[y, k, r])).collect(),
    }
}

/// Feature matrix of one scenario: rows region-major then technology.
pub fn assemble(data: &ScenarioData, bank: Sector) -> Result<FeatureMatrix, FeatureError> {
    let sets = &data.sets;
    let (cell, global, stat) = series_specs(bank);
    let techs = sets.techs(bank);
    let global_trends: Vec<TrendTriple> = global
        .iter()
        .map(|s| trend(&sets.years, data.param(s.param).values()))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(sets.regions.len() * techs.len());
    let mut values = Vec::new();
    for (r, region) in sets.regions.iter().enumerate() {
        for (k, tech) in techs.iter().enumerate() {
            rows.push((region.clone(), tech.clone()));
            for s in &cell {
                let tr = trend(&sets.years, &series(data.param(s.param), k, r))?;
                values.extend([tr.initial, tr.last, tr.slope]);
            }
            for tr in &global_trends {
                values.extend([tr.initial, tr.last, tr.slope]);
            }
            for (_, p) in &stat {
                values.push(data.param(*p).values()[r]);
            }
        }
    }
    let columns = feature_columns(bank, sets);
    if let Some(j) = values.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite(columns[CATEGORICAL.len() + j % (columns.len() - 2)].clone()));
    }
    Ok(FeatureMatrix { rows, columns, values, scaling: None })
}

/// Per-column (min, max) over one or more matrices of equal width.
pub fn fit_minmax<'a>(matrices: impl IntoIterator<Item = &'a FeatureMatrix>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for m in matrices {
        let p = m.n_numeric();
        if out.is_empty() {
            out = vec![(f64::INFINITY, f64::NEG_INFINITY); p];
        }
        for row in m.values.chunks(p) {
            for (b, &v) in out.iter_mut().zip(row) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
    }
    out
}

fn scale_value(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Applies given per-column bounds. Constant columns map to 0.
pub fn apply_minmax(m: &FeatureMatrix, bounds: &[(f64, f64)]) -> Result<FeatureMatrix, FeatureError> {
    let p = m.n_numeric();
    if bounds.len() != p {
        return Err(FeatureError::Length(format!("{} bounds for {p} columns", bounds.len())));
    }
    let values = m.values.iter().enumerate().map(|(o, &v)| scale_value(v, bounds[o % p])).collect();
    Ok(FeatureMatrix { rows: m.rows.clone(), columns: m.columns.clone(), values, scaling: Some(bounds.to_vec()) })
}

pub fn minmax_normalize(m: &FeatureMatrix) -> FeatureMatrix {
    let bounds = fit_minmax([m]);
    apply_minmax(m, &bounds).expect("bounds fitted on the same matrix")
}

/// Inverse of the recorded scaling; a matrix without scaling is returned
/// unchanged.
pub fn denormalize(m: &FeatureMatrix) -> FeatureMatrix {
    let Some(bounds) = &m.scaling else { return m.clone() };
    let p = m.n_numeric();
    let values = m
        .values
        .iter()
        .enumerate()
        .map(|(o, &v)| {
            let (lo, hi) = bounds[o % p];
            if hi > lo {
                lo + v * (hi - lo)
            } else {
                lo
            }
        })
        .collect();
    FeatureMatrix { rows: m.rows.clone(), columns: m.columns.clone(), values, scaling: None }
}

/// Learning design matrix: one row per (region, technology, year).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub values: Vec<f64>,
    /// (scenario, region, technology, year) per row.
    pub keys: Vec<(String, String, String, i32)>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn select(&self, idx: &[usize]) -> DesignMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.n_cols());
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        DesignMatrix { columns: self.columns.clone(), values, keys: idx.iter().map(|&i| self.keys[i].clone()).collect() }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scenario".to_string(), "region".into(), "technology".into(), "year_label".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (i, (s, r, t, y)) in self.keys.iter().enumerate() {
            let mut rec = vec![s.clone(), r.clone(), t.clone(), y.to_string()];
            rec.extend(self.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }
}

/// Cross-joins a normalized feature matrix with the years, adding one-hot
/// region and technology indicators and a min-max scaled year column.
pub fn encode_for_learning(m: &FeatureMatrix, scenario: &str, years: &[i32]) -> DesignMatrix {
    let regions = unique_in_order(m.rows.iter().map(|(r, _)| r.as_str()));
    let techs = unique_in_order(m.rows.iter().map(|(_, t)| t.as_str()));
    let mut columns: Vec<String> = m.numeric_columns().to_vec();
    columns.extend(regions.iter().map(|r| format!("Region_{r}")));
    columns.extend(techs.iter().map(|t| format!("Technology_{t}")));
    columns.push("year".to_string());
    let (y0, y1) = (
        years.iter().copied().min().unwrap_or(0) as f64,
        years.iter().copied().max().unwrap_or(0) as f64,
    );
    let mut values = Vec::with_capacity(m.rows.len() * years.len() * columns.len());
    let mut keys = Vec::new();
    for (i, (region, tech)) in m.rows.iter().enumerate() {
        for &y in years {
            values.extend_from_slice(m.row(i));
            values.extend(regions.iter().map(|r| if r == region { 1.0 } else { 0.0 }));
            values.extend(techs.iter().map(|t| if t == tech { 1.0 } else { 0.0 }));
            values.push(scale_value(y as f64, (y0, y1)));
            keys.push((scenario.to_string(), region.clone(), tech.clone(), y));
        }
    }
    DesignMatrix { columns, values, keys }
}

fn unique_in_order<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in it {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningDataset {
    pub design: DesignMatrix,
    pub target: Vec<f64>,
    pub target_name: String,
    /// Pooled feature bounds used for scaling.
    pub bounds: Vec<(f64, f64)>,
}

/// Stacks every scenario of a bank into one design matrix with the solved
/// capacity of the bank's sector as target. Features are min-max scaled
/// with bounds pooled over all scenarios so that scenario differences
/// survive scaling.
pub fn learning_dataset(
    scenarios: &BTreeMap<String, ScenarioData>,
    solutions: &BTreeMap<String, Solution>,
    bank: Sector,
) -> Result<LearningDataset, FeatureError> {
    let raw: Vec<(String, FeatureMatrix)> = scenarios
        .iter()
        .map(|(id, d)| Ok((id.clone(), assemble(d, bank)?)))
        .collect::<Result<_, FeatureError>>()?;
    let bounds = fit_minmax(raw.iter().map(|(_, m)| m));
    let mut design: Option<DesignMatrix> = None;
    let mut target = Vec::new();
    for (id, m) in &raw {
        let data = &scenarios[id];
        let sol = solutions.get(id).ok_or_else(|| FeatureError::Length(format!("no solution for {id}")))?;
        let cap = sol.cap(bank);
        let part = encode_for_learning(&apply_minmax(m, &bounds)?, id, &data.sets.years);
        for (_, region, tech, year) in &part.keys {
            let r = data.sets.regions.iter().position(|x| x == region).expect("row region");
            let k = data.sets.techs(bank).iter().position(|x| x == tech).expect("row tech");
            let t = data.sets.year_index(*year).expect("row year");
            target.push(cap.get(&[t, k, r]));
        }
        match &mut design {
            None => design = Some(part),
            Some(d) => {
                d.values.extend(part.values);
                d.keys.extend(part.keys);
            }
        }
    }
    let design = design.ok_or_else(|| FeatureError::Length("no scenarios".into()))?;
    let target_name = match bank {
        Sector::Fm => "capFMs",
        Sector::Agri => "capAgri",
    };
    Ok(LearningDataset { design, target, target_name: target_name.to_string(), bounds })
}

/// Seeded random split into (train, test) row indices; `test_fraction` of
/// the rows, rounded, go to test. Both lists are sorted.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    columns: Vec<String>,
    scaling: Option<Vec<(f64, f64)>>,
}

pub fn feature_matrix_to_csv(m: &FeatureMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&m.columns).expect("in-memory write");
    for (i, (r, t)) in m.rows.iter().enumerate() {
        let mut rec = vec![r.clone(), t.clone()];
        rec.extend(m.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

/// Writes `<stem>.csv` and the scaling sidecar `<stem>.json`.
pub fn write_feature_matrix(dir: &Path, stem: &str, m: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, feature_matrix_to_csv(m)).map_err(|e| io_err(&csv_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let side = Sidecar { columns: m.columns.clone(), scaling: m.scaling.clone() };
    let json = serde_json::to_string_pretty(&side).map_err(|e| io_err(&json_path, e))?;
    fs::write(&json_path, json + "\n").map_err(|e| io_err(&json_path, e))
}

pub fn read_feature_matrix(dir: &Path, stem: &str) -> Result<FeatureMatrix, FeatureError> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| io_err(&json_path, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let text = fs::read_to_string(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(|e| io_err(&csv_path, e))?.iter().map(String::from).collect();
    if header != side.columns {
        return Err(io_err(&csv_path, "header does not match sidecar columns"));
    }
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(&csv_path, e))?;
        rows.push((rec[0].to_string(), rec[1].to_string()));
        for f in rec.iter().skip(2) {
            values.push(f.parse::<f64>().map_err(|e| io_err(&csv_path, e))?);
        }
    }
    Ok(FeatureMatrix { rows, columns: side.columns, values, scaling: side.scaling })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthesize_baseline;

    #[test]
    fn trend_constant_and_affine() {
        let years: Vec<i32> = (2020..=2050).collect();
        let c = trend(&years, &[5.0; 31]).unwrap();
        assert_eq!((c.initial, c.last, c.slope), (5.0, 5.0, 0.0));
        let lin: Vec<f64> = years.iter().map(|&y| 2.0 * y as f64).collect();
        assert!((trend(&years, &lin).unwrap().slope - 2.0).abs() < 1e-10);
        assert!(matches!(trend(&[2020], &[1.0]), Err(FeatureError::TooFewPoints(1))));
        assert!(matches!(trend(&[2020, 2020], &[1.0, 2.0]), Err(FeatureError::DuplicateYears)));
    }

    #[test]
    fn normalize_examples() {
        let m = FeatureMatrix {
            rows: vec![("a".into(), "x".into()), ("b".into(), "x".into()), ("c".into(), "x".into())],
            columns: vec!["Region".into(), "Technology".into(), "v".into(), "c".into()],
            values: vec![2.0, 7.0, 4.0, 7.0, 6.0, 7.0],
            scaling: None,
        };
        let n = minmax_normalize(&m);
        assert_eq!(n.column("v").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(n.column("c").unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(denormalize(&n), m);
    }

    #[test]
    fn desk_shapes_and_names() {
        let d = synthesize_baseline(&SetsSpec::desk(), 1);
        let fm = assemble(&d, Sector::Fm).unwrap();
        assert_eq!(fm.shape(), (12, 25));
        assert_eq!(fm.columns[2], "CostMarg_2025");
        assert_eq!(fm.columns[4], "CostMarg_Slope");
        let agri = assemble(&d, Sector::Agri).unwrap();
        assert_eq!(agri.shape(), (8, 21));
        assert_eq!(agri.rows[1], ("DE1".to_string(), "Agri05_Agroforestry".to_string()));
    }

    #[test]
    fn toy_one_hot() {
        let m = FeatureMatrix {
            rows: vec![
                ("R1".into(), "T1".into()),
                ("R1".into(), "T2".into()),
                ("R2".into(), "T1".into()),
                ("R2".into(), "T2".into()),
            ],
            columns: vec!["Region".into(), "Technology".into(), "f".into()],
            values: vec![0.0, 0.25, 0.5, 1.0],
            scaling: Some(vec![(0.0, 1.0)]),
        };
        let d = encode_for_learning(&m, "S", &[2020, 2030, 2040]);
        assert_eq!(d.columns, ["f", "Region_R1", "Region_R2", "Technology_T1", "Technology_T2", "year"]);
        assert_eq!(d.n_rows(), 12);
        assert_eq!(d.row(4), &[0.25, 1.0, 0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn split_partitions() {
        let (train, test) = train_test_split(100, 0.2, 3);
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
