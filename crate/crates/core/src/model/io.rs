//! CSV and JSON persistence of scenarios and labelled tensors.
//!
//! Each tensor is a long-format CSV whose header is the subset of
//! `year,region,technology,value` matching its axes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Axis, ModelError, Param, ScenarioData, SetsSpec, Solution, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "scenario.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn column_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Year => "year",
        Axis::Region => "region",
        Axis::FmTech | Axis::AgriTech => "technology",
    }
}

/// Header order of the tensor's axes: year, region, technology.
fn header_order(axes: &[Axis]) -> Vec<usize> {
    let rank = |a: Axis| match a {
        Axis::Year => 0,
        Axis::Region => 1,
        Axis::FmTech | Axis::AgriTech => 2,
    };
    let mut order: Vec<usize> = (0..axes.len()).collect();
    order.sort_by_key(|&d| rank(axes[d]));
    order
}

pub fn tensor_to_csv(tensor: &Tensor, sets: &SetsSpec) -> Result<String, ModelError> {
    let axes = tensor.axes();
    let labels: Vec<Vec<String>> = axes.iter().map(|&a| sets.axis_labels(a)).collect();
    let order = header_order(axes);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = order.iter().map(|&d| column_name(axes[d])).collect();
    header.push("value");
    w.write_record(&header).map_err(|e| io_err(Path::new("<csv>"), e))?;
    let shape = tensor.shape();
    let mut idx = vec![0usize; shape.len()];
    for &v in tensor.values() {
        let mut rec: Vec<String> = order.iter().map(|&d| labels[d][idx[d]].clone()).collect();
        rec.push(format!("{v}"));
        w.write_record(&rec).map_err(|e| io_err(Path::new("<csv>"), e))?;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let bytes = w.into_inner().map_err(|e| io_err(Path::new("<csv>"), e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_tensor(path: &Path, tensor: &Tensor, sets: &SetsSpec) -> Result<(), ModelError> {
    fs::write(path, tensor_to_csv(tensor, sets)?).map_err(|e| io_err(path, e))
}

/// Reads a long-format tensor; every cell must appear exactly once.
pub fn read_tensor(path: &Path, axes: &[Axis], sets: &SetsSpec) -> Result<Tensor, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    let order = header_order(axes);
    let mut expected: Vec<&str> = order.iter().map(|&d| column_name(axes[d])).collect();
    expected.push("value");
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(io_err(path, format!("header {found:?}, expected {expected:?}")));
    }
    let lookup: Vec<BTreeMap<String, usize>> = axes
        .iter()
        .map(|&a| sets.axis_labels(a).into_iter().enumerate().map(|(i, l)| (l, i)).collect())
        .collect();
    let shape: Vec<usize> = axes.iter().map(|&a| sets.axis_len(a)).collect();
    let mut t = Tensor::zeros(axes, &shape);
    let mut seen = vec![false; t.values().len()];
    let mut idx = vec![0usize; axes.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        for (col, &d) in order.iter().enumerate() {
            let label = &rec[col];
            idx[d] = *lookup[d]
                .get(label)
                .ok_or_else(|| io_err(path, format!("row {}: unknown {} {label:?}", line + 2, column_name(axes[d]))))?;
        }
        let v: f64 = rec[order.len()]
            .trim()
            .parse()
            .map_err(|e| io_err(path, format!("row {}: bad value: {e}", line + 2)))?;
        let o = t.offset(&idx);
        if seen[o] {
            return Err(io_err(path, format!("row {}: duplicate cell {idx:?}", line + 2)));
        }
        seen[o] = true;
        t.values_mut()[o] = v;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(io_err(path, format!("cell {missing} (flat index) missing")));
    }
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioManifest {
    schema: u32,
    scenario_id: String,
    sets: SetsSpec,
    alpha: f64,
    gamma: f64,
    peat_target: f64,
    seed: Option<u64>,
    files: BTreeMap<Param, String>,
}

pub fn param_file(p: Param) -> String {
    format!("{}.csv", p.name())
}

/// Writes one CSV per parameter plus the JSON manifest into `dir`.
pub fn write_scenario(dir: &Path, data: &ScenarioData) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = BTreeMap::new();
    for (&p, t) in &data.params {
        let name = param_file(p);
        write_tensor(&dir.join(&name), t, &data.sets)?;
        files.insert(p, name);
    }
    let manifest = ScenarioManifest {
        schema: SCHEMA_VERSION,
        scenario_id: data.scenario_id.clone(),
        sets: data.sets.clone(),
        alpha: data.alpha,
        gamma: data.gamma,
        peat_target: data.peat_target,
        seed: data.seed,
        files,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

pub fn read_scenario(dir: &Path) -> Result<ScenarioData, ModelError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: ScenarioManifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    if m.schema != SCHEMA_VERSION {
        return Err(io_err(&path, format!("unsupported schema {}", m.schema)));
    }
    let mut params = BTreeMap::new();
    for (&p, file) in &m.files {
        params.insert(p, read_tensor(&dir.join(file), p.axes(), &m.sets)?);
    }
    let data = ScenarioData {
        scenario_id: m.scenario_id,
        sets: m.sets,
        alpha: m.alpha,
        gamma: m.gamma,
        peat_target: m.peat_target,
        seed: m.seed,
        params,
    };
    data.check()?;
    Ok(data)
}

/// Output tensor files written per scenario.
pub const OUTPUT_FILES: [&str; 7] =
    ["capFMs", "capAgri", "ghgAbateFMs", "ghgAbateAgri", "costTechFMs", "costTechAgri", "purCO2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub scenario_id: String,
    pub objective: f64,
    pub total_cost: f64,
    pub co2_gap_rewt: f64,
    pub pur_co2_total: f64,
    pub abatement_fm_total: f64,
    pub abatement_agri_total: f64,
    pub max_violation: f64,
}

/// Writes the solution tensors, derived abatement and cost tensors, and a
/// JSON summary into `dir`.
pub fn write_solution(dir: &Path, data: &ScenarioData, sol: &Solution) -> Result<SolutionSummary, ModelError> {
    use super::{abatement, tech_cost, total_cost, validate, Sector};
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let sets = &data.sets;
    let ab = abatement(data, sol)?;
    let pur = Tensor::from_values(&[Axis::Year], &[sol.pur_co2.len()], sol.pur_co2.clone());
    let tensors = [
        &sol.cap_fms,
        &sol.cap_agri,
        &ab.fm.cells,
        &ab.agri.cells,
        &tech_cost(data, sol, Sector::Fm)?,
        &tech_cost(data, sol, Sector::Agri)?,
        &pur,
    ];
    for (name, t) in OUTPUT_FILES.iter().zip(tensors) {
        write_tensor(&dir.join(format!("{name}.csv")), t, sets)?;
    }
    let summary = SolutionSummary {
        scenario_id: data.scenario_id.clone(),
        objective: sol.objective,
        total_cost: total_cost(data, sol)?,
        co2_gap_rewt: sol.co2_gap_rewt,
        pur_co2_total: sol.pur_co2.iter().sum(),
        abatement_fm_total: ab.fm.cumulative,
        abatement_agri_total: ab.agri.cumulative,
        max_violation: validate(data, sol, 1e-6)?.max_violation,
    };
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(summary)
}

/// Reads the cap tensors and purchases written by [`write_solution`].
pub fn read_solution(dir: &Path, sets: &SetsSpec) -> Result<Solution, ModelError> {
    let cap_fms = read_tensor(&dir.join("capFMs.csv"), Param::GhgFms.axes(), sets)?;
    let cap_agri = read_tensor(&dir.join("capAgri.csv"), Param::GhgAgri.axes(), sets)?;
    let pur = read_tensor(&dir.join("purCO2.csv"), &[Axis::Year], sets)?;
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let summary: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let num = |k: &str| summary.get(k).and_then(|v| v.as_f64()).ok_or_else(|| io_err(&path, format!("missing {k}")));
    Ok(Solution {
        cap_fms,
        cap_agri,
        pur_co2: pur.values().to_vec(),
        co2_gap_rewt: num("co2_gap_rewt")?,
        objective: num("objective")?,
    })
}
