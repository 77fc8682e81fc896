//! The 26-member FM and Agri scenario banks: multiplicative perturbations
//! of a baseline, their persistence, and batch solving.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lp::SolverOptions;
use crate::model::io::{self, SolutionSummary};
use crate::model::{solve_scenario, ModelError, Param, ScenarioData, Sector, SetsSpec, Solution};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const BASELINE_DIR: &str = "baseline";

/// Factors appearing in the two bank tables.
pub const TABLE_FACTORS: [f64; 16] =
    [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0];

#[derive(Debug, Error)]
pub enum BankError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown parameter {key:?} in recipe {id}")]
    UnknownParam { id: String, key: String },
    #[error("recipe {id}: factor {factor} for {param} is not a positive finite number")]
    BadFactor { id: String, param: Param, factor: f64 },
    #[error("scenario {id} failed: {source}")]
    Scenario { id: String, source: ModelError },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BankError {
    BankError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecipe {
    pub id: String,
    pub bank: Sector,
    /// Absent parameters keep factor 1.
    pub multipliers: BTreeMap<Param, f64>,
}

impl ScenarioRecipe {
    /// Builds a recipe from parameter names, rejecting unknown names.
    pub fn from_names(id: &str, bank: Sector, entries: &[(&str, f64)]) -> Result<Self, BankError> {
        let mut multipliers = BTreeMap::new();
        for &(key, f) in entries {
            let p: Param =
                key.parse().map_err(|_| BankError::UnknownParam { id: id.to_string(), key: key.to_string() })?;
            multipliers.insert(p, f);
        }
        Ok(ScenarioRecipe { id: id.to_string(), bank, multipliers })
    }

    pub fn factor(&self, p: Param) -> f64 {
        self.multipliers.get(&p).copied().unwrap_or(1.0)
    }

    /// Parameters actually changed (factor ≠ 1).
    pub fn scaled_params(&self) -> Vec<Param> {
        self.multipliers.iter().filter(|(_, &f)| f != 1.0).map(|(&p, _)| p).collect()
    }
}

const FM_COLUMNS: [&[Param]; 11] = [
    &[Param::Co2Price],
    &[Param::FmsGrowth],
    &[Param::BeechArea0],
    &[Param::GrassArea0],
    &[Param::GhgTarget],
    &[Param::Cap0Fms],
    &[Param::CostMargFms],
    &[Param::CostInvFms],
    &[Param::CostInvLevelFms],
    &[Param::GhgFms],
    &[Param::CostInvAgri, Param::CostMargAgri, Param::CostInvLevelAgri, Param::AgriArea0],
];

/// Percent changes per row; `None` is an unchanged ("--") cell.
const FM_TABLE: [[Option<i32>; 11]; 26] = {
    const N: Option<i32> = None;
    const fn p(v: i32) -> Option<i32> {
        Some(v)
    }
    [
        [p(-20), p(-20), p(-20), N, N, N, N, N, N, N, N],
        [p(-20), p(0), p(-20), N, N, N, N, N, N, N, N],
        [p(-20), p(0), p(0), N, N, N, N, N, N, N, N],
        [p(20), p(0), p(20), N, N, N, N, N, N, N, N],
        [p(20), p(20), p(-20), N, N, N, N, N, N, N, N],
        [p(20), p(20), p(20), N, N, N, N, N, N, N, N],
        [N, p(-20), N, N, N, N, N, N, p(-20), N, N],
        [N, p(-20), N, N, p(-20), N, N, N, p(-20), p(-20), N],
        [N, p(20), N, N, N, N, N, N, p(20), N, N],
        [N, p(20), N, N, p(20), N, N, N, p(20), p(20), N],
        [N, p(-20), p(-20), p(-20), p(-20), p(-20), N, N, N, N, N],
        [N, p(20), p(20), p(20), p(20), p(20), N, N, N, N, N],
        [N, N, N, N, N, N, N, N, N, N, p(-20)],
        [N, N, N, N, N, N, N, N, N, N, p(20)],
        [N, N, N, N, N, N, N, p(-20), p(-20), N, N],
        [N, N, N, N, N, N, N, p(-10), p(10), N, N],
        [N, N, N, N, N, N, N, p(20), p(20), N, N],
        [N, N, N, N, N, N, p(-50), p(-50), p(-50), N, N],
        [N, N, N, N, N, N, p(-50), p(-50), p(-50), p(-50), N],
        [N, N, N, N, N, p(-20), p(-20), p(-20), p(-20), N, N],
        [N, N, N, N, N, N, p(-20), p(-20), p(-20), p(-20), N],
        [N, N, N, N, N, p(20), p(20), p(20), p(20), N, N],
        [N, N, N, N, N, N, p(20), p(20), p(20), p(20), N],
        [N, N, N, N, N, N, p(50), p(50), p(50), N, N],
        [N, N, N, N, N, N, p(50), p(50), p(50), p(50), N],
        [N, p(30), p(30), p(30), p(30), N, N, N, N, N, N],
    ]
};

const AGRI_COLUMNS: [Param; 10] = [
    Param::Co2Price,
    Param::FmsGrowth,
    Param::BeechArea0,
    Param::CostMargAgri,
    Param::CostInvAgri,
    Param::CostInvLevelAgri,
    Param::GhgAgri,
    Param::AgriGrowth,
    Param::AgriArea0,
    Param::PeatExtract,
];

const AGRI_TABLE: [[Option<i32>; 10]; 26] = {
    const N: Option<i32> = None;
    const fn p(v: i32) -> Option<i32> {
        Some(v)
    }
    [
        [N, N, N, N, N, N, N, p(90), p(90), p(90)],
        [N, N, N, N, N, N, N, p(-60), p(-60), p(-60)],
        [p(-20), p(-20), p(-20), N, N, N, N, N, N, N],
        [p(-20), p(0), p(-20), N, N, N, N, N, N, N],
        [p(-20), p(0), p(0), N, N, N, N, N, N, N],
        [p(20), p(0), p(20), N, N, N, N, N, N, N],
        [p(20), p(20), p(-20), N, N, N, N, N, N, N],
        [p(20), p(20), p(20), N, N, N, N, N, N, N],
        [N, N, N, N, N, N, N, N, N, N],
        [N, N, N, N, p(-50), p(-50), p(-50), p(-50), p(-50), N],
        [N, N, N, N, p(-20), p(-20), N, p(-20), N, N],
        [N, N, N, N, p(-20), p(-20), p(-20), N, N, N],
        [N, N, N, N, p(20), p(20), N, p(20), N, N],
        [N, N, N, N, p(20), p(20), p(20), N, N, N],
        [N, N, N, N, p(-30), p(-30), N, p(-30), N, N],
        [N, N, N, N, p(70), p(70), N, p(70), N, N],
        [N, N, N, p(-40), N, N, N, p(-40), N, N],
        [N, N, N, p(50), N, N, p(50), p(50), p(50), p(50)],
        [N, N, N, p(60), N, N, N, p(60), N, N],
        [N, N, N, p(100), p(100), p(100), N, N, N, N],
        [N, N, N, N, N, N, p(-50), N, N, p(-50)],
        [N, N, N, N, N, N, p(-20), p(-20), p(-20), p(-20)],
        [N, N, N, N, N, N, p(20), p(20), p(20), p(20)],
        [N, N, N, N, N, N, p(50), p(50), p(50), p(50)],
        [N, N, N, N, N, N, p(80), p(80), p(80), p(80)],
        [N, N, N, N, N, N, p(80), N, N, p(80)],
    ]
};

fn percent_to_factor(pct: i32) -> f64 {
    // Exact decimal factors (1.2, not 1.0 + 0.2).
    format!("{}", 100 + pct).parse::<f64>().expect("integer") / 100.0
}

/// The 26 recipes of the FM or Agri bank table. A "0%" cell is kept as an
/// explicit factor 1.
pub fn builtin_recipes(bank: Sector) -> Vec<ScenarioRecipe> {
    let rows: Vec<Vec<(Vec<Param>, Option<i32>)>> = match bank {
        Sector::Fm => FM_TABLE
            .iter()
            .map(|row| FM_COLUMNS.iter().zip(row).map(|(ps, &v)| (ps.to_vec(), v)).collect())
            .collect(),
        Sector::Agri => AGRI_TABLE
            .iter()
            .map(|row| AGRI_COLUMNS.iter().zip(row).map(|(&p, &v)| (vec![p], v)).collect())
            .collect(),
    };
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut multipliers = BTreeMap::new();
            for (params, cell) in row {
                if let Some(pct) = cell {
                    for p in params {
                        multipliers.insert(p, percent_to_factor(pct));
                    }
                }
            }
            ScenarioRecipe { id: format!("S{:02}", i + 1), bank, multipliers }
        })
        .collect()
}

/// Applies a recipe to a copy of the baseline.
pub fn materialize(baseline: &ScenarioData, recipe: &ScenarioRecipe) -> Result<ScenarioData, BankError> {
    let mut out = baseline.clone();
    for (&p, &f) in &recipe.multipliers {
        if !(f.is_finite() && f > 0.0) {
            return Err(BankError::BadFactor { id: recipe.id.clone(), param: p, factor: f });
        }
        let t = out
            .params
            .get_mut(&p)
            .ok_or_else(|| BankError::UnknownParam { id: recipe.id.clone(), key: p.name().to_string() })?;
        if f != 1.0 {
            t.scale(f);
        }
    }
    out.scenario_id = recipe.id.clone();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScenarioBank {
    pub kind: Sector,
    pub baseline: ScenarioData,
    pub recipes: Vec<ScenarioRecipe>,
    pub materialized: BTreeMap<String, ScenarioData>,
}

impl ScenarioBank {
    pub fn new(kind: Sector, baseline: ScenarioData, recipes: Vec<ScenarioRecipe>) -> Result<Self, BankError> {
        let mut materialized = BTreeMap::new();
        for r in &recipes {
            materialized.insert(r.id.clone(), materialize(&baseline, r)?);
        }
        Ok(ScenarioBank { kind, baseline, recipes, materialized })
    }

    pub fn builtin(kind: Sector, sets: &SetsSpec, seed: u64) -> Result<Self, BankError> {
        ScenarioBank::new(kind, crate::model::synthesize_baseline(sets, seed), builtin_recipes(kind))
    }

    pub fn ids(&self) -> Vec<String> {
        self.recipes.iter().map(|r| r.id.clone()).collect()
    }

    pub fn recipe(&self, id: &str) -> Option<&ScenarioRecipe> {
        self.recipes.iter().find(|r| r.id == id)
    }

    pub fn scenario(&self, id: &str) -> Option<&ScenarioData> {
        self.materialized.get(id)
    }
}

/// Solves every scenario of the bank, in parallel on up to `workers`
/// threads. Any failed scenario aborts the run.
pub fn run_bank(bank: &ScenarioBank, workers: usize) -> Result<BTreeMap<String, Solution>, BankError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BankError::Io { path: "<thread pool>".into(), message: e.to_string() })?;
    let opts = SolverOptions::default();
    let results: Vec<(String, Result<Solution, ModelError>)> = pool.install(|| {
        bank.recipes
            .par_iter()
            .map(|r| {
                let data = &bank.materialized[&r.id];
                (r.id.clone(), solve_scenario(data, &opts).map(|(_, sol)| sol))
            })
            .collect()
    });
    let mut out = BTreeMap::new();
    for (id, res) in results {
        match res {
            Ok(sol) => {
                out.insert(id, sol);
            }
            Err(source) => return Err(BankError::Scenario { id, source }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub schema: u32,
    pub bank: Sector,
    pub seed: Option<u64>,
    pub sets: SetsSpec,
    pub recipes: Vec<ScenarioRecipe>,
    /// sha256 of every file under the bank directory, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checksum_dir(root: &Path, rel: &Path, out: &mut BTreeMap<String, String>) -> Result<(), BankError> {
    let dir = root.join(rel);
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(&dir, e))?;
    entries.sort();
    for p in entries {
        let name = p.file_name().expect("entry name").to_owned();
        let rel_p = rel.join(&name);
        if p.is_dir() {
            checksum_dir(root, &rel_p, out)?;
        } else if rel_p != Path::new("manifest.json") {
            let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
            let key = rel_p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Checksums of every file below `root` except the manifest itself.
pub fn checksum_tree(root: &Path) -> Result<BTreeMap<String, String>, BankError> {
    let mut out = BTreeMap::new();
    checksum_dir(root, Path::new(""), &mut out)?;
    Ok(out)
}

fn write_manifest(root: &Path, bank: &ScenarioBank) -> Result<BankManifest, BankError> {
    let manifest = BankManifest {
        schema: MANIFEST_SCHEMA,
        bank: bank.kind,
        seed: bank.baseline.seed,
        sets: bank.baseline.sets.clone(),
        recipes: bank.recipes.clone(),
        checksums: checksum_tree(root)?,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Writes `root/baseline/inputs`, `root/<id>/inputs` for every scenario, and
/// `root/manifest.json`.
pub fn write_bank(root: &Path, bank: &ScenarioBank) -> Result<BankManifest, BankError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    io::write_scenario(&root.join(BASELINE_DIR).join("inputs"), &bank.baseline)?;
    for r in &bank.recipes {
        io::write_scenario(&root.join(&r.id).join("inputs"), &bank.materialized[&r.id])?;
    }
    write_manifest(root, bank)
}

pub fn read_manifest(root: &Path) -> Result<BankManifest, BankError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: BankManifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(io_err(&path, format!("unsupported schema {}", m.schema)));
    }
    Ok(m)
}

/// Loads a bank written by [`write_bank`], verifying input checksums.
pub fn read_bank(root: &Path) -> Result<ScenarioBank, BankError> {
    let m = read_manifest(root)?;
    let actual = checksum_tree(root)?;
    for (k, v) in &m.checksums {
        if k.contains("/inputs/") && actual.get(k) != Some(v) {
            return Err(BankError::Checksum(k.clone()));
        }
    }
    let baseline = io::read_scenario(&root.join(BASELINE_DIR).join("inputs"))?;
    let mut materialized = BTreeMap::new();
    for r in &m.recipes {
        materialized.insert(r.id.clone(), io::read_scenario(&root.join(&r.id).join("inputs"))?);
    }
    Ok(ScenarioBank { kind: m.bank, baseline, recipes: m.recipes, materialized })
}

/// Writes `root/<id>/outputs` for every solved scenario and refreshes the
/// manifest checksums.
pub fn write_outputs(
    root: &Path,
    bank: &ScenarioBank,
    solutions: &BTreeMap<String, Solution>,
) -> Result<BTreeMap<String, SolutionSummary>, BankError> {
    let mut summaries = BTreeMap::new();
    for r in &bank.recipes {
        let sol = solutions
            .get(&r.id)
            .ok_or_else(|| BankError::Io { path: r.id.clone(), message: "no solution for scenario".into() })?;
        let s = io::write_solution(&root.join(&r.id).join("outputs"), &bank.materialized[&r.id], sol)?;
        summaries.insert(r.id.clone(), s);
    }
    write_manifest(root, bank)?;
    Ok(summaries)
}

pub fn read_outputs(root: &Path, bank: &ScenarioBank) -> Result<BTreeMap<String, Solution>, BankError> {
    let mut out = BTreeMap::new();
    for r in &bank.recipes {
        out.insert(r.id.clone(), io::read_solution(&root.join(&r.id).join("outputs"), &bank.baseline.sets)?);
    }
    Ok(out)
}
