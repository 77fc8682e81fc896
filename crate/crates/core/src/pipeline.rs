//! Run directories: each step reads the previous steps' artifacts from disk
//! and records what it wrote, with checksums, in `run.json`.
//!
//! ```text
//! <run>/run.json
//! <run>/bank/        manifest.json, baseline/inputs, Sxx/inputs, Sxx/outputs
//! <run>/features/    Sxx.csv/.json (raw), Sxx_scaled.csv/.json, bounds.json
//! <run>/clusters/    input_* and output_* correlation, linkage, labels
//! <run>/model/       ensemble.json, metrics.json, split.json, predictions.csv
//! <run>/shap/        phi.csv, importance.csv, drivers.json, extras.json
//! <run>/ask/         <question hash>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{self, AttributionError, AttributionMatrix, Driver, ShapConfig};
use crate::bank::{self, sha256_hex, BankError, ScenarioBank};
use crate::features::{self, FeatureError, LearningDataset};
use crate::model::{self, ScenarioData, Sector, SetsSpec, Solution, Tensor};
use crate::narrator::{self, AskContext, AskResult, LlmClient, NarratorConfig, NarratorError, ParameterMap, PromptExtras};
use crate::similarity::{self, ClusterReport, ScenarioGrid, SimilarityError};
use crate::surrogate::{self, EnsembleConfig, ForestEnsemble, RegressionMetrics, Rows, SurrogateError};

pub const RUN_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Narrator(#[from] NarratorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{missing} not found; run `forge {step}` first")]
    Missing { step: &'static str, missing: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Input,
    Output,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Input => "input",
            Space::Output => "output",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(Space::Input),
            "output" => Ok(Space::Output),
            _ => Err(format!("unknown space {s:?} (expected input or output)")),
        }
    }
}

/// The output tensor whose correlation structure defines a bank's output
/// space: GHG abatement for FM, technology cost for Agri.
pub fn output_variable(bank: Sector) -> &'static str {
    match bank {
        Sector::Fm => "ghgAbateFMs",
        Sector::Agri => "costTechAgri",
    }
}

pub fn output_tensor(data: &ScenarioData, sol: &Solution, bank: Sector) -> Result<Tensor, PipelineError> {
    Ok(match bank {
        Sector::Fm => model::abatement(data, sol)?.fm.cells,
        Sector::Agri => model::tech_cost(data, sol, Sector::Agri)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step parameters as given.
    pub params: serde_json::Value,
    /// sha256 of each file the step wrote, relative to the run root.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub bank: Sector,
    pub seed: u64,
    pub steps: BTreeMap<String, StepRecord>,
}

/// Typed paths inside one run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Run { root: root.into() }
    }

    pub fn bank_dir(&self) -> PathBuf {
        self.root.join("bank")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn clusters_dir(&self) -> PathBuf {
        self.root.join("clusters")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn shap_dir(&self) -> PathBuf {
        self.root.join("shap")
    }
    pub fn ask_dir(&self) -> PathBuf {
        self.root.join("ask")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let p = self.manifest_path();
        if !p.exists() {
            return Err(PipelineError::Missing { step: "bank generate", missing: p.display().to_string() });
        }
        read_json(&p)
    }

    fn record(&self, step: &str, params: serde_json::Value, dir: &Path) -> Result<(), PipelineError> {
        let mut m = self.manifest()?;
        let rel = dir.strip_prefix(&self.root).unwrap_or(dir).to_string_lossy().replace('\\', "/");
        let outputs =
            bank::checksum_tree(dir)?.into_iter().map(|(k, v)| (format!("{rel}/{k}"), v)).collect();
        m.steps.insert(step.to_string(), StepRecord { params, outputs });
        write_json(&self.manifest_path(), &m)
    }

    fn require(&self, step: &'static str, path: &Path) -> Result<(), PipelineError> {
        if path.exists() {
            Ok(())
        } else {
            Err(PipelineError::Missing { step, missing: path.display().to_string() })
        }
    }

    pub fn load_bank(&self) -> Result<ScenarioBank, PipelineError> {
        self.require("bank generate", &self.bank_dir().join("manifest.json"))?;
        Ok(bank::read_bank(&self.bank_dir())?)
    }

    pub fn load_solutions(&self, b: &ScenarioBank) -> Result<BTreeMap<String, Solution>, PipelineError> {
        let first = b.ids().first().cloned().unwrap_or_default();
        self.require("bank run", &self.bank_dir().join(first).join("outputs"))?;
        Ok(bank::read_outputs(&self.bank_dir(), b)?)
    }

    pub fn load_clusters(&self, space: Space) -> Result<ClusterReport, PipelineError> {
        let stem = space.as_str();
        self.require("cluster", &self.clusters_dir().join(format!("{stem}_clusters.json")))?;
        Ok(ClusterReport::read(&self.clusters_dir(), stem)?)
    }

    pub fn load_ensemble(&self) -> Result<ForestEnsemble, PipelineError> {
        let p = self.model_dir().join("ensemble.json");
        self.require("train", &p)?;
        Ok(ForestEnsemble::load(&p)?)
    }

    pub fn load_metrics(&self) -> Result<TrainReport, PipelineError> {
        let p = self.model_dir().join("metrics.json");
        self.require("train", &p)?;
        read_json(&p)
    }

    pub fn load_extras(&self) -> Result<Option<PromptExtras>, PipelineError> {
        let p = self.shap_dir().join("extras.json");
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn load_split(&self) -> Result<Split, PipelineError> {
        let p = self.model_dir().join("split.json");
        self.require("train", &p)?;
        read_json(&p)
    }

    /// Solution summary of one scenario; `Ok(None)` for an unknown id.
    pub fn load_summary(&self, id: &str) -> Result<Option<model::io::SolutionSummary>, PipelineError> {
        let b = bank::read_manifest(&self.bank_dir())?;
        if !b.recipes.iter().any(|r| r.id == id) {
            return Ok(None);
        }
        let p = self.bank_dir().join(id).join("outputs").join("summary.json");
        self.require("bank run", &p)?;
        Ok(Some(read_json(&p)?))
    }

    /// First 16 hex digits of the sha256 of `run.json`.
    pub fn run_id(&self) -> Result<String, PipelineError> {
        let p = self.manifest_path();
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        Ok(sha256_hex(&bytes)[..16].to_string())
    }

    pub fn load_importance(&self) -> Result<attribution::GlobalImportance, PipelineError> {
        let p = self.shap_dir().join("importance.json");
        self.require("shap", &p)?;
        read_json(&p)
    }
}

/// `bank generate`: synthesizes the baseline and writes the 26 scenarios.
pub fn generate(run: &Run, kind: Sector, sets: &SetsSpec, seed: u64) -> Result<bank::BankManifest, PipelineError> {
    fs::create_dir_all(&run.root).map_err(|e| io_err(&run.root, e))?;
    let b = ScenarioBank::builtin(kind, sets, seed)?;
    write_json(&run.manifest_path(), &RunManifest { schema: RUN_SCHEMA, bank: kind, seed, steps: BTreeMap::new() })?;
    let m = bank::write_bank(&run.bank_dir(), &b)?;
    run.record("bank_generate", serde_json::json!({ "bank": kind, "seed": seed, "sets": sets }), &run.bank_dir())?;
    Ok(m)
}

/// `bank run`: solves every scenario and writes its outputs.
pub fn solve(run: &Run, workers: usize) -> Result<BTreeMap<String, model::io::SolutionSummary>, PipelineError> {
    let b = run.load_bank()?;
    let sols = bank::run_bank(&b, workers)?;
    let summaries = bank::write_outputs(&run.bank_dir(), &b, &sols)?;
    run.record("bank_run", serde_json::json!({}), &run.bank_dir())?;
    Ok(summaries)
}

/// `features`: raw and pooled-scaled feature matrices per scenario.
pub fn build_features(run: &Run) -> Result<Vec<(usize, usize)>, PipelineError> {
    let b = run.load_bank()?;
    let raw: Vec<(String, features::FeatureMatrix)> = b
        .ids()
        .into_iter()
        .map(|id| {
            let m = features::assemble(&b.materialized[&id], b.kind)?;
            Ok((id, m))
        })
        .collect::<Result<_, PipelineError>>()?;
    let bounds = features::fit_minmax(raw.iter().map(|(_, m)| m));
    let dir = run.features_dir();
    let mut shapes = Vec::new();
    for (id, m) in &raw {
        features::write_feature_matrix(&dir, id, m)?;
        features::write_feature_matrix(&dir, &format!("{id}_scaled"), &features::apply_minmax(m, &bounds)?)?;
        shapes.push(m.shape());
    }
    write_json(&dir.join("bounds.json"), &bounds)?;
    run.record("features", serde_json::json!({}), &dir)?;
    Ok(shapes)
}

/// Scenario grids of one space, in bank order.
pub fn grids(run: &Run, space: Space) -> Result<Vec<ScenarioGrid>, PipelineError> {
    let b = run.load_bank()?;
    match space {
        Space::Input => {
            run.require("features", &run.features_dir().join("bounds.json"))?;
            b.ids()
                .iter()
                .map(|id| Ok(ScenarioGrid::from_features(id, &features::read_feature_matrix(&run.features_dir(), id)?)))
                .collect()
        }
        Space::Output => {
            let sols = run.load_solutions(&b)?;
            output_grids(&b, &sols)
        }
    }
}

pub fn output_grids(b: &ScenarioBank, sols: &BTreeMap<String, Solution>) -> Result<Vec<ScenarioGrid>, PipelineError> {
    b.ids()
        .iter()
        .map(|id| {
            let sol = sols.get(id).ok_or_else(|| PipelineError::Missing { step: "bank run", missing: format!("{id} outputs") })?;
            Ok(ScenarioGrid::from_output(id, &output_tensor(&b.materialized[id], sol, b.kind)?))
        })
        .collect()
}

/// Bank and output-space clusters built in memory, for questions asked
/// without a run directory.
pub fn ephemeral_context(kind: Sector, sets: &SetsSpec, seed: u64, threshold: f64) -> Result<(ScenarioBank, ClusterReport), PipelineError> {
    let b = ScenarioBank::builtin(kind, sets, seed)?;
    let sols = bank::run_bank(&b, 1)?;
    let rep = similarity::cluster_report(&output_grids(&b, &sols)?, threshold)?;
    Ok((b, rep))
}

/// `cluster`: correlation, linkage and labels for both spaces.
pub fn cluster(run: &Run, threshold: f64) -> Result<BTreeMap<String, ClusterReport>, PipelineError> {
    let dir = run.clusters_dir();
    let mut out = BTreeMap::new();
    for space in [Space::Input, Space::Output] {
        let rep = similarity::cluster_report(&grids(run, space)?, threshold)?;
        rep.write(&dir, space.as_str())?;
        out.insert(space.as_str().to_string(), rep);
    }
    run.record("cluster", serde_json::json!({ "threshold": threshold }), &dir)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ensemble: EnsembleConfig,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl TrainConfig {
    pub fn seeded(seed: u64) -> Self {
        TrainConfig { ensemble: EnsembleConfig { seed, ..Default::default() }, test_fraction: 0.2, split_seed: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out metrics in original units.
    pub test: RegressionMetrics,
    pub train: RegressionMetrics,
    pub target_range: (f64, f64),
    pub rmse_pct_of_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// The learning dataset of the run's bank, recomputed from disk.
pub fn dataset(run: &Run) -> Result<LearningDataset, PipelineError> {
    let b = run.load_bank()?;
    let sols = run.load_solutions(&b)?;
    Ok(features::learning_dataset(&b.materialized, &sols, b.kind)?)
}

fn target_of(ds: &LearningDataset, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| ds.target[i]).collect()
}

/// `train`: 80/20 split, bagged-forest ensemble, held-out metrics.
pub fn train(run: &Run, cfg: TrainConfig) -> Result<TrainReport, PipelineError> {
    let ds = dataset(run)?;
    let (tr, te) = features::train_test_split(ds.design.n_rows(), cfg.test_fraction, cfg.split_seed);
    let xtr = ds.design.select(&tr);
    let xte = ds.design.select(&te);
    let (ytr, yte) = (target_of(&ds, &tr), target_of(&ds, &te));
    let e = surrogate::fit_ensemble(
        Rows::new(&xtr.values, xtr.n_cols())?,
        &ytr,
        &ds.design.columns,
        &ds.target_name,
        cfg.ensemble,
    )?;
    let p_te = surrogate::predict(&e, Rows::new(&xte.values, xte.n_cols())?)?;
    let p_tr = surrogate::predict(&e, Rows::new(&xtr.values, xtr.n_cols())?)?;
    let test = surrogate::evaluate(&yte, &p_te)?;
    let (lo, hi) = e.target_scaler;
    let report = TrainReport {
        target: ds.target_name.clone(),
        n_train: tr.len(),
        n_test: te.len(),
        test,
        train: surrogate::evaluate(&ytr, &p_tr)?,
        target_range: (lo, hi),
        rmse_pct_of_range: 100.0 * test.rmse / (hi - lo),
    };
    let dir = run.model_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    e.save(&dir.join("ensemble.json"))?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_json(&dir.join("split.json"), &Split { train: tr, test: te.clone() })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "region", "technology", "year", "actual", "predicted"]).map_err(|e| io_err(&dir, e))?;
    for (j, &i) in te.iter().enumerate() {
        let (s, r, t, y) = &ds.design.keys[i];
        w.write_record([s.clone(), r.clone(), t.clone(), y.to_string(), format!("{}", yte[j]), format!("{}", p_te[j])])
            .map_err(|e| io_err(&dir, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(&dir, e))?;
    write_text(&dir.join("predictions.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    run.record("train", serde_json::to_value(cfg).expect("serializable"), &dir)?;
    Ok(report)
}

/// Region and technology with the largest total target over the dataset.
pub fn leaders(ds: &LearningDataset) -> (String, String) {
    let mut by_region: BTreeMap<&str, f64> = BTreeMap::new();
    let mut by_tech: BTreeMap<&str, f64> = BTreeMap::new();
    for ((_, r, t, _), y) in ds.design.keys.iter().zip(&ds.target) {
        *by_region.entry(r).or_default() += y;
        *by_tech.entry(t).or_default() += y;
    }
    // Ties go to the first name in sorted order.
    let best = |m: &BTreeMap<&str, f64>| {
        m.iter().fold(None::<(&str, f64)>, |acc, (&k, &v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k.to_string())
        .unwrap_or_default()
    };
    (best(&by_region), best(&by_tech))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub rows: usize,
    pub max_local_error: f64,
    pub ranking: Vec<String>,
    pub drivers: Vec<Driver>,
}

/// `shap`: ensemble attributions on held-out rows with the training rows
/// as background, in original target units.
pub fn explain(run: &Run, cfg: ShapConfig, top_k: usize) -> Result<(AttributionMatrix, ShapSummary), PipelineError> {
    let e = run.load_ensemble()?;
    let report = run.load_metrics()?;
    let split: Split = read_json(&run.model_dir().join("split.json"))?;
    let ds = dataset(run)?;
    let xtr = ds.design.select(&split.train);
    let xte = ds.design.select(&split.test);
    let a = attribution::ensemble_shap(
        &e,
        Rows::new(&xte.values, xte.n_cols())?,
        Rows::new(&xtr.values, xtr.n_cols())?,
        cfg,
    )?;
    let scaled_error = a.max_local_error();
    let a = a.to_original_units(e.target_scaler);
    let g = attribution::global_importance(&a)?;
    let drivers = attribution::shap_prompt_payload(&g, &a, top_k.min(a.d()))?;
    let (best_region, best_tech) = leaders(&ds);
    let extras = PromptExtras { target: ds.target_name.clone(), metrics: report.test, drivers: drivers.clone(), best_region, best_tech };
    let dir = run.shap_dir();
    write_text(&dir.join("phi.csv"), &a.to_csv())?;
    write_text(&dir.join("importance.csv"), &g.to_csv())?;
    write_json(&dir.join("importance.json"), &g)?;
    write_json(&dir.join("drivers.json"), &drivers)?;
    write_json(&dir.join("extras.json"), &extras)?;
    let summary = ShapSummary { rows: a.n_rows(), max_local_error: scaled_error, ranking: g.ranking.clone(), drivers };
    write_json(&dir.join("summary.json"), &summary)?;
    run.record("shap", serde_json::json!({ "config": cfg, "top_k": top_k }), &dir)?;
    Ok((a, summary))
}

/// `ask`: answers a question against the run's bank and output-space
/// clusters, including surrogate evidence when `shap` has run.
pub fn ask(run: &Run, question: &str, cfg: &NarratorConfig, client: &dyn LlmClient) -> Result<AskResult, PipelineError> {
    let res = answer(run, question, cfg, client)?;
    let name = &sha256_hex(question.trim().as_bytes())[..16];
    let dir = run.ask_dir();
    write_json(&dir.join(format!("{name}.json")), &res)?;
    run.record("ask", serde_json::json!({ "eps": cfg.eps, "threshold": cfg.threshold }), &dir)?;
    Ok(res)
}

/// [`ask`] without writing anything.
pub fn answer(run: &Run, question: &str, cfg: &NarratorConfig, client: &dyn LlmClient) -> Result<AskResult, PipelineError> {
    let b = run.load_bank()?;
    let report = run.load_clusters(Space::Output)?;
    let report = relabel(&report, cfg.threshold);
    let extras = run.load_extras()?;
    let map = ParameterMap::builtin(b.kind).with_extensions(&cfg.patterns)?;
    let ctx = AskContext { map: &map, recipes: &b.recipes, report: &report, eps: cfg.eps, extras: extras.as_ref() };
    Ok(narrator::ask(question, &ctx, client)?)
}

/// The same report cut at another height.
pub fn relabel(report: &ClusterReport, threshold: f64) -> ClusterReport {
    if report.threshold == threshold {
        return report.clone();
    }
    let mut r = report.clone();
    r.labels = similarity::flat_clusters(&r.linkage, threshold);
    r.threshold = threshold;
    r
}

/// Checksums of every artifact under the run root, run.json included.
pub fn run_checksums(run: &Run) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut all = bank::checksum_tree(&run.root)?;
    let p = run.manifest_path();
    let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
    all.insert("run.json".into(), sha256_hex(&bytes));
    Ok(all)
}
