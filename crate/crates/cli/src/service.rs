//! HTTP API over one run directory per bank. Handlers read artifacts from
//! disk on every request and never write, so replaying a request returns
//! the same body as long as the run directories are unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::attribution::{self, ShapConfig};
use forge_core::bank::sha256_hex;
use forge_core::model::Sector;
use forge_core::narrator::{LlmClient, NarratorConfig, NarratorError, StubClient};
use forge_core::pipeline::{self, PipelineError, Run, Space};
use forge_core::surrogate::{self, Rows};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_ROWS: usize = 10_000;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub runs: BTreeMap<Sector, PathBuf>,
    pub narrator: NarratorConfig,
    /// Allowed origins; empty disables CORS headers, `*` allows any.
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Per bank, the id of the run directory that answered.
    pub run_ids: BTreeMap<String, String>,
    /// sha256 of the canonical request and of every artifact read.
    pub input_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub fields: Vec<FieldError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEnvelope {
    pub status: Status,
    pub data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    pub provenance: Provenance,
    pub schema_version: u32,
}

#[derive(Debug)]
struct Failure {
    status: StatusCode,
    error: ApiError,
}

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure { status, error: ApiError { code: code.into(), message: message.into(), fields: vec![] } }
    }

    fn fields(code: &str, fields: Vec<FieldError>) -> Self {
        let message = fields.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; ");
        Failure { status: StatusCode::BAD_REQUEST, error: ApiError { code: code.into(), message, fields } }
    }

    fn field(code: &str, field: &str, message: impl Into<String>) -> Self {
        Failure::fields(code, vec![FieldError { field: field.into(), message: message.into() }])
    }

    fn with_status(mut self, status: StatusCode) -> Self {
        self.status = status;
        self
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            // The message carries a server path; name only the step.
            PipelineError::Missing { step, .. } => {
                Failure::new(StatusCode::CONFLICT, "not_ready", format!("run `forge {step}` on this bank first"))
            }
            PipelineError::Narrator(n) => Failure::from(n),
            _ => Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<NarratorError> for Failure {
    fn from(e: NarratorError) -> Self {
        let msg = e.to_string();
        let unprocessable = |code: &str| Failure::field(code, "question", msg.clone()).with_status(StatusCode::UNPROCESSABLE_ENTITY);
        match e {
            NarratorError::Empty => unprocessable("empty_question"),
            NarratorError::UnrecognizedParameter { .. } => unprocessable("unrecognized_parameter"),
            NarratorError::InvalidChange { .. } => unprocessable("invalid_change"),
            NarratorError::NoEvidence { .. } => unprocessable("no_evidence"),
            NarratorError::Transport { .. } => Failure::new(StatusCode::BAD_GATEWAY, "llm_unavailable", msg),
            NarratorError::Config(_) => Failure::new(StatusCode::SERVICE_UNAVAILABLE, "llm_not_configured", msg),
            _ => Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

fn envelope(status: StatusCode, data: Option<Value>, error: Option<ApiError>, provenance: Provenance) -> Response {
    let body = ApiEnvelope {
        status: if error.is_some() { Status::Error } else { Status::Ok },
        data,
        error,
        provenance,
        schema_version: SCHEMA_VERSION,
    };
    (status, Json(body)).into_response()
}

struct Ctx {
    cfg: Arc<ServiceConfig>,
    prov: Provenance,
}

impl Ctx {
    fn run(&mut self, bank: Sector) -> Result<Run, Failure> {
        let root = self
            .cfg
            .runs
            .get(&bank)
            .ok_or_else(|| Failure::field("bank_not_served", "bank", format!("no run directory is configured for bank {bank}")))?;
        let run = Run::new(root);
        let id = run.run_id().map_err(|_| Failure::new(StatusCode::CONFLICT, "not_ready", format!("bank {bank} has no run.json")))?;
        self.prov.run_ids.insert(bank.to_string(), id);
        Ok(run)
    }

    /// Records the manifest checksum of each artifact the handler reads.
    fn inputs(&mut self, run: &Run, files: &[&str]) -> Result<(), Failure> {
        let m = run.manifest()?;
        for f in files {
            let recorded = m.steps.values().find_map(|s| s.outputs.get(*f)).cloned();
            let hash = recorded.or_else(|| std::fs::read(run.root.join(f)).ok().map(|b| sha256_hex(&b)));
            if let Some(h) = hash {
                self.prov.input_hashes.insert((*f).to_string(), h);
            }
        }
        Ok(())
    }
}

async fn handle<F>(cfg: Arc<ServiceConfig>, request: Value, f: F) -> Response
where
    F: FnOnce(&mut Ctx) -> Result<Value, Failure> + Send + 'static,
{
    let hash = sha256_hex(&serde_json::to_vec(&request).expect("serializable"));
    let joined = tokio::task::spawn_blocking(move || {
        let mut ctx = Ctx { cfg, prov: Provenance::default() };
        ctx.prov.input_hashes.insert("request".into(), hash);
        let r = f(&mut ctx);
        (r, ctx.prov)
    })
    .await;
    match joined {
        Ok((Ok(data), prov)) => envelope(StatusCode::OK, Some(data), None, prov),
        Ok((Err(fail), prov)) => envelope(fail.status, None, Some(fail.error), prov),
        Err(e) => envelope(
            StatusCode::INTERNAL_SERVER_ERROR,
            None,
            Some(ApiError { code: "internal".into(), message: e.to_string(), fields: vec![] }),
            Provenance::default(),
        ),
    }
}

fn reject(f: Failure) -> Response {
    envelope(f.status, None, Some(f.error), Provenance::default())
}

type QueryMap = BTreeMap<String, String>;

/// Checks query keys against `allowed` and returns the map.
fn query(q: Result<Query<QueryMap>, axum::extract::rejection::QueryRejection>, allowed: &[&str]) -> Result<QueryMap, Failure> {
    let Query(map) = q.map_err(|e| Failure::field("invalid_query", "query", e.body_text()))?;
    let unknown: Vec<FieldError> = map
        .keys()
        .filter(|k| !allowed.contains(&k.as_str()))
        .map(|k| FieldError { field: k.clone(), message: format!("unknown parameter; expected one of {}", allowed.join(", ")) })
        .collect();
    if unknown.is_empty() {
        Ok(map)
    } else {
        Err(Failure::fields("invalid_query", unknown))
    }
}

fn parse_bank(v: Option<&str>) -> Result<Sector, Failure> {
    match v {
        None => Ok(Sector::Fm),
        Some(s) => s.parse().map_err(|_| Failure::field("invalid_parameter", "bank", format!("{s:?} is not fm or agri"))),
    }
}

fn body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(bytes).map_err(|e| Failure::field("invalid_body", "body", e.to_string()))
}

pub fn router(cfg: ServiceConfig) -> Router {
    let cors = cors_layer(&cfg.cors_origins);
    let app = Router::new()
        .route("/scenarios", get(scenarios))
        .route("/scenarios/{id}/outputs", get(outputs))
        .route("/clusters", get(clusters))
        .route("/predict", post(predict))
        .route("/shap", post(shap))
        .route("/ask", post(ask))
        .fallback(|| async { reject(Failure::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")) })
        .with_state(Arc::new(cfg));
    match cors {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let base = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return Some(base.allow_origin(Any));
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    Some(base.allow_origin(AllowOrigin::list(list)))
}

type AppState = State<Arc<ServiceConfig>>;
type MaybeQuery = Result<Query<QueryMap>, axum::extract::rejection::QueryRejection>;

async fn scenarios(State(cfg): AppState, q: MaybeQuery) -> Response {
    let map = match query(q, &["bank"]) {
        Ok(m) => m,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "scenarios", "query": map });
    handle(cfg, request, move |ctx| {
        let bank = parse_bank(map.get("bank").map(String::as_str))?;
        let run = ctx.run(bank)?;
        ctx.inputs(&run, &["bank/manifest.json"])?;
        let m = forge_core::bank::read_manifest(&run.bank_dir()).map_err(PipelineError::from)?;
        Ok(json!({ "bank": m.bank, "seed": m.seed, "sets": m.sets, "scenarios": m.recipes }))
    })
    .await
}

async fn outputs(State(cfg): AppState, Path(id): Path<String>, q: MaybeQuery) -> Response {
    let map = match query(q, &["bank"]) {
        Ok(m) => m,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "outputs", "id": id, "query": map });
    handle(cfg, request, move |ctx| {
        let bank = parse_bank(map.get("bank").map(String::as_str))?;
        let run = ctx.run(bank)?;
        let summary = run
            .load_summary(&id)?
            .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, "unknown_scenario", format!("no scenario {id} in bank {bank}")))?;
        let summary_file = format!("bank/{id}/outputs/summary.json");
        ctx.inputs(&run, &[&summary_file])?;
        let files: BTreeSet<String> = forge_core::model::io::OUTPUT_FILES.iter().map(|f| format!("{f}.csv")).collect();
        Ok(json!({ "id": id, "bank": bank, "summary": summary, "files": files }))
    })
    .await
}

async fn clusters(State(cfg): AppState, q: MaybeQuery) -> Response {
    let map = match query(q, &["space", "bank", "t"]) {
        Ok(m) => m,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "clusters", "query": map });
    handle(cfg, request, move |ctx| {
        let mut errs = Vec::new();
        let space = match map.get("space").map(|s| s.parse::<Space>()) {
            None => {
                errs.push(FieldError { field: "space".into(), message: "required (input or output)".into() });
                None
            }
            Some(Err(e)) => {
                errs.push(FieldError { field: "space".into(), message: e });
                None
            }
            Some(Ok(s)) => Some(s),
        };
        let bank = match map.get("bank") {
            None => {
                errs.push(FieldError { field: "bank".into(), message: "required (fm or agri)".into() });
                None
            }
            Some(b) => match b.parse::<Sector>() {
                Ok(b) => Some(b),
                Err(_) => {
                    errs.push(FieldError { field: "bank".into(), message: format!("{b:?} is not fm or agri") });
                    None
                }
            },
        };
        let t = match map.get("t").map(|s| s.parse::<f64>()) {
            None => None,
            Some(Ok(t)) if t.is_finite() && t >= 0.0 => Some(t),
            Some(_) => {
                errs.push(FieldError { field: "t".into(), message: "must be a finite number >= 0".into() });
                None
            }
        };
        let (Some(space), Some(bank), true) = (space, bank, errs.is_empty()) else {
            return Err(Failure::fields("invalid_parameter", errs));
        };
        let run = ctx.run(bank)?;
        let stem = space.as_str();
        ctx.inputs(&run, &[&format!("clusters/{stem}_clusters.json")])?;
        let stored = run.load_clusters(space)?;
        let rep = pipeline::relabel(&stored, t.unwrap_or(stored.threshold));
        let n = rep.correlation.n();
        let c: Vec<Vec<Option<f64>>> = (0..n).map(|i| (0..n).map(|j| rep.correlation.get(i, j)).collect()).collect();
        Ok(json!({
            "bank": bank,
            "space": space,
            "variable": match space { Space::Input => "features".to_string(), Space::Output => pipeline::output_variable(bank).to_string() },
            "ids": rep.correlation.ids,
            "threshold": rep.threshold,
            "C": c,
            "Z": rep.linkage.merges,
            "labels": rep.labels,
            "extremal": rep.extremal,
        }))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowsRequest {
    #[serde(default)]
    bank: Option<String>,
    rows: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    top_k: Option<usize>,
}

/// Orders each row by the ensemble's feature names, collecting one field
/// error per missing or unknown name.
fn design_rows(rows: &[BTreeMap<String, f64>], names: &[String]) -> Result<Vec<f64>, Failure> {
    if rows.is_empty() {
        return Err(Failure::field("invalid_body", "rows", "at least one row is required"));
    }
    if rows.len() > MAX_ROWS {
        return Err(Failure::field("invalid_body", "rows", format!("at most {MAX_ROWS} rows per request")));
    }
    let mut errs = Vec::new();
    let mut out = Vec::with_capacity(rows.len() * names.len());
    for (i, row) in rows.iter().enumerate() {
        for n in names {
            match row.get(n) {
                Some(v) => out.push(*v),
                None => errs.push(FieldError { field: format!("rows[{i}].{n}"), message: "missing feature".into() }),
            }
        }
        for k in row.keys().filter(|k| !names.contains(k)) {
            errs.push(FieldError { field: format!("rows[{i}].{k}"), message: "unknown feature".into() });
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(Failure::fields("invalid_rows", errs))
    }
}

async fn predict(State(cfg): AppState, bytes: Bytes) -> Response {
    let req: RowsRequest = match body(&bytes) {
        Ok(r) => r,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "predict", "body": req });
    handle(cfg, request, move |ctx| {
        let bank = parse_bank(req.bank.as_deref())?;
        let run = ctx.run(bank)?;
        ctx.inputs(&run, &["model/ensemble.json"])?;
        let e = run.load_ensemble()?;
        let x = design_rows(&req.rows, &e.feature_names)?;
        let y = surrogate::predict(&e, Rows::new(&x, e.n_features()).map_err(PipelineError::from)?).map_err(PipelineError::from)?;
        Ok(json!({ "target": e.target_name, "predictions": y, "target_range": e.target_scaler }))
    })
    .await
}

async fn shap(State(cfg): AppState, bytes: Bytes) -> Response {
    let req: RowsRequest = match body(&bytes) {
        Ok(r) => r,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "shap", "body": req });
    handle(cfg, request, move |ctx| {
        let bank = parse_bank(req.bank.as_deref())?;
        let run = ctx.run(bank)?;
        ctx.inputs(&run, &["model/ensemble.json", "model/split.json", "shap/importance.json"])?;
        let e = run.load_ensemble()?;
        let x = design_rows(&req.rows, &e.feature_names)?;
        let split = run.load_split()?;
        let ds = pipeline::dataset(&run)?;
        let bg = ds.design.select(&split.train);
        let seed = run.manifest()?.seed;
        // One draw covering every requested row, so row i answers row i.
        let cfg = ShapConfig { subsamples: 1, subsample_size: req.rows.len(), seed };
        let d = e.n_features();
        let a = attribution::ensemble_shap(
            &e,
            Rows::new(&x, d).map_err(PipelineError::from)?,
            Rows::new(&bg.values, bg.n_cols()).map_err(PipelineError::from)?,
            cfg,
        )
        .map_err(PipelineError::from)?
        .to_original_units(e.target_scaler);
        let local = attribution::global_importance(&a).map_err(PipelineError::from)?;
        let k = req.top_k.unwrap_or(3).min(d);
        let drivers = attribution::shap_prompt_payload(&local, &a, k).map_err(PipelineError::from)?;
        let run_ranking = run.load_importance().ok().map(|g| g.ranking);
        let phi: Vec<&[f64]> = (0..a.n_rows()).map(|i| a.row(i)).collect();
        Ok(json!({
            "target": e.target_name,
            "feature_names": a.feature_names,
            "phi": phi,
            "prediction": a.prediction,
            "importance": local,
            "drivers": drivers,
            "run_ranking": run_ranking,
        }))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AskRequest {
    question: String,
    #[serde(default)]
    bank: Option<String>,
    #[serde(default)]
    stub: Option<bool>,
}

async fn ask(State(cfg): AppState, bytes: Bytes) -> Response {
    let req: AskRequest = match body(&bytes) {
        Ok(r) => r,
        Err(f) => return reject(f),
    };
    let request = json!({ "endpoint": "ask", "body": req });
    handle(cfg, request, move |ctx| {
        let bank = parse_bank(req.bank.as_deref())?;
        let run = ctx.run(bank)?;
        ctx.inputs(&run, &["bank/manifest.json", "clusters/output_clusters.json", "shap/extras.json"])?;
        let client: Box<dyn LlmClient> = if req.stub == Some(true) { Box::new(StubClient) } else { ctx.cfg.narrator.client.build()? };
        let res = pipeline::answer(&run, &req.question, &ctx.cfg.narrator, client.as_ref())?;
        Ok(serde_json::to_value(res).expect("serializable"))
    })
    .await
}
