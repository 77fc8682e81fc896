use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use forge_cli::service::{router, ApiEnvelope, ServiceConfig, Status};
use forge_core::attribution::ShapConfig;
use forge_core::model::{Sector, SetsSpec};
use forge_core::pipeline::{self, Run, TrainConfig};
use forge_core::surrogate::EnsembleConfig;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Desk-size FM and Agri runs shared by every test in this file.
fn runs() -> &'static BTreeMap<Sector, PathBuf> {
    static RUNS: OnceLock<BTreeMap<Sector, PathBuf>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let mut out = BTreeMap::new();
        for kind in [Sector::Fm, Sector::Agri] {
            let run = Run::new(root.join(kind.as_str()));
            pipeline::generate(&run, kind, &SetsSpec::desk(), 3).unwrap();
            pipeline::solve(&run, 1).unwrap();
            pipeline::build_features(&run).unwrap();
            pipeline::cluster(&run, 0.3).unwrap();
            let ensemble = EnsembleConfig { n_folds: 3, trees_per_forest: 8, seed: 3, ..Default::default() };
            pipeline::train(&run, TrainConfig { ensemble, test_fraction: 0.2, split_seed: 3 }).unwrap();
            pipeline::explain(&run, ShapConfig { subsamples: 1, subsample_size: 8, seed: 3 }, 3).unwrap();
            out.insert(kind, run.root);
        }
        out
    })
}

fn config() -> ServiceConfig {
    ServiceConfig { runs: runs().clone(), cors_origins: vec!["http://localhost:5173".into()], ..Default::default() }
}

async fn call(req: Request<Body>) -> (StatusCode, ApiEnvelope, Vec<u8>) {
    let resp = router(config()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let env: ApiEnvelope = serde_json::from_slice(&bytes).unwrap();
    (status, env, bytes)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

#[tokio::test]
async fn scenarios_lists_the_fm_bank() {
    let (status, env, _) = call(get("/scenarios?bank=fm")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(env.status, Status::Ok);
    assert_eq!(env.schema_version, 1);
    let data = env.data.unwrap();
    let scenarios = data["scenarios"].as_array().unwrap();
    assert_eq!(scenarios.len(), 26);
    assert_eq!(scenarios[3]["id"], "S04");
    assert!(env.provenance.run_ids.contains_key("fm"));
    assert!(env.provenance.input_hashes.contains_key("request"));
    assert!(env.provenance.input_hashes.contains_key("bank/manifest.json"));
}

#[tokio::test]
async fn outputs_summary_and_unknown_scenario() {
    let (status, env, _) = call(get("/scenarios/S10/outputs?bank=agri")).await;
    assert_eq!(status, StatusCode::OK);
    let data = env.data.unwrap();
    assert_eq!(data["summary"]["scenario_id"], "S10");
    assert!(data["summary"]["max_violation"].as_f64().unwrap() <= 1e-6);

    let (status, env, _) = call(get("/scenarios/S99/outputs")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(env.error.unwrap().code, "unknown_scenario");
}

#[tokio::test]
async fn clusters_recut_and_validate_parameters() {
    let (status, env, _) = call(get("/clusters?space=output&bank=fm&t=10")).await;
    assert_eq!(status, StatusCode::OK);
    let data = env.data.unwrap();
    let labels: Vec<usize> = serde_json::from_value(data["labels"].clone()).unwrap();
    assert_eq!(labels, vec![1; 26]);
    assert_eq!(data["C"].as_array().unwrap().len(), 26);
    assert_eq!(data["Z"].as_array().unwrap().len(), 25);
    assert!(data["extremal"]["most"]["rho"].is_number());
    assert_eq!(data["variable"], "ghgAbateFMs");

    let (status, env, _) = call(get("/clusters?space=sideways&t=-1")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = env.error.unwrap();
    assert_eq!(err.code, "invalid_parameter");
    let fields: Vec<&str> = err.fields.iter().map(|f| f.field.as_str()).collect();
    assert_eq!(fields, ["space", "bank", "t"]);

    let (status, env, _) = call(get("/clusters?space=input&bank=fm&colour=red")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(env.error.unwrap().fields[0].field, "colour");
}

fn design_rows(kind: Sector, n: usize) -> (Vec<BTreeMap<String, f64>>, (f64, f64)) {
    let run = Run::new(&runs()[&kind]);
    let ds = pipeline::dataset(&run).unwrap();
    let e = run.load_ensemble().unwrap();
    let rows = (0..n)
        .map(|i| ds.design.columns.iter().cloned().zip(ds.design.row(i * 7).iter().copied()).collect())
        .collect();
    (rows, e.target_scaler)
}

#[tokio::test]
async fn predict_stays_within_training_range() {
    let (rows, (lo, hi)) = design_rows(Sector::Fm, 12);
    let (status, env, _) = call(post("/predict", json!({ "bank": "fm", "rows": rows }))).await;
    assert_eq!(status, StatusCode::OK);
    let data = env.data.unwrap();
    let y: Vec<f64> = serde_json::from_value(data["predictions"].clone()).unwrap();
    assert_eq!(y.len(), 12);
    for v in y {
        assert!(v >= lo - 1e-9 * hi.abs().max(1.0) && v <= hi + 1e-9 * hi.abs().max(1.0), "{v} outside [{lo}, {hi}]");
    }
    assert!(env.provenance.input_hashes.contains_key("model/ensemble.json"));
}

#[tokio::test]
async fn predict_reports_field_errors() {
    let (mut rows, _) = design_rows(Sector::Fm, 2);
    rows[1].remove("year");
    rows[1].insert("altitude".into(), 3.0);
    let (status, env, _) = call(post("/predict", json!({ "rows": rows }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = env.error.unwrap();
    assert_eq!(err.code, "invalid_rows");
    let fields: Vec<&str> = err.fields.iter().map(|f| f.field.as_str()).collect();
    assert_eq!(fields, ["rows[1].year", "rows[1].altitude"]);

    let (status, env, _) = call(post("/predict", json!({ "rows": [] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(env.error.unwrap().fields[0].field, "rows");

    let req = Request::post("/predict").body(Body::from("{not json")).unwrap();
    let (status, env, _) = call(req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(env.error.unwrap().code, "invalid_body");

    let (status, env, _) = call(post("/predict", json!({ "rows": [{}], "bank": "forest" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(env.error.unwrap().fields[0].field, "bank");
}

#[tokio::test]
async fn shap_rows_sum_to_prediction() {
    let (rows, _) = design_rows(Sector::Agri, 3);
    let (status, env, _) = call(post("/shap", json!({ "bank": "agri", "rows": rows, "top_k": 2 }))).await;
    assert_eq!(status, StatusCode::OK, "{:?}", env.error);
    let data = env.data.unwrap();
    let phi: Vec<Vec<f64>> = serde_json::from_value(data["phi"].clone()).unwrap();
    assert_eq!(phi.len(), 3);
    assert_eq!(phi[0].len(), data["feature_names"].as_array().unwrap().len());
    assert_eq!(data["drivers"].as_array().unwrap().len(), 2);
    assert!(data["run_ranking"].is_array());
    assert_eq!(data["target"], "capAgri");
    // Local accuracy against /predict, in original units.
    let (_, penv, _) = call(post("/predict", json!({ "bank": "agri", "rows": rows }))).await;
    let y: Vec<f64> = serde_json::from_value(penv.data.unwrap()["predictions"].clone()).unwrap();
    let pred: Vec<f64> = serde_json::from_value(data["prediction"].clone()).unwrap();
    for (a, b) in y.iter().zip(&pred) {
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[tokio::test]
async fn ask_is_deterministic_under_the_stub() {
    let body = json!({ "question": "What happens if CO2 price increases by 20%?", "bank": "fm", "stub": true });
    let (status, env, first) = call(post("/ask", body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let data = env.data.unwrap();
    assert_eq!(data["query"]["parameter"], "CO2price");
    assert_eq!(data["matches"]["ids"], json!(["S04", "S05", "S06"]));
    assert!(data["prompt"].as_str().unwrap().contains("**Scenario Evidence**"));
    let (_, _, second) = call(post("/ask", body)).await;
    assert_eq!(first, second);

    let (status, env, _) = call(post("/ask", json!({ "question": "What if rainfall doubles?", "stub": true }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err = env.error.unwrap();
    assert_eq!(err.code, "unrecognized_parameter");
    assert_eq!(err.fields[0].field, "question");

    let (status, env, _) = call(post("/ask", json!({ "question": "x", "tone": "cheerful" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(env.error.unwrap().code, "invalid_body");
}

#[tokio::test]
async fn unknown_route_and_unserved_bank() {
    let (status, env, _) = call(get("/nowhere")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(env.status, Status::Error);

    let cfg = ServiceConfig { runs: [(Sector::Fm, runs()[&Sector::Fm].clone())].into(), ..Default::default() };
    let resp = router(cfg).oneshot(get("/scenarios?bank=agri")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cors_headers_follow_configuration() {
    let req = Request::get("/scenarios").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(config()).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");

    let req = Request::get("/scenarios").header("origin", "http://evil.example").body(Body::empty()).unwrap();
    let resp = router(config()).oneshot(req).await.unwrap();
    assert!(!resp.headers().contains_key("access-control-allow-origin"));

    let cfg = ServiceConfig { runs: runs().clone(), ..Default::default() };
    let req = Request::get("/scenarios").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(cfg).oneshot(req).await.unwrap();
    assert!(!resp.headers().contains_key("access-control-allow-origin"));
}
