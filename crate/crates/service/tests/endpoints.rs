use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::NaiveDate;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ewi_core::alerting::{assign_tier, AlertRecord, AlertStore, TierThresholds};
use ewi_core::cohort::{Location, PatientDayKey};
use ewi_core::explain::{ExplanationRecord, ShapExplanation};
use ewi_core::time::publish_time;
use ewi_service::{router, ModelInfo, ServiceState};

fn date(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 5, d).unwrap()
}

fn alert(id: &str, d: u32, risk: f64, prev: Option<f64>, department: &str) -> AlertRecord {
    AlertRecord {
        patient_day: PatientDayKey::new(id, date(d)),
        risk,
        risk_prev1: prev,
        risk_prev2: None,
        tier: assign_tier(risk, prev, &TierThresholds::default()),
        scored_at: publish_time(date(d)),
        location: Location {
            department: department.into(),
            room: "12".into(),
            bed: "A".into(),
            service: "General".into(),
        },
        model_stale: false,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: axum::Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = AlertStore::open(dir.path()).unwrap();
    let day1 = vec![
        alert("p1", 1, 0.20, None, "Medicine"),
        alert("p2", 1, 0.05, None, "Surgery"),
        alert("p3", 1, 0.01, None, "Medicine"),
    ];
    let day2 = vec![
        alert("p1", 2, 0.25, Some(0.20), "Medicine"),
        alert("p2", 2, 0.09, Some(0.05), "Surgery"),
        alert("p3", 2, 0.02, Some(0.01), "Medicine"),
    ];
    store.write_run(date(1), &day1, "hash").unwrap();
    store.write_run(date(2), &day2, "hash").unwrap();
    let names: Vec<String> = ["age", "heart_rate_last", "lactate_peak"].map(String::from).to_vec();
    let explanation = ShapExplanation {
        phi: vec![0.1, 0.7, -0.4],
        base_value: -2.0,
        prediction_margin: -1.6,
        values: vec![71.0, 128.0, 3.1],
    };
    let rec = ExplanationRecord::new(&PatientDayKey::new("p1", date(2)), &explanation, &names);
    store.write_explanations(date(2), &[rec]).unwrap();

    let labels: HashMap<PatientDayKey, u8> = day1
        .iter()
        .chain(&day2)
        .map(|a| (a.patient_day.clone(), u8::from(a.patient_day.patient_id == "p1")))
        .collect();
    let state = ServiceState {
        store,
        model: Some(ModelInfo {
            kind: "Gradient Boosted Trees".into(),
            n_estimators: 50,
            max_depth: 3,
            trained_on: Some(date(1)),
            manifest_hash: "hash".into(),
        }),
        labels,
        as_of: Some(date(3)),
    };
    Fixture {
        _dir: dir,
        app: router(Arc::new(state)),
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

#[tokio::test]
async fn run_alerts_with_filters() {
    let f = fixture();
    let (s, v) = call(&f.app, "GET", "/runs/2024-05-02/alerts", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["alerts"].as_array().unwrap().len(), 3);
    assert_eq!(v["alerts"][0]["tier"], "Red");
    assert_eq!(v["alerts"][1]["tier"], "Yellow");
    assert_eq!(v["alerts"][0]["scored_at"], "2024-05-03 08:00");

    let (_, v) = call(&f.app, "GET", "/runs/2024-05-02/alerts?tier=yellow", None).await;
    let ids: Vec<&str> = v["alerts"].as_array().unwrap().iter().map(|a| a["patient_day"]["patient_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["p2"]);
    let (_, v) = call(&f.app, "GET", "/runs/2024-05-02/alerts?department=Medicine", None).await;
    assert_eq!(v["alerts"].as_array().unwrap().len(), 2);

    assert_eq!(call(&f.app, "GET", "/runs/2024-05-09/alerts", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.app, "GET", "/runs/yesterday/alerts", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&f.app, "GET", "/runs/2024-05-02/alerts?tier=blue", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn risk_history_spans_runs() {
    let f = fixture();
    let (s, v) = call(&f.app, "GET", "/patients/p1/risk-history", None).await;
    assert_eq!(s, StatusCode::OK);
    let h = v["history"].as_array().unwrap();
    assert_eq!(h.len(), 2);
    assert_eq!(h[0]["date"], "2024-05-01");
    assert_eq!(h[1]["risk"], 0.25);
    assert_eq!(call(&f.app, "GET", "/patients/nobody/risk-history", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn explanation_top_k() {
    let f = fixture();
    let (s, v) = call(&f.app, "GET", "/alerts/p1@2024-05-02/explanation?k=2", None).await;
    assert_eq!(s, StatusCode::OK);
    let d = v["drivers"].as_array().unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d[0]["name"], "heart_rate_last");
    assert_eq!(d[1]["name"], "lactate_peak");
    assert_eq!(d[1]["phi"], -0.4);
    assert_eq!(v["base"], -2.0);

    let (_, v) = call(&f.app, "GET", "/alerts/p1@2024-05-02/explanation", None).await;
    assert_eq!(v["drivers"].as_array().unwrap().len(), 3);
    assert_eq!(call(&f.app, "GET", "/alerts/p1@2024-05-02/explanation?k=0", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&f.app, "GET", "/alerts/p2@2024-05-02/explanation", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.app, "GET", "/alerts/garbage/explanation", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn feedback_round_trip() {
    let f = fixture();
    let entry = json!({
        "patient_day": {"patient_id": "p1", "date": "2024-05-02"},
        "verdict": "FalsePositive",
        "note": "post-op tachycardia",
        "author": "dr_a",
        "ts": "2024-05-03 09:15"
    });
    let (s, v) = call(&f.app, "POST", "/feedback", Some(entry.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["sequence"], 0);
    let mut second = entry.clone();
    second["author"] = json!("dr_b");
    assert_eq!(call(&f.app, "POST", "/feedback", Some(second)).await.1["sequence"], 1);

    let (_, v) = call(&f.app, "GET", "/feedback?verdict=FalsePositive", None).await;
    assert_eq!(v.as_array().unwrap().len(), 2);
    let (_, v) = call(&f.app, "GET", "/feedback?from=2024-05-03", None).await;
    assert!(v.as_array().unwrap().is_empty());

    let mut dangling = entry;
    dangling["patient_day"]["patient_id"] = json!("ghost");
    let (s, v) = call(&f.app, "POST", "/feedback", Some(dangling)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("ghost"));

    // Alerts are unchanged by feedback.
    let (_, v) = call(&f.app, "GET", "/runs/2024-05-02/alerts", None).await;
    assert_eq!(v["alerts"][0]["risk"], 0.25);
}

#[tokio::test]
async fn whatif_summary() {
    let f = fixture();
    let current = serde_json::to_value(TierThresholds::default()).unwrap();
    let (s, v) = call(&f.app, "POST", "/thresholds/whatif", Some(current)).await;
    assert_eq!(s, StatusCode::OK);
    // Stored tiers: day 1 R,Y,W; day 2 R,Y,W.
    assert_eq!(v["counts"], json!({"red": 2, "yellow": 2, "white": 2}));
    assert_eq!(v["alert"]["tp"], 2);
    assert_eq!(v["alert"]["fp"], 2);
    assert_eq!(v["daily_alert_volume"], 2.0);

    let lower = json!({"red_level": 0.12, "red_delta": 0.06, "yellow_level": 0.015, "yellow_delta": 0.015});
    let (_, v) = call(&f.app, "POST", "/thresholds/whatif", Some(lower)).await;
    assert_eq!(v["counts"]["white"], 1);

    let bad = json!({"red_level": 0.01, "red_delta": 0.06, "yellow_level": 0.03, "yellow_delta": 0.015});
    assert_eq!(call(&f.app, "POST", "/thresholds/whatif", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn model_status_reports_freshness() {
    let f = fixture();
    let (s, v) = call(&f.app, "GET", "/model/status", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["freshness"], "fresh");
    assert_eq!(v["model"]["manifest_hash"], "hash");
    assert_eq!(v["model"]["trained_on"], "2024-05-01");
    assert_eq!(v["latest_run"], "2024-05-02");
}
