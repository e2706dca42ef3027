use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use macd::matching::MatchRuleSet;
use macd::model::{
    CaseRecord, ConsultationOutcome, ConsultationRecord, DiagnosisResult, DiseaseId, LabelRecord, PatientCase,
    RoundRecord,
};
use macd::service::{router, AppState};
use macd::store::{QueueEntry, RunManifest, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

fn record(id: &str) -> CaseRecord {
    CaseRecord {
        case_id: id.into(),
        hpi: format!("History for {id}."),
        physical_exam: "Exam.".into(),
        labs: "Labs.".into(),
        radiology: "Imaging.".into(),
    }
}

fn patient(id: &str) -> PatientCase {
    let r = record(id);
    PatientCase {
        case_id: r.case_id,
        hpi: r.hpi,
        physical_exam: r.physical_exam,
        labs: r.labs,
        radiology: r.radiology,
    }
}

fn opinion(case: &str, agent: &str, text: &str, d: Option<DiseaseId>) -> DiagnosisResult {
    DiagnosisResult {
        case_id: case.into(),
        agent_id: agent.into(),
        raw_text: text.into(),
        primary_diagnosis_text: text.into(),
        criteria_text: String::new(),
        normalized: d,
        latency_seconds: 0.0,
    }
}

fn escalated(case: &str) -> ConsultationRecord {
    let opinions = vec![
        opinion(case, "agent-1", "Pneumonia", Some(DiseaseId::Pneumonia)),
        opinion(case, "agent-2", "Pulmonary embolism", Some(DiseaseId::PulmonaryEmbolism)),
    ];
    ConsultationRecord {
        case_id: case.into(),
        rounds: vec![RoundRecord {
            index: 1,
            normalized_terms: vec!["pneumonia".into(), "pulmonary embolism".into()],
            pairwise_similarity: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
            agreed: false,
            opinions,
        }],
        outcome: ConsultationOutcome::Escalated,
        final_diagnosis: None,
        human_verdict: None,
    }
}

fn consensus(case: &str, d: DiseaseId) -> ConsultationRecord {
    let name = d.display_name();
    ConsultationRecord {
        case_id: case.into(),
        rounds: vec![RoundRecord {
            index: 1,
            normalized_terms: vec![name.to_lowercase(); 2],
            pairwise_similarity: vec![vec![1.0; 2]; 2],
            agreed: true,
            opinions: vec![
                opinion(case, "agent-1", &name, Some(d.clone())),
                opinion(case, "agent-2", &name, Some(d.clone())),
            ],
        }],
        outcome: ConsultationOutcome::Consensus {
            disease: Some(d.clone()),
            text: d.canonical_name(),
            non_canonical: false,
        },
        final_diagnosis: Some(d.canonical_name()),
        human_verdict: None,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    store: Arc<Store>,
}

impl Fixture {
    fn empty() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path()).unwrap());
        Self { _dir: dir, store }
    }

    /// c1 reached consensus; c2, c3 and c4 are escalated and queued.
    fn seeded() -> Self {
        let f = Self::empty();
        let ids = ["c1", "c2", "c3", "c4"];
        let truth = [
            DiseaseId::Appendicitis,
            DiseaseId::Pneumonia,
            DiseaseId::Pericarditis,
            DiseaseId::PulmonaryEmbolism,
        ];
        f.store.put_cases("default", &ids.map(record)).unwrap();
        let labels: Vec<LabelRecord> = ids
            .iter()
            .zip(&truth)
            .map(|(id, d)| LabelRecord {
                case_id: id.to_string(),
                disease: d.canonical_name(),
                distractor: false,
            })
            .collect();
        f.store.put_labels("default", &labels).unwrap();
        f.store
            .create_run(&RunManifest {
                run_id: "consult-1".into(),
                command: "consult".into(),
                created_at: chrono::Utc::now(),
                config: json!({}),
                invocation: json!({}),
                inputs: BTreeMap::new(),
            })
            .unwrap();
        let records = vec![
            consensus("c1", DiseaseId::Appendicitis),
            escalated("c2"),
            escalated("c3"),
            escalated("c4"),
        ];
        f.store.put_consultations("consult-1", &records).unwrap();
        let queue: Vec<QueueEntry> = records[1..]
            .iter()
            .map(|r| QueueEntry::from_record(r, &patient(&r.case_id), "consult-1"))
            .collect();
        f.store.enqueue(&queue).unwrap();
        f
    }

    fn app(&self) -> axum::Router {
        router(
            AppState {
                store: self.store.clone(),
                rules: Arc::new(MatchRuleSet::default_rules()),
            },
            None,
        )
    }
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

#[tokio::test]
async fn queue_lists_pending_cases_with_pagination() {
    let f = Fixture::seeded();
    let (status, body) = call(f.app(), "GET", "/queue", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body.as_array().unwrap().iter().map(|i| i["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["c2", "c3", "c4"]);
    assert!(body.as_array().unwrap().iter().all(|i| i["status"] == "pending"));

    let (_, page2) = call(f.app(), "GET", "/queue?page=2&page_size=2", None).await;
    assert_eq!(page2.as_array().unwrap().len(), 1);
    assert_eq!(page2[0]["case_id"], "c4");
}

#[tokio::test]
async fn case_bundle_is_blind() {
    let f = Fixture::seeded();
    let (status, body) = call(f.app(), "GET", "/case/c2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["case"]["hpi"], "History for c2.");
    assert_eq!(body["opinions"].as_array().unwrap().len(), 2);
    let text = body.to_string();
    assert!(!text.contains("agent-1") && !text.contains("agent_id"), "opinions are anonymous");
    assert!(!text.contains("truth") && !text.contains("label"), "no ground truth: {text}");

    let (status, _) = call(f.app(), "GET", "/case/c1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn verdict_lifecycle() {
    let f = Fixture::seeded();
    let verdict = json!({ "case_id": "c3", "physician_id": "dr-a", "diagnosis_text": "pericardial effusion" });
    let (status, body) = call(f.app(), "POST", "/verdict", Some(verdict.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["normalized"], "pericarditis");

    let (status, _) = call(f.app(), "POST", "/verdict", Some(verdict)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let unknown = json!({ "case_id": "zz", "physician_id": "dr-a", "diagnosis_text": "pneumonia" });
    assert_eq!(call(f.app(), "POST", "/verdict", Some(unknown)).await.0, StatusCode::NOT_FOUND);

    let empty = json!({ "case_id": "c2", "physician_id": "dr-a", "diagnosis_text": "  " });
    assert_eq!(call(f.app(), "POST", "/verdict", Some(empty)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, queue) = call(f.app(), "GET", "/queue", None).await;
    let order: Vec<(&str, &str)> = queue
        .as_array()
        .unwrap()
        .iter()
        .map(|i| (i["case_id"].as_str().unwrap(), i["status"].as_str().unwrap()))
        .collect();
    assert_eq!(order, [("c2", "pending"), ("c4", "pending"), ("c3", "adjudicated")]);
}

#[tokio::test]
async fn metrics_fold_in_verdicts() {
    let f = Fixture::seeded();
    let (_, before) = call(f.app(), "GET", "/metrics", None).await;
    assert_eq!(before["total"], 4);
    assert_eq!(before["escalated"], 3);
    assert_eq!(before["pending"], 3);
    assert_eq!(before["combined_correct"], 1);
    assert_eq!(before["combined_accuracy"], 1.0);

    for (case, text) in [("c2", "Community acquired pneumonia"), ("c3", "Myocardial infarction")] {
        let v = json!({ "case_id": case, "physician_id": "dr-b", "diagnosis_text": text });
        assert_eq!(call(f.app(), "POST", "/verdict", Some(v)).await.0, StatusCode::OK);
    }
    let (_, after) = call(f.app(), "GET", "/metrics?run_id=consult-1", None).await;
    assert_eq!(after["run_id"], "consult-1");
    assert_eq!(after["pending"], 1);
    assert_eq!(after["combined_correct"], 2);
    let acc = after["combined_accuracy"].as_f64().unwrap();
    assert!((acc - 2.0 / 3.0).abs() < 1e-9, "{acc}");
}

#[tokio::test]
async fn metrics_are_zero_without_runs() {
    let f = Fixture::empty();
    let (status, body) = call(f.app(), "GET", "/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["total"], 0);
    assert_eq!(body["combined_accuracy"], 0.0);
    let (_, queue) = call(f.app(), "GET", "/queue", None).await;
    assert_eq!(queue, json!([]));
}

#[tokio::test]
async fn concept_scores_aggregate() {
    let f = Fixture::seeded();
    let id = "llama-3.1-70b:pericarditis:c9:g1";
    for (physician, score) in [("dr-a", 4), ("dr-b", 5)] {
        let body = json!({ "concept_id": id, "physician_id": physician, "score": score });
        assert_eq!(call(f.app(), "POST", "/concept-score", Some(body)).await.0, StatusCode::OK);
    }
    for bad in [0, 6, -1] {
        let body = json!({ "concept_id": id, "physician_id": "dr-c", "score": bad });
        assert_eq!(
            call(f.app(), "POST", "/concept-score", Some(body)).await.0,
            StatusCode::UNPROCESSABLE_ENTITY
        );
    }
    let (_, report) = call(f.app(), "GET", "/concept-scores", None).await;
    assert_eq!(report["per_concept"][id]["count"], 2);
    assert_eq!(report["per_concept"][id]["mean"], 4.5);
    assert_eq!(report["per_model"]["llama-3.1-70b"]["mean"], 4.5);
}
