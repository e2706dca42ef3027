//! Starts the adjudication service on a store seeded with escalated
//! synthetic cases. Point a browser or curl at it:
//!
//!   curl localhost:8080/queue
//!   curl -XPOST localhost:8080/verdict -H 'content-type: application/json' \
//!        -d '{"case_id":"syn-001","physician_id":"dr-a","diagnosis_text":"pneumonia"}'
//!
//! cargo run --example adjudication_service -- [STORE_DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use macd::consultation::{AgentSpec, Panel, PanelConfig};
use macd::embedding::{Embedder, FallbackEmbedder};
use macd::gateway::{Gateway, GenerationConfig};
use macd::matching::MatchRuleSet;
use macd::model::validate_case;
use macd::service::{bind_address, serve, AppState};
use macd::store::{QueueEntry, RunManifest, Store};
use macd::synthetic::{corpus, oracle_script, OracleOptions};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("macd-adjudication"));
    let store = Store::open(&dir)?;
    let rules = Arc::new(MatchRuleSet::default_rules());

    if store.latest_consultation_run()?.is_none() {
        let models = ["llama-3.1-70b", "llama-3.1-8b"];
        let corpus = corpus(3, 17);
        store.put_cases("default", &corpus.cases)?;
        store.put_labels("default", &corpus.labels)?;
        let gateway = Gateway::new(Arc::new(oracle_script(&corpus, &OracleOptions::new(&models))));
        let agents = models
            .iter()
            .map(|m| AgentSpec {
                agent_id: m.to_string(),
                model_id: m.to_string(),
                knowledge: None,
            })
            .collect();
        let embedder: Arc<dyn Embedder> = Arc::new(FallbackEmbedder::default());
        let panel = Panel::new(&PanelConfig::new(agents), &gateway, &GenerationConfig::default(), rules.clone(), embedder)?;
        let labeled = corpus
            .cases
            .iter()
            .zip(&corpus.labels)
            .map(|(c, l)| validate_case(c, l))
            .collect::<Result<Vec<_>, _>>()?;
        let cases: Vec<_> = labeled.iter().map(|lc| &lc.case).collect();
        let records = panel.run_batch(&cases);
        let run_id = "consult-demo";
        store.create_run(&RunManifest {
            run_id: run_id.into(),
            command: "consult".into(),
            created_at: chrono::Utc::now(),
            config: serde_json::json!({}),
            invocation: serde_json::json!({}),
            inputs: BTreeMap::new(),
        })?;
        store.put_consultations(run_id, &records)?;
        let queue: Vec<QueueEntry> = records
            .iter()
            .zip(&cases)
            .filter(|(r, _)| r.is_escalated())
            .map(|(r, c)| QueueEntry::from_record(r, c, run_id))
            .collect();
        println!("seeded {} escalated cases into {}", store.enqueue(&queue)?, dir.display());
    }

    let addr = bind_address().map_err(anyhow::Error::msg)?;
    println!("listening on http://{addr} (ctrl-c to stop)");
    let state = AppState {
        store: Arc::new(store),
        rules,
    };
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr, None))?;
    Ok(())
}
