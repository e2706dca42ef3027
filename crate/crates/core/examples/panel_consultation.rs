//! A three-agent panel over synthetic cases: consensus rounds, escalation
//! and workflow metrics.
//!
//! cargo run --example panel_consultation -- [PER_DISEASE]

use std::collections::BTreeMap;
use std::sync::Arc;

use macd::consultation::{compute_workflow_metrics, AgentSpec, Panel, PanelConfig};
use macd::embedding::{Embedder, FallbackEmbedder};
use macd::gateway::{Gateway, GenerationConfig};
use macd::matching::MatchRuleSet;
use macd::model::{validate_case, ConsultationOutcome};
use macd::synthetic::{corpus, oracle_script, OracleOptions};

fn main() -> anyhow::Result<()> {
    let per_disease: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let models = ["llama-3.1-70b", "llama-3.1-8b", "deepseek-r1-distill-llama-70b"];
    let corpus = corpus(per_disease, 5);
    let gateway = Gateway::new(Arc::new(oracle_script(&corpus, &OracleOptions::new(&models))));
    let agents = models
        .iter()
        .enumerate()
        .map(|(i, m)| AgentSpec {
            agent_id: format!("agent-{}", i + 1),
            model_id: m.to_string(),
            knowledge: None,
        })
        .collect();
    let rules = Arc::new(MatchRuleSet::default_rules());
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
    for record in &records {
        let outcome = match &record.outcome {
            ConsultationOutcome::Consensus { text, .. } => format!("consensus on {text}"),
            ConsultationOutcome::Escalated => "escalated to a physician".into(),
        };
        println!("{}: {} round(s), {outcome}", record.case_id, record.rounds.len());
    }
    let truths: BTreeMap<_, _> = labeled.iter().map(|lc| (lc.case.case_id.clone(), lc.truth.disease.clone())).collect();
    let m = compute_workflow_metrics(&records, &BTreeMap::new(), &truths, &rules, None);
    println!(
        "consensus by round {:?}; escalated {}; effective opinion rate {:.3}; combined accuracy {:.3} ({} pending)",
        m.consensus_by_round, m.escalated, m.effective_opinion_rate, m.combined_accuracy, m.pending
    );
    Ok(())
}
