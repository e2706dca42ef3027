//! Records a diagnosis pass in a run log, then answers the same prompts
//! from the log alone and checks the outputs agree.
//!
//! cargo run --example replay_run -- [LOG_PATH]

use std::path::PathBuf;
use std::sync::Arc;

use macd::engine::{evaluate, Diagnostician, KnowledgeCondition};
use macd::gateway::{Gateway, GenerationConfig, ReplayBackend, RunLog};
use macd::matching::{MatchLevel, MatchRuleSet};
use macd::model::validate_case;
use macd::synthetic::{corpus, oracle_script, OracleOptions};

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("macd-replay-demo.jsonl"));
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let model = "llama-3.1-8b";
    let corpus = corpus(2, 9);
    let cases = corpus
        .cases
        .iter()
        .zip(&corpus.labels)
        .map(|(c, l)| validate_case(c, l))
        .collect::<Result<Vec<_>, _>>()?;
    let rules = Arc::new(MatchRuleSet::default_rules());
    let agent = |gateway| Diagnostician::new(model, GenerationConfig::for_model(model), gateway, rules.clone());

    let recorded = Gateway::new(Arc::new(oracle_script(&corpus, &OracleOptions::new(&[model]))))
        .with_log(Arc::new(RunLog::open(&path)?));
    let live = evaluate(&cases, &KnowledgeCondition::Zero, &agent(recorded), MatchLevel::Exact, Some("demo"));

    let replay = Gateway::new(Arc::new(ReplayBackend::load(&path)?));
    let again = evaluate(&cases, &KnowledgeCondition::Zero, &agent(replay), MatchLevel::Exact, Some("demo"));

    let same = serde_json::to_vec(&live)? == serde_json::to_vec(&again)?;
    println!("{} calls logged to {}", cases.len(), path.display());
    println!("live average {:.3}, replay average {:.3}, identical reports: {same}", live.average, again.average);
    anyhow::ensure!(same, "replay diverged");
    Ok(())
}
