//! One diagnostician evaluated on a synthetic corpus under zero knowledge
//! and chain-of-thought, scored at both matching levels.
//!
//! cargo run --example single_agent_evaluation -- [PER_DISEASE]

use std::sync::Arc;

use macd::engine::{evaluate, Diagnostician, KnowledgeCondition};
use macd::gateway::{Gateway, GenerationConfig};
use macd::matching::{MatchLevel, MatchRuleSet};
use macd::model::{validate_case, LabeledCase};
use macd::synthetic::{corpus, oracle_script, OracleOptions};

fn main() -> anyhow::Result<()> {
    let per_disease: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let model = "llama-3.1-70b";
    let corpus = corpus(per_disease, 1);
    let cases: Vec<LabeledCase> = corpus
        .cases
        .iter()
        .zip(&corpus.labels)
        .map(|(c, l)| validate_case(c, l))
        .collect::<Result<_, _>>()?;
    let backend = oracle_script(&corpus, &OracleOptions::new(&[model]));
    let agent = Diagnostician::new(
        model,
        GenerationConfig::for_model(model),
        Gateway::new(Arc::new(backend)),
        Arc::new(MatchRuleSet::default_rules()),
    );
    for condition in [KnowledgeCondition::Zero, KnowledgeCondition::ChainOfThought] {
        let report = evaluate(&cases, &condition, &agent, MatchLevel::Exact, None);
        for level in [MatchLevel::Exact, MatchLevel::Tolerant] {
            let view = report.at_level(level);
            println!("{} / {level:?}: average {:.3}", condition.description(), view.average);
            for (d, acc) in &view.per_disease {
                println!("  {d:<20} {}/{} = {:.3}", acc.correct, acc.total, acc.accuracy);
            }
        }
    }
    Ok(())
}
