//! Exact and tolerant matching of free-text diagnoses against the seven
//! target diseases, plus normalization to a canonical id.
//!
//! cargo run --example match_diagnoses -- "pericardial effusion" "acute appendicitis"

use macd::matching::{match_exact, match_tolerant, normalize, MatchRuleSet};
use macd::model::DiseaseId;

fn main() -> anyhow::Result<()> {
    let rules = MatchRuleSet::default_rules();
    let mut inputs: Vec<String> = std::env::args().skip(1).collect();
    if inputs.is_empty() {
        inputs = [
            "Pericardial effusion with inflammation",
            "Lung infection of the right lower lobe",
            "Pulmonary thrombus",
            "Acute gangrenous appendicitis",
            "Pleural effusion",
            "Inflamed appendix",
        ]
        .map(String::from)
        .to_vec();
    }
    for text in &inputs {
        let hits: Vec<String> = DiseaseId::CANONICAL
            .iter()
            .filter_map(|d| {
                let exact = match_exact(text, d, &rules).ok()?;
                let tolerant = match_tolerant(text, d, &rules).ok()?;
                match (exact, tolerant) {
                    (true, _) => Some(format!("{d} (exact)")),
                    (false, true) => Some(format!("{d} (tolerant)")),
                    _ => None,
                }
            })
            .collect();
        let normalized = normalize(text, &rules).map_or("-".to_string(), |d| d.canonical_name());
        println!("{text:<42} normalized={normalized:<20} matches: {}", hits.join(", "));
    }
    Ok(())
}
