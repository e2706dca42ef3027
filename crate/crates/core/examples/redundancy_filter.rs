//! MMR redundancy filtering of a harvested concept pool: near-duplicates
//! lose to diverse criteria.
//!
//! cargo run --example redundancy_filter -- [KEEP]

use macd::embedding::FallbackEmbedder;
use macd::knowledge::redundancy::redundancy_filter;
use macd::knowledge::RefinementConfig;
use macd::model::{ConceptCategory, ConceptStatus, DiagnosticConcept, DiseaseId};

fn main() -> anyhow::Result<()> {
    let keep: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let texts = [
        "Elevated serum lipase level (>3 times upper limit of normal)",
        "Serum lipase elevated above 3 times the upper limit of normal",
        "Epigastric pain radiating to the back",
        "Acute epigastric pain radiating to the back",
        "Peripancreatic fat stranding on CT",
        "History of heavy alcohol use",
        "Gallstones on abdominal ultrasound",
        "Elevated lipase",
    ];
    let pool: Vec<DiagnosticConcept> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| DiagnosticConcept {
            concept_id: format!("demo:pancreatitis:case{i:02}:g1"),
            disease: DiseaseId::Pancreatitis,
            category: ConceptCategory::General,
            text: t.to_string(),
            source_model: "demo".into(),
            status: ConceptStatus::Candidate,
            provenance: vec![format!("case{i:02}")],
        })
        .collect();
    let cfg = RefinementConfig {
        keep_per_category: keep,
        ..RefinementConfig::default()
    };
    let kept = redundancy_filter(&pool, &cfg, &FallbackEmbedder::default())?;
    println!("pool of {}, keeping {keep} (lambda {}):", pool.len(), cfg.mmr_lambda);
    for (rank, c) in kept.iter().enumerate() {
        println!("  {}. {}", rank + 1, c.text);
    }
    Ok(())
}
