//! Leave-one-concept-out ablation with a recorded accuracy table as the
//! evaluator: negatives are labelled and up to three are pruned.
//!
//! cargo run --example concept_ablation

use macd::knowledge::importance::{importance_assessment, EvaluationFailure};
use macd::knowledge::RefinementConfig;
use macd::model::{ConceptCategory, ConceptStatus, DiagnosticConcept, DiseaseId, DiseaseKnowledge};

const FULL: f64 = 0.840;
const WITHOUT: [f64; 14] = [
    0.856, 0.852, 0.837, 0.821, 0.837, 0.825, 0.833, 0.825, 0.837, 0.829, 0.825, 0.837, 0.827, 0.844,
];

fn main() -> anyhow::Result<()> {
    let mut slice = DiseaseKnowledge::default();
    for i in 0..WITHOUT.len() {
        let category = if i < 7 { ConceptCategory::General } else { ConceptCategory::Rare };
        let concept = DiagnosticConcept {
            concept_id: format!("concept-{}", i + 1),
            disease: DiseaseId::Diverticulitis,
            category,
            text: format!("criterion {}", i + 1),
            source_model: "llama-3.1-70b".into(),
            status: ConceptStatus::Retained,
            provenance: vec![format!("case{i}")],
        };
        match category {
            ConceptCategory::General => slice.general.push(concept),
            ConceptCategory::Rare => slice.rare.push(concept),
        }
    }
    let total = slice.len();
    let evaluator = |s: &DiseaseKnowledge, pass: &str| -> Result<f64, EvaluationFailure> {
        if s.len() == total {
            return Ok(FULL);
        }
        let missing = (1..=total)
            .find(|i| !s.concepts().any(|c| c.concept_id == format!("concept-{i}")))
            .expect("one concept missing");
        println!("  pass {pass:<48} -> {:.3}", WITHOUT[missing - 1]);
        Ok(WITHOUT[missing - 1])
    };
    let report = importance_assessment(&DiseaseId::Diverticulitis, &slice, &evaluator, &RefinementConfig::default())?;
    println!("full accuracy {:.3}", report.full_accuracy);
    for e in &report.entries {
        println!("  {:<11} delta {:+.3} {:?}", e.concept_id, e.delta, e.label);
    }
    let removed: Vec<&str> = report.removed.iter().map(|c| c.concept_id.as_str()).collect();
    println!("removed {removed:?}; {} concepts remain", report.pruned.len());
    Ok(())
}
