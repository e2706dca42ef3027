//! Self-learned knowledge: summarizer parsing and harvesting, the
//! redundancy and importance filters, and knowledge rendering.

pub mod importance;
pub mod redundancy;
pub mod summarizer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use importance::{importance_assessment, EvaluationFailure, ImportanceReport, SliceEvaluator};
pub use redundancy::{mmr_trace, redundancy_filter};
pub use summarizer::{harvest_concepts, parse_summarizer_output, HarvestOutcome, LearningExample, SummarizerOutput};

use crate::embedding::{EmbedError, Embedder};
use crate::model::{ConceptCategory, DiagnosticConcept, DiseaseId, DiseaseKnowledge, KnowledgeSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("summarizer output format violation: {0}")]
    FormatViolation(String),
    #[error("pool mixes diseases or categories")]
    MixedPool,
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationFailure),
    #[error("{0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub keep_per_category: usize,
    pub mmr_lambda: f64,
    /// Must be ≤ 0. Negative concepts qualify for removal when
    /// `acc_without - acc_full >= -negative_removal_threshold`.
    pub negative_removal_threshold: f64,
    pub max_removals_per_disease: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            keep_per_category: 7,
            mmr_lambda: 0.5,
            negative_removal_threshold: 0.0,
            max_removals_per_disease: 3,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.keep_per_category == 0 {
            return Err(KnowledgeError::Config("keep_per_category must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return Err(KnowledgeError::Config(format!("mmr_lambda {} not in [0, 1]", self.mmr_lambda)));
        }
        if !(self.negative_removal_threshold <= 0.0) {
            return Err(KnowledgeError::Config(format!(
                "negative_removal_threshold {} must be <= 0",
                self.negative_removal_threshold
            )));
        }
        if self.max_removals_per_disease == 0 {
            return Err(KnowledgeError::Config("max_removals_per_disease must be positive".into()));
        }
        Ok(())
    }
}

/// Disease header, then numbered general and rare criteria.
pub fn render_knowledge(disease: &DiseaseId, slice: &DiseaseKnowledge) -> String {
    let mut out = disease.display_name();
    out.push('\n');
    for (category, list) in [(ConceptCategory::General, &slice.general), (ConceptCategory::Rare, &slice.rare)] {
        out.push_str(category.heading());
        out.push('\n');
        for (i, concept) in list.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, concept.text.trim()));
        }
    }
    out
}

/// Every non-empty slice of a knowledge set, in disease order.
pub fn render_knowledge_set(set: &KnowledgeSet) -> String {
    set.diseases
        .iter()
        .filter(|(_, slice)| !slice.is_empty())
        .map(|(d, slice)| render_knowledge(d, slice))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds a first knowledge version from a candidate pool: each
/// disease/category pool goes through the redundancy filter.
pub fn distill_knowledge(
    model: &str,
    candidates: &[DiagnosticConcept],
    cfg: &RefinementConfig,
    embedder: &dyn Embedder,
) -> Result<KnowledgeSet, KnowledgeError> {
    cfg.validate()?;
    let mut pools: BTreeMap<(DiseaseId, ConceptCategory), Vec<DiagnosticConcept>> = BTreeMap::new();
    for c in candidates {
        pools.entry((c.disease.clone(), c.category)).or_default().push(c.clone());
    }
    let mut set = KnowledgeSet::new(model);
    for ((disease, category), pool) in pools {
        let kept = redundancy_filter(&pool, cfg, embedder)?;
        let slice = set.diseases.entry(disease).or_default();
        match category {
            ConceptCategory::General => slice.general = kept,
            ConceptCategory::Rare => slice.rare = kept,
        }
    }
    set.check_invariants().map_err(KnowledgeError::Invariant)?;
    Ok(set)
}

/// Applies pruned slices from one refinement pass: version + 1.
pub fn apply_refinement(set: &KnowledgeSet, reports: &[ImportanceReport]) -> Result<KnowledgeSet, KnowledgeError> {
    let replacements = reports
        .iter()
        .map(|r| (r.disease.clone(), r.pruned.clone()))
        .collect();
    let next = set.refined(replacements);
    next.check_invariants().map_err(KnowledgeError::Invariant)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConceptStatus;

    fn c(text: &str, category: ConceptCategory) -> DiagnosticConcept {
        DiagnosticConcept {
            concept_id: text.into(),
            disease: DiseaseId::Pancreatitis,
            category,
            text: text.into(),
            source_model: "llama-70b".into(),
            status: ConceptStatus::Retained,
            provenance: vec![],
        }
    }

    #[test]
    fn renders_two_headers() {
        let slice = DiseaseKnowledge {
            general: vec![
                c("Elevated serum lipase level (>3 times upper limit of normal)", ConceptCategory::General),
                c("Nausea and vomiting", ConceptCategory::General),
            ],
            rare: vec![c("Splenic vein thrombosis", ConceptCategory::Rare)],
        };
        let text = render_knowledge(&DiseaseId::Pancreatitis, &slice);
        assert_eq!(
            text,
            "Pancreatitis\nGeneral Criteria:\n1. Elevated serum lipase level (>3 times upper limit of normal)\n2. Nausea and vomiting\nRare Criteria:\n1. Splenic vein thrombosis\n"
        );
        assert_eq!(text, render_knowledge(&DiseaseId::Pancreatitis, &slice));
    }

    #[test]
    fn config_ranges() {
        RefinementConfig::default().validate().unwrap();
        let bad = RefinementConfig {
            negative_removal_threshold: 0.1,
            ..RefinementConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefinementConfig {
            mmr_lambda: 1.5,
            ..RefinementConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
