//! Importance assessment: leave-one-concept-out ablation of a disease's
//! knowledge slice, and pruning of the most harmful negative concepts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KnowledgeError, RefinementConfig};
use crate::model::{AblationEntry, AblationLabel, ConceptStatus, DiagnosticConcept, DiseaseId, DiseaseKnowledge};

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[error("evaluation pass `{pass}` failed: {reason}")]
pub struct EvaluationFailure {
    pub pass: String,
    pub reason: String,
}

/// Measures target-disease accuracy with a given slice injected.
/// One call is one evaluation pass.
pub trait SliceEvaluator: Sync {
    fn accuracy(&self, slice: &DiseaseKnowledge, pass: &str) -> Result<f64, EvaluationFailure>;
}

impl<F> SliceEvaluator for F
where
    F: Fn(&DiseaseKnowledge, &str) -> Result<f64, EvaluationFailure> + Sync,
{
    fn accuracy(&self, slice: &DiseaseKnowledge, pass: &str) -> Result<f64, EvaluationFailure> {
        self(slice, pass)
    }
}

pub fn full_pass_label(disease: &DiseaseId) -> String {
    format!("ablation/{disease}/full")
}

pub fn ablation_pass_label(disease: &DiseaseId, concept_id: &str) -> String {
    format!("ablation/{disease}/without/{concept_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub disease: DiseaseId,
    pub full_accuracy: f64,
    pub entries: Vec<AblationEntry>,
    /// Concepts whose ablation pass aborted; they are kept.
    pub invalid: Vec<EvaluationFailure>,
    pub removed: Vec<DiagnosticConcept>,
    pub pruned: DiseaseKnowledge,
}

/// Ablates each concept in turn (n passes after one full pass), labels
/// entries by the sign of accuracy-with minus accuracy-without, and drops
/// up to `max_removals_per_disease` negative concepts, largest
/// `acc_without - acc_full` first, among those with
/// `acc_without - acc_full >= -negative_removal_threshold`.
pub fn importance_assessment(
    disease: &DiseaseId,
    slice: &DiseaseKnowledge,
    evaluator: &dyn SliceEvaluator,
    cfg: &RefinementConfig,
) -> Result<ImportanceReport, KnowledgeError> {
    cfg.validate()?;
    let full_accuracy = evaluator.accuracy(slice, &full_pass_label(disease))?;
    let concepts: Vec<&DiagnosticConcept> = slice.concepts().collect();
    let runs: Vec<Result<f64, EvaluationFailure>> = concepts
        .par_iter()
        .map(|c| evaluator.accuracy(&slice.without(&c.concept_id), &ablation_pass_label(disease, &c.concept_id)))
        .collect();

    let mut entries = Vec::new();
    let mut invalid = Vec::new();
    for (concept, run) in concepts.iter().zip(runs) {
        match run {
            Ok(acc_without) => entries.push(AblationEntry::new(concept.concept_id.clone(), full_accuracy, acc_without)),
            Err(e) => {
                tracing::warn!(concept = %concept.concept_id, error = %e, "ablation pass failed; concept kept");
                invalid.push(e);
            }
        }
    }

    let mut candidates: Vec<(usize, f64)> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == AblationLabel::Negative)
        .map(|(i, e)| (i, e.acc_without - full_accuracy))
        .filter(|(_, gain)| *gain >= -cfg.negative_removal_threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(cfg.max_removals_per_disease);

    let removed_ids: Vec<&str> = candidates.iter().map(|(i, _)| entries[*i].concept_id.as_str()).collect();
    let mut pruned = DiseaseKnowledge::default();
    let mut removed = Vec::new();
    for (list, out) in [(&slice.general, &mut pruned.general), (&slice.rare, &mut pruned.rare)] {
        for concept in list {
            if removed_ids.contains(&concept.concept_id.as_str()) {
                let mut c = concept.clone();
                c.transition(ConceptStatus::RemovedNegative).map_err(KnowledgeError::Invariant)?;
                removed.push(c);
            } else {
                out.push(concept.clone());
            }
        }
    }
    // Keep removal order by harm, not slice order.
    removed.sort_by_key(|c| removed_ids.iter().position(|id| *id == c.concept_id));

    Ok(ImportanceReport {
        disease: disease.clone(),
        full_accuracy,
        entries,
        invalid,
        removed,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConceptCategory;
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    fn slice(n: usize) -> DiseaseKnowledge {
        let mk = |i: usize| DiagnosticConcept {
            concept_id: format!("k{i}"),
            disease: DiseaseId::Pneumonia,
            category: ConceptCategory::General,
            text: format!("concept {i}"),
            source_model: "m".into(),
            status: ConceptStatus::Retained,
            provenance: vec![],
        };
        DiseaseKnowledge {
            general: (0..n).map(mk).collect(),
            rare: vec![],
        }
    }

    #[test]
    fn ties_are_negative_but_threshold_blocks_removal() {
        let eval = |_: &DiseaseKnowledge, _: &str| Ok(0.7);
        let cfg = RefinementConfig {
            negative_removal_threshold: -0.01,
            ..RefinementConfig::default()
        };
        let report = importance_assessment(&DiseaseId::Pneumonia, &slice(4), &eval, &cfg).unwrap();
        assert!(report.entries.iter().all(|e| e.label == AblationLabel::Negative));
        assert!(report.removed.is_empty());
        assert_eq!(report.pruned.len(), 4);
    }

    #[test]
    fn pass_count_is_n_plus_one() {
        let seen = Mutex::new(Vec::new());
        let eval = |_: &DiseaseKnowledge, pass: &str| {
            seen.lock().unwrap().push(pass.to_string());
            Ok(0.5)
        };
        importance_assessment(&DiseaseId::Pneumonia, &slice(6), &eval, &RefinementConfig::default()).unwrap();
        let passes: BTreeSet<_> = seen.into_inner().unwrap().into_iter().collect();
        assert_eq!(passes.len(), 7);
    }

    #[test]
    fn failed_ablation_keeps_concept() {
        let eval = |s: &DiseaseKnowledge, pass: &str| {
            if s.len() == 2 && !s.concepts().any(|c| c.concept_id == "k0") {
                Err(EvaluationFailure {
                    pass: pass.into(),
                    reason: "backend down".into(),
                })
            } else if s.len() == 2 {
                Ok(0.9)
            } else {
                Ok(0.6)
            }
        };
        let report = importance_assessment(&DiseaseId::Pneumonia, &slice(3), &eval, &RefinementConfig::default()).unwrap();
        assert_eq!(report.invalid.len(), 1);
        assert_eq!(report.entries.len(), 2);
        assert!(report.pruned.concepts().any(|c| c.concept_id == "k0"));
        assert_eq!(report.removed.len(), 2);
    }

    #[test]
    fn positives_are_never_pruned() {
        // Removing k1 drops accuracy; everything else is neutral.
        let eval = |s: &DiseaseKnowledge, _: &str| {
            Ok(if s.concepts().any(|c| c.concept_id == "k1") { 0.8 } else { 0.6 })
        };
        let report = importance_assessment(&DiseaseId::Pneumonia, &slice(5), &eval, &RefinementConfig::default()).unwrap();
        let k1 = report.entries.iter().find(|e| e.concept_id == "k1").unwrap();
        assert_eq!(k1.label, AblationLabel::Positive);
        assert!(report.pruned.concepts().any(|c| c.concept_id == "k1"));
        assert_eq!(report.removed.len(), 3);
    }
}
