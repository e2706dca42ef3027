//! Shared domain types: diseases, cases, splits, concepts, knowledge sets,
//! diagnosis results and consultation traces.
//!
//! Everything here is an immutable value type with no I/O. Ground-truth
//! labels live in [`GroundTruth`] records that are kept apart from
//! [`PatientCase`], so nothing that assembles a prompt ever holds a label.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("case {case_id}: missing section `{section}`")]
    MissingSection { case_id: String, section: &'static str },
    #[error("unknown disease label `{0}`")]
    UnknownDisease(String),
    #[error("case record has an empty case_id")]
    MissingCaseId,
    #[error("label for case {label_case} does not belong to case {case_id}")]
    LabelMismatch { case_id: String, label_case: String },
}

/// Disease identity: the seven target diseases plus an open variant for
/// distractor cases.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiseaseId {
    Appendicitis,
    Cholecystitis,
    Diverticulitis,
    Pancreatitis,
    Pericarditis,
    Pneumonia,
    PulmonaryEmbolism,
    Other(String),
}

impl DiseaseId {
    pub const CANONICAL: [DiseaseId; 7] = [
        DiseaseId::Appendicitis,
        DiseaseId::Cholecystitis,
        DiseaseId::Diverticulitis,
        DiseaseId::Pancreatitis,
        DiseaseId::Pericarditis,
        DiseaseId::Pneumonia,
        DiseaseId::PulmonaryEmbolism,
    ];

    /// Stable lowercase identifier. `Other` renders as `other:<text>`.
    pub fn canonical_name(&self) -> String {
        match self.static_name() {
            Some(name) => name.to_string(),
            None => match self {
                DiseaseId::Other(text) => format!("other:{text}"),
                _ => unreachable!(),
            },
        }
    }

    fn static_name(&self) -> Option<&'static str> {
        Some(match self {
            DiseaseId::Appendicitis => "appendicitis",
            DiseaseId::Cholecystitis => "cholecystitis",
            DiseaseId::Diverticulitis => "diverticulitis",
            DiseaseId::Pancreatitis => "pancreatitis",
            DiseaseId::Pericarditis => "pericarditis",
            DiseaseId::Pneumonia => "pneumonia",
            DiseaseId::PulmonaryEmbolism => "pulmonary_embolism",
            DiseaseId::Other(_) => return None,
        })
    }

    /// Human-readable name used in rendered knowledge and in embeddings.
    pub fn display_name(&self) -> String {
        match self {
            DiseaseId::PulmonaryEmbolism => "Pulmonary Embolism".to_string(),
            DiseaseId::Other(text) => text.clone(),
            other => {
                let name = other.static_name().unwrap_or_default();
                let mut chars = name.chars();
                match chars.next() {
                    Some(first) => first.to_uppercase().chain(chars).collect(),
                    None => String::new(),
                }
            }
        }
    }

    pub fn is_canonical(&self) -> bool {
        !matches!(self, DiseaseId::Other(_))
    }

    /// Parses a canonical name. Accepts case and space/underscore variants
    /// ("Pulmonary Embolism") and the `other:<text>` form.
    pub fn parse_canonical(raw: &str) -> Result<DiseaseId, ModelError> {
        let trimmed = raw.trim();
        if let Some(rest) = trimmed.strip_prefix("other:") {
            let text = rest.trim();
            if text.is_empty() {
                return Err(ModelError::UnknownDisease(raw.to_string()));
            }
            return Ok(DiseaseId::Other(text.to_string()));
        }
        let key: String = trimmed
            .to_lowercase()
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        DiseaseId::CANONICAL
            .iter()
            .find(|d| d.static_name() == Some(key.as_str()))
            .cloned()
            .ok_or_else(|| ModelError::UnknownDisease(raw.to_string()))
    }
}

impl fmt::Display for DiseaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name())
    }
}

impl FromStr for DiseaseId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DiseaseId::parse_canonical(s)
    }
}

impl Serialize for DiseaseId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for DiseaseId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        DiseaseId::parse_canonical(&raw).map_err(serde::de::Error::custom)
    }
}

/// One raw case record as it appears in a `cases/*.jsonl` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CaseRecord {
    pub case_id: String,
    #[serde(default)]
    pub hpi: String,
    #[serde(default)]
    pub physical_exam: String,
    #[serde(default)]
    pub labs: String,
    #[serde(default)]
    pub radiology: String,
}

/// One label sidecar record. `distractor` marks reader-study cases whose
/// disease lies outside the canonical set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub case_id: String,
    pub disease: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distractor: bool,
}

/// A validated, label-free patient case. This is the only case type the
/// prompt builders accept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientCase {
    pub case_id: String,
    pub hpi: String,
    pub physical_exam: String,
    pub labs: String,
    pub radiology: String,
}

impl PatientCase {
    /// The four sections in prompt order, with their headings.
    pub fn sections(&self) -> [(&'static str, &str); 4] {
        [
            ("History of Present Illness", self.hpi.as_str()),
            ("Physical Examination", self.physical_exam.as_str()),
            ("Laboratory Results", self.labs.as_str()),
            ("Radiology Reports", self.radiology.as_str()),
        ]
    }
}

/// Ground truth for one case, held out of band.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub case_id: String,
    pub disease: DiseaseId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCase {
    pub case: PatientCase,
    pub truth: GroundTruth,
}

/// Validates a raw record and its label sidecar.
pub fn validate_case(raw: &CaseRecord, label: &LabelRecord) -> Result<LabeledCase, ModelError> {
    let case_id = raw.case_id.trim();
    if case_id.is_empty() {
        return Err(ModelError::MissingCaseId);
    }
    if label.case_id.trim() != case_id {
        return Err(ModelError::LabelMismatch {
            case_id: case_id.to_string(),
            label_case: label.case_id.clone(),
        });
    }
    let sections = [
        ("hpi", &raw.hpi),
        ("physical_exam", &raw.physical_exam),
        ("labs", &raw.labs),
        ("radiology", &raw.radiology),
    ];
    for (name, text) in sections {
        if text.trim().is_empty() {
            return Err(ModelError::MissingSection {
                case_id: case_id.to_string(),
                section: name,
            });
        }
    }
    let disease = match DiseaseId::parse_canonical(&label.disease) {
        Ok(d) => d,
        Err(_) if label.distractor && !label.disease.trim().is_empty() => {
            DiseaseId::Other(label.disease.trim().to_string())
        }
        Err(e) => return Err(e),
    };
    Ok(LabeledCase {
        case: PatientCase {
            case_id: case_id.to_string(),
            hpi: raw.hpi.clone(),
            physical_exam: raw.physical_exam.clone(),
            labs: raw.labs.clone(),
            radiology: raw.radiology.clone(),
        },
        truth: GroundTruth {
            case_id: case_id.to_string(),
            disease,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", content = "model", rename_all = "snake_case")]
pub enum SplitRole {
    Sampling,
    Learning(String),
    Test,
}

/// Case partition into sampling (the union of per-model learning sets)
/// and test cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSplit {
    pub name: String,
    /// Per model, per disease, the learning case ids in sampled order.
    pub learning: BTreeMap<String, BTreeMap<DiseaseId, Vec<String>>>,
    pub sampling: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Learning quota requested per disease.
    pub quotas: BTreeMap<DiseaseId, usize>,
}

impl DatasetSplit {
    pub fn roles(&self, case_id: &str) -> Vec<SplitRole> {
        let mut roles = Vec::new();
        if self.sampling.contains(case_id) {
            roles.push(SplitRole::Sampling);
        }
        for (model, per_disease) in &self.learning {
            if per_disease.values().any(|ids| ids.iter().any(|c| c == case_id)) {
                roles.push(SplitRole::Learning(model.clone()));
            }
        }
        if self.test.contains(case_id) {
            roles.push(SplitRole::Test);
        }
        roles
    }

    pub fn learning_cases(&self, model_id: &str, disease: &DiseaseId) -> &[String] {
        self.learning
            .get(model_id)
            .and_then(|m| m.get(disease))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Checks learning ⊆ sampling and sampling ∩ test = ∅.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (model, per_disease) in &self.learning {
            for (disease, ids) in per_disease {
                let unique: BTreeSet<_> = ids.iter().collect();
                if unique.len() != ids.len() {
                    return Err(format!("duplicate learning case for {model}/{disease}"));
                }
                if let Some(id) = ids.iter().find(|id| !self.sampling.contains(*id)) {
                    return Err(format!("learning case {id} of {model} missing from sampling set"));
                }
            }
        }
        if let Some(id) = self.sampling.intersection(&self.test).next() {
            return Err(format!("case {id} is in both sampling and test sets"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptCategory {
    General,
    Rare,
}

impl ConceptCategory {
    pub fn heading(self) -> &'static str {
        match self {
            ConceptCategory::General => "General Criteria:",
            ConceptCategory::Rare => "Rare Criteria:",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptStatus {
    Candidate,
    Retained,
    RemovedNegative,
}

pub const NOT_AVAILABLE: &str = "Not available";

/// Says whether `text` is the summarizer's "Not available" filler.
pub fn is_not_available(text: &str) -> bool {
    text.trim()
        .trim_end_matches('.')
        .trim_matches('"')
        .eq_ignore_ascii_case(NOT_AVAILABLE)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticConcept {
    pub concept_id: String,
    pub disease: DiseaseId,
    pub category: ConceptCategory,
    pub text: String,
    pub source_model: String,
    pub status: ConceptStatus,
    pub provenance: Vec<String>,
}

impl DiagnosticConcept {
    /// Moves the concept to `next`, rejecting transitions other than
    /// candidate→retained and candidate/retained→removed_negative.
    pub fn transition(&mut self, next: ConceptStatus) -> Result<(), String> {
        use ConceptStatus::*;
        let allowed = matches!(
            (self.status, next),
            (Candidate, Retained) | (Candidate, RemovedNegative) | (Retained, RemovedNegative)
        );
        if !allowed {
            return Err(format!(
                "concept {}: illegal transition {:?} -> {:?}",
                self.concept_id, self.status, next
            ));
        }
        self.status = next;
        Ok(())
    }

    /// Earliest provenance case id, used as a tie-break key.
    pub fn first_provenance(&self) -> &str {
        self.provenance.iter().min().map(String::as_str).unwrap_or("")
    }
}

/// Retained concepts for one disease, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DiseaseKnowledge {
    #[serde(default)]
    pub general: Vec<DiagnosticConcept>,
    #[serde(default)]
    pub rare: Vec<DiagnosticConcept>,
}

impl DiseaseKnowledge {
    pub fn len(&self) -> usize {
        self.general.len() + self.rare.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All concepts, general first.
    pub fn concepts(&self) -> impl Iterator<Item = &DiagnosticConcept> {
        self.general.iter().chain(self.rare.iter())
    }

    /// Copy of the slice with the given concept removed.
    pub fn without(&self, concept_id: &str) -> DiseaseKnowledge {
        DiseaseKnowledge {
            general: self.general.iter().filter(|c| c.concept_id != concept_id).cloned().collect(),
            rare: self.rare.iter().filter(|c| c.concept_id != concept_id).cloned().collect(),
        }
    }
}

/// Self-learned knowledge of one model across diseases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSet {
    pub model: String,
    pub version: u32,
    pub diseases: BTreeMap<DiseaseId, DiseaseKnowledge>,
}

impl KnowledgeSet {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            version: 1,
            diseases: BTreeMap::new(),
        }
    }

    /// Every referenced concept must be retained.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (disease, slice) in &self.diseases {
            for concept in slice.concepts() {
                if concept.status != ConceptStatus::Retained {
                    return Err(format!(
                        "concept {} under {disease} has status {:?}",
                        concept.concept_id, concept.status
                    ));
                }
                if &concept.disease != disease {
                    return Err(format!("concept {} filed under {disease}", concept.concept_id));
                }
            }
        }
        Ok(())
    }

    /// Next version with the given slices replaced.
    pub fn refined(&self, replacements: BTreeMap<DiseaseId, DiseaseKnowledge>) -> KnowledgeSet {
        let mut next = self.clone();
        next.version = self.version + 1;
        for (disease, slice) in replacements {
            next.diseases.insert(disease, slice);
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub case_id: String,
    pub agent_id: String,
    pub raw_text: String,
    pub primary_diagnosis_text: String,
    pub criteria_text: String,
    pub normalized: Option<DiseaseId>,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationLabel {
    Positive,
    Negative,
}

/// Accuracy with and without one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub concept_id: String,
    pub acc_with: f64,
    pub acc_without: f64,
    pub delta: f64,
    pub label: AblationLabel,
}

impl AblationEntry {
    pub fn new(concept_id: impl Into<String>, acc_with: f64, acc_without: f64) -> Self {
        let delta = acc_with - acc_without;
        let label = if delta > 0.0 {
            AblationLabel::Positive
        } else {
            AblationLabel::Negative
        };
        Self {
            concept_id: concept_id.into(),
            acc_with,
            acc_without,
            delta,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: usize,
    pub opinions: Vec<DiagnosisResult>,
    pub normalized_terms: Vec<String>,
    pub pairwise_similarity: Vec<Vec<f64>>,
    pub agreed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsultationOutcome {
    Consensus {
        disease: Option<DiseaseId>,
        text: String,
        non_canonical: bool,
    },
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsultationRecord {
    pub case_id: String,
    pub rounds: Vec<RoundRecord>,
    pub outcome: ConsultationOutcome,
    pub final_diagnosis: Option<String>,
    pub human_verdict: Option<Verdict>,
}

impl ConsultationRecord {
    pub fn is_escalated(&self) -> bool {
        matches!(self.outcome, ConsultationOutcome::Escalated)
    }

    /// Round index at which consensus was reached.
    pub fn consensus_round(&self) -> Option<usize> {
        match self.outcome {
            ConsultationOutcome::Consensus { .. } => self.rounds.last().map(|r| r.index),
            ConsultationOutcome::Escalated => None,
        }
    }

    /// Opinions of the last round: the effective-opinion payload.
    pub fn final_opinions(&self) -> &[DiagnosisResult] {
        self.rounds.last().map(|r| r.opinions.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub physician_id: String,
    pub diagnosis_text: String,
    pub normalized: Option<DiseaseId>,
    pub submitted_at: DateTime<Utc>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(labs: &str) -> CaseRecord {
        CaseRecord {
            case_id: "c1".into(),
            hpi: "Cough and fever for three days.".into(),
            physical_exam: "Crackles at the right base.".into(),
            labs: labs.into(),
            radiology: "Right lower lobe consolidation.".into(),
        }
    }

    fn label(disease: &str, distractor: bool) -> LabelRecord {
        LabelRecord {
            case_id: "c1".into(),
            disease: disease.into(),
            distractor,
        }
    }

    #[test]
    fn well_formed_case_validates() {
        let lc = validate_case(&record("WBC 15"), &label("pneumonia", false)).unwrap();
        assert_eq!(lc.truth.disease, DiseaseId::Pneumonia);
        assert_eq!(lc.case.case_id, "c1");
    }

    #[test]
    fn missing_labs_is_rejected() {
        let err = validate_case(&record("  "), &label("pneumonia", false)).unwrap_err();
        assert!(matches!(err, ModelError::MissingSection { section: "labs", .. }));
    }

    #[test]
    fn distractor_label_maps_to_other() {
        let lc = validate_case(&record("WBC 9"), &label("gastritis", true)).unwrap();
        assert_eq!(lc.truth.disease, DiseaseId::Other("gastritis".into()));
        let err = validate_case(&record("WBC 9"), &label("gastritis", false)).unwrap_err();
        assert_eq!(err, ModelError::UnknownDisease("gastritis".into()));
    }

    #[test]
    fn disease_names_round_trip() {
        for d in DiseaseId::CANONICAL {
            assert_eq!(DiseaseId::parse_canonical(&d.canonical_name()).unwrap(), d);
            assert_eq!(DiseaseId::parse_canonical(&d.display_name()).unwrap(), d);
        }
        let other = DiseaseId::Other("gastritis".into());
        assert_eq!(DiseaseId::parse_canonical(&other.canonical_name()).unwrap(), other);
        let json = serde_json::to_string(&DiseaseId::PulmonaryEmbolism).unwrap();
        assert_eq!(json, "\"pulmonary_embolism\"");
    }

    #[test]
    fn concept_status_transitions() {
        let mut c = DiagnosticConcept {
            concept_id: "k".into(),
            disease: DiseaseId::Pneumonia,
            category: ConceptCategory::General,
            text: "Fever".into(),
            source_model: "m".into(),
            status: ConceptStatus::Candidate,
            provenance: vec!["c1".into()],
        };
        c.transition(ConceptStatus::Retained).unwrap();
        assert!(c.transition(ConceptStatus::Candidate).is_err());
        c.transition(ConceptStatus::RemovedNegative).unwrap();
        assert!(c.transition(ConceptStatus::Retained).is_err());
    }

    #[test]
    fn ablation_labels_follow_delta_sign() {
        assert_eq!(AblationEntry::new("a", 0.84, 0.82).label, AblationLabel::Positive);
        assert_eq!(AblationEntry::new("a", 0.84, 0.84).label, AblationLabel::Negative);
        let e = AblationEntry::new("a", 0.84, 0.856);
        assert_eq!(e.label, AblationLabel::Negative);
        assert_eq!(e.delta, 0.84 - 0.856);
    }

    #[test]
    fn split_invariants_detect_overlap() {
        let mut split = DatasetSplit::default();
        split
            .learning
            .entry("m".into())
            .or_default()
            .insert(DiseaseId::Pneumonia, vec!["a".into()]);
        split.sampling.insert("a".into());
        split.test.insert("b".into());
        split.check_invariants().unwrap();
        assert_eq!(split.roles("a"), vec![SplitRole::Sampling, SplitRole::Learning("m".into())]);
        split.test.insert("a".into());
        assert!(split.check_invariants().is_err());
    }
}
