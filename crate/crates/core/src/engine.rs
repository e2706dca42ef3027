//! Single-agent diagnosis and top-1 accuracy evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::prompt::{build_diagnosis_prompt_with, DiagnosisContext, DIAGNOSIS_PRIMER};
use crate::gateway::{Gateway, GatewayError, GenerationConfig, LlmRequest};
use crate::knowledge::{render_knowledge_set, EvaluationFailure, SliceEvaluator};
use crate::matching::{is_correct, normalize, MatchLevel, MatchRuleSet};
use crate::model::{DiagnosisResult, DiseaseId, DiseaseKnowledge, GroundTruth, KnowledgeSet, LabeledCase, PatientCase};

/// Knowledge injected into the diagnostician prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnowledgeCondition {
    Zero,
    SelfLearned { knowledge: KnowledgeSet },
    Guideline { name: String, text: String },
    FewShot { name: String, exemplars: String },
    ChainOfThought,
}

impl KnowledgeCondition {
    pub fn description(&self) -> String {
        match self {
            KnowledgeCondition::Zero => "zero".into(),
            KnowledgeCondition::SelfLearned { knowledge } => {
                format!("self_learned:{}@v{}", knowledge.model, knowledge.version)
            }
            KnowledgeCondition::Guideline { name, .. } => format!("guideline:{name}"),
            KnowledgeCondition::FewShot { name, .. } => format!("few_shot:{name}"),
            KnowledgeCondition::ChainOfThought => "chain_of_thought".into(),
        }
    }

    /// Rendered knowledge text for the reference slot, if any.
    pub fn reference_text(&self) -> Option<String> {
        match self {
            KnowledgeCondition::SelfLearned { knowledge } => Some(render_knowledge_set(knowledge)),
            _ => None,
        }
    }
}

/// Splits a completion into primary diagnosis and criteria.
///
/// The primary diagnosis is the first non-empty line with any leading
/// "Final Diagnosis:" label removed, cut at the first sentence end, colon,
/// "criteria" mention or numbered-list marker. The result is always a
/// substring of `raw`.
pub fn parse_diagnosis(raw: &str) -> (&str, &str) {
    let mut body = raw.trim_start();
    if let Some(rest) = strip_prefix_ci(body, DIAGNOSIS_PRIMER) {
        body = rest.trim_start();
    }
    let Some(first_line) = body.lines().find(|l| !l.trim().is_empty()) else {
        return ("", "");
    };
    let line_start = offset_in(raw, first_line);
    let mut line = first_line.trim();
    for label in ["final diagnosis:", "primary diagnosis:", "diagnosis:"] {
        if let Some(rest) = strip_prefix_ci(line.trim_start_matches(['*', '#', ' ']), label) {
            line = rest.trim_start_matches(['*', ' ']).trim();
            break;
        }
    }
    let lowered = line.to_lowercase();
    let mut cut = line.len();
    for marker in ["criteria", ":", ";", " - ", "1)", "1."] {
        if let Some(i) = lowered.find(marker) {
            cut = cut.min(i);
        }
    }
    let bytes = line.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'.' && (i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace()) {
            cut = cut.min(i);
            break;
        }
    }
    let primary = line[..cut].trim().trim_matches(['*', ',', '.', '-', ' ']).trim();
    let primary = if primary.is_empty() {
        ""
    } else {
        let start = offset_in(raw, primary);
        &raw[start..start + primary.len()]
    };
    let criteria_start = if primary.is_empty() {
        line_start
    } else {
        offset_in(raw, primary) + primary.len()
    };
    let criteria = raw[criteria_start..].trim_start_matches(['.', ',', ':', ' ', '*']).trim();
    (primary, criteria)
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    let head = text.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &text[prefix.len()..])
}

/// Byte offset of `part` inside `whole`; `part` must be a subslice.
fn offset_in(whole: &str, part: &str) -> usize {
    part.as_ptr() as usize - whole.as_ptr() as usize
}

/// A diagnostician agent bound to one model and gateway.
#[derive(Clone)]
pub struct Diagnostician {
    pub agent_id: String,
    pub generation: GenerationConfig,
    pub gateway: Gateway,
    pub rules: Arc<MatchRuleSet>,
}

impl Diagnostician {
    pub fn new(agent_id: impl Into<String>, generation: GenerationConfig, gateway: Gateway, rules: Arc<MatchRuleSet>) -> Self {
        Self {
            agent_id: agent_id.into(),
            generation,
            gateway,
            rules,
        }
    }

    /// Turns a completion into a result with the primary diagnosis
    /// normalized through the tolerant rules.
    pub fn result_from(&self, case_id: &str, raw: String, latency_seconds: f64) -> DiagnosisResult {
        let (primary, criteria) = parse_diagnosis(&raw);
        let normalized = normalize(primary, &self.rules);
        DiagnosisResult {
            case_id: case_id.to_string(),
            agent_id: self.agent_id.clone(),
            primary_diagnosis_text: primary.to_string(),
            criteria_text: criteria.to_string(),
            normalized,
            latency_seconds,
            raw_text: raw,
        }
    }

    pub fn diagnose_case(
        &self,
        case: &PatientCase,
        condition: &KnowledgeCondition,
        pass: Option<&str>,
    ) -> Result<DiagnosisResult, GatewayError> {
        let reference = condition.reference_text();
        let ctx = match condition {
            KnowledgeCondition::Guideline { text, .. } => DiagnosisContext {
                guidelines: Some(text),
                ..DiagnosisContext::default()
            },
            KnowledgeCondition::FewShot { exemplars, .. } => DiagnosisContext {
                guidelines: Some(exemplars),
                ..DiagnosisContext::default()
            },
            KnowledgeCondition::ChainOfThought => DiagnosisContext {
                chain_of_thought: true,
                ..DiagnosisContext::default()
            },
            _ => DiagnosisContext {
                reference: reference.as_deref(),
                ..DiagnosisContext::default()
            },
        };
        self.diagnose_with(case, &ctx, pass)
    }

    pub fn diagnose_with(
        &self,
        case: &PatientCase,
        ctx: &DiagnosisContext<'_>,
        pass: Option<&str>,
    ) -> Result<DiagnosisResult, GatewayError> {
        let bundle = build_diagnosis_prompt_with(case, ctx);
        let completion = self.gateway.complete(
            LlmRequest::new(&bundle, &self.generation)
                .case(&case.case_id)
                .agent(&self.agent_id)
                .pass(pass),
        )?;
        Ok(self.result_from(&case.case_id, completion.text, completion.latency_seconds))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub truth: DiseaseId,
    pub result: Option<DiagnosisResult>,
    pub error: Option<String>,
    pub correct_exact: bool,
    pub correct_tolerant: bool,
}

impl CaseOutcome {
    pub fn score(truth: &GroundTruth, result: Result<DiagnosisResult, String>, rules: &MatchRuleSet) -> Self {
        match result {
            Ok(r) => {
                let text = r.primary_diagnosis_text.as_str();
                let correct_exact = !text.is_empty() && is_correct(text, &truth.disease, rules, MatchLevel::Exact);
                let correct_tolerant =
                    !text.is_empty() && is_correct(text, &truth.disease, rules, MatchLevel::Tolerant);
                CaseOutcome {
                    case_id: truth.case_id.clone(),
                    truth: truth.disease.clone(),
                    result: Some(r),
                    error: None,
                    correct_exact,
                    correct_tolerant,
                }
            }
            Err(e) => CaseOutcome {
                case_id: truth.case_id.clone(),
                truth: truth.disease.clone(),
                result: None,
                error: Some(e),
                correct_exact: false,
                correct_tolerant: false,
            },
        }
    }

    pub fn correct(&self, level: MatchLevel) -> bool {
        match level {
            MatchLevel::Exact => self.correct_exact,
            MatchLevel::Tolerant => self.correct_tolerant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub condition: String,
    pub model_id: String,
    pub level: MatchLevel,
    pub per_disease: BTreeMap<DiseaseId, DiseaseAccuracy>,
    /// Unweighted mean of the per-disease accuracies.
    pub average: f64,
    pub outcomes: Vec<CaseOutcome>,
    pub mean_latency_seconds: f64,
}

impl EvaluationReport {
    /// Aggregates outcomes. Distractor cases stay in `outcomes` but do not
    /// enter per-disease accuracy.
    pub fn from_outcomes(condition: String, model_id: String, level: MatchLevel, mut outcomes: Vec<CaseOutcome>) -> Self {
        outcomes.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mut per_disease: BTreeMap<DiseaseId, DiseaseAccuracy> = BTreeMap::new();
        for o in outcomes.iter().filter(|o| o.truth.is_canonical()) {
            let entry = per_disease.entry(o.truth.clone()).or_insert(DiseaseAccuracy {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            entry.total += 1;
            if o.correct(level) {
                entry.correct += 1;
            }
        }
        for acc in per_disease.values_mut() {
            acc.accuracy = acc.correct as f64 / acc.total as f64;
        }
        let average = if per_disease.is_empty() {
            0.0
        } else {
            per_disease.values().map(|a| a.accuracy).sum::<f64>() / per_disease.len() as f64
        };
        let latencies: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().map(|r| r.latency_seconds))
            .collect();
        let mean_latency_seconds = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        };
        Self {
            condition,
            model_id,
            level,
            per_disease,
            average,
            outcomes,
            mean_latency_seconds,
        }
    }

    /// Same outcomes scored at another level.
    pub fn at_level(&self, level: MatchLevel) -> Self {
        Self::from_outcomes(self.condition.clone(), self.model_id.clone(), level, self.outcomes.clone())
    }

    /// `disease,condition,accuracy` rows plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("disease,condition,accuracy\n");
        for (d, acc) in &self.per_disease {
            out.push_str(&format!("{d},{},{:.6}\n", self.condition, acc.accuracy));
        }
        out.push_str(&format!("average,{},{:.6}\n", self.condition, self.average));
        out
    }
}

/// Diagnoses every case; failures count as incorrect and are recorded.
pub fn evaluate(
    cases: &[LabeledCase],
    condition: &KnowledgeCondition,
    agent: &Diagnostician,
    level: MatchLevel,
    pass: Option<&str>,
) -> EvaluationReport {
    let outcomes: Vec<CaseOutcome> = cases
        .par_iter()
        .map(|lc| {
            let result = agent.diagnose_case(&lc.case, condition, pass).map_err(|e| {
                tracing::warn!(case = %lc.case.case_id, error = %e, "diagnosis failed; counted incorrect");
                e.to_string()
            });
            CaseOutcome::score(&lc.truth, result, &agent.rules)
        })
        .collect();
    EvaluationReport::from_outcomes(condition.description(), agent.generation.model_id.clone(), level, outcomes)
}

/// Ablation evaluator: diagnoses the target disease's cases with the
/// candidate slice swapped into the agent's full knowledge set.
pub struct KnowledgeSliceEvaluator<'a> {
    pub agent: &'a Diagnostician,
    pub base: &'a KnowledgeSet,
    pub disease: DiseaseId,
    pub cases: Vec<&'a LabeledCase>,
    pub level: MatchLevel,
}

impl SliceEvaluator for KnowledgeSliceEvaluator<'_> {
    fn accuracy(&self, slice: &DiseaseKnowledge, pass: &str) -> Result<f64, EvaluationFailure> {
        let targets: Vec<&LabeledCase> = self.cases.iter().copied().filter(|c| c.truth.disease == self.disease).collect();
        if targets.is_empty() {
            return Err(EvaluationFailure {
                pass: pass.to_string(),
                reason: format!("no evaluation cases for {}", self.disease),
            });
        }
        let mut knowledge = self.base.clone();
        knowledge.diseases.insert(self.disease.clone(), slice.clone());
        let condition = KnowledgeCondition::SelfLearned { knowledge };
        let correct: Result<Vec<bool>, GatewayError> = targets
            .par_iter()
            .map(|lc| {
                let r = self.agent.diagnose_case(&lc.case, &condition, Some(pass))?;
                Ok(is_correct(&r.primary_diagnosis_text, &lc.truth.disease, &self.agent.rules, self.level)
                    && !r.primary_diagnosis_text.is_empty())
            })
            .collect();
        let correct = correct.map_err(|e| EvaluationFailure {
            pass: pass.to_string(),
            reason: e.to_string(),
        })?;
        Ok(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sentence_then_criteria() {
        let raw = "Pericarditis. Criteria: 1) pleuritic pain 2) friction rub";
        let (primary, criteria) = parse_diagnosis(raw);
        assert_eq!(primary, "Pericarditis");
        assert_eq!(criteria, "Criteria: 1) pleuritic pain 2) friction rub");
    }

    #[test]
    fn parses_labeled_and_multiline() {
        let raw = " Final Diagnosis: Acute appendicitis\nDiagnostic criteria:\n1. RLQ pain";
        assert_eq!(parse_diagnosis(raw).0, "Acute appendicitis");
        let raw = "**Acute pancreatitis**\n\n1. Lipase 900";
        assert_eq!(parse_diagnosis(raw).0, "Acute pancreatitis");
        let raw = "Community-acquired pneumonia with diagnostic criteria including fever";
        assert_eq!(parse_diagnosis(raw).0, "Community-acquired pneumonia with diagnostic");
        assert_eq!(parse_diagnosis("Pulmonary embolism 1. Dyspnea").0, "Pulmonary embolism");
    }

    #[test]
    fn empty_completion_has_no_primary() {
        assert_eq!(parse_diagnosis(""), ("", ""));
        assert_eq!(parse_diagnosis("   \n  "), ("", ""));
    }

    #[test]
    fn primary_is_substring_of_raw() {
        for raw in ["Pericarditis. x", "Final Diagnosis and diagnostic criteria: Pneumonia\n1. cough", "Diagnosis: PE; D-dimer"] {
            let (p, _) = parse_diagnosis(raw);
            assert!(raw.contains(p), "{raw:?} -> {p:?}");
        }
        assert_eq!(parse_diagnosis("Diagnosis: PE; D-dimer").0, "PE");
    }
}
