//! Panel consultation: independent diagnoses, consensus checks, bounded
//! discussion rounds and escalation, plus the workflow metrics.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, Embedder};
use crate::engine::{Diagnostician, KnowledgeCondition};
use crate::gateway::prompt::{build_consultation_prompt, derive_seed};
use crate::gateway::{Gateway, GatewayError, GenerationConfig, LlmRequest};
use crate::knowledge::render_knowledge_set;
use crate::matching::{is_correct, MatchLevel, MatchRuleSet};
use crate::model::{
    ConsultationOutcome, ConsultationRecord, DiagnosisResult, DiseaseId, KnowledgeSet, PatientCase, RoundRecord,
    Verdict,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("invalid panel config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub model_id: String,
    /// Knowledge the agent learned for itself; `None` runs zero-shot.
    #[serde(default)]
    pub knowledge: Option<KnowledgeSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub agents: Vec<AgentSpec>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_threshold")]
    pub consensus_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_rounds() -> usize {
    3
}

fn default_threshold() -> f64 {
    0.85
}

impl PanelConfig {
    pub fn new(agents: Vec<AgentSpec>) -> Self {
        Self {
            agents,
            max_rounds: default_max_rounds(),
            consensus_threshold: default_threshold(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PanelError> {
        if self.agents.len() < 2 {
            return Err(PanelError::Config(format!("need at least 2 agents, got {}", self.agents.len())));
        }
        if self.max_rounds == 0 {
            return Err(PanelError::Config("max_rounds must be at least 1".into()));
        }
        if !(self.consensus_threshold > 0.0 && self.consensus_threshold <= 1.0) {
            return Err(PanelError::Config(format!(
                "consensus_threshold {} not in (0, 1]",
                self.consensus_threshold
            )));
        }
        let mut ids: Vec<&str> = self.agents.iter().map(|a| a.agent_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.agents.len() {
            return Err(PanelError::Config("agent ids must be unique".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusCheck {
    pub agreed: bool,
    pub normalized_terms: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Set when every opinion normalized to the same disease.
    pub shared_label: Option<DiseaseId>,
}

/// Term compared across opinions: the normalized disease name when a
/// rule fired, else the opinion's own wording.
fn consensus_term(opinion: &DiagnosisResult) -> String {
    match &opinion.normalized {
        Some(d) => d.display_name().to_lowercase(),
        None => opinion.primary_diagnosis_text.trim().to_string(),
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn evaluate_consensus(opinions: &[DiagnosisResult], threshold: f64, embedder: &dyn Embedder) -> ConsensusCheck {
    let normalized_terms: Vec<String> = opinions.iter().map(consensus_term).collect();
    let n = opinions.len();
    if n < 2 {
        return ConsensusCheck {
            agreed: false,
            normalized_terms,
            matrix: identity(n),
            shared_label: None,
        };
    }
    let first = &opinions[0].normalized;
    if first.is_some() && opinions.iter().all(|o| &o.normalized == first) {
        return ConsensusCheck {
            agreed: true,
            normalized_terms,
            matrix: vec![vec![1.0; n]; n],
            shared_label: first.clone(),
        };
    }
    let vectors: Result<Vec<_>, _> = normalized_terms.iter().map(|t| embedder.embed(t)).collect();
    let vectors = match vectors {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(error = %e, "embedding failed during consensus check; treated as disagreement");
            return ConsensusCheck {
                agreed: false,
                normalized_terms,
                matrix: identity(n),
                shared_label: None,
            };
        }
    };
    let mut matrix = vec![vec![1.0; n]; n];
    let mut agreed = true;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = match cosine(&vectors[i], &vectors[j]) {
                Ok(s) => s,
                Err(e) => {
                    tracing::warn!(error = %e, "cosine failed during consensus check");
                    agreed = false;
                    0.0
                }
            };
            matrix[i][j] = s;
            matrix[j][i] = s;
            if s <= threshold {
                agreed = false;
            }
        }
    }
    ConsensusCheck {
        agreed,
        normalized_terms,
        matrix,
        shared_label: None,
    }
}

struct PanelAgent {
    diagnostician: Diagnostician,
    condition: KnowledgeCondition,
    reference: String,
}

/// A configured panel bound to a gateway and embedder.
pub struct Panel {
    agents: Vec<PanelAgent>,
    max_rounds: usize,
    threshold: f64,
    seed: u64,
    embedder: Arc<dyn Embedder>,
}

impl Panel {
    pub fn new(
        config: &PanelConfig,
        gateway: &Gateway,
        generation: &GenerationConfig,
        rules: Arc<MatchRuleSet>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, PanelError> {
        config.validate()?;
        let agents = config
            .agents
            .iter()
            .map(|spec| {
                let mut gen = generation.clone();
                gen.model_id = spec.model_id.clone();
                let (condition, reference) = match &spec.knowledge {
                    Some(k) => (
                        KnowledgeCondition::SelfLearned { knowledge: k.clone() },
                        render_knowledge_set(k),
                    ),
                    None => (KnowledgeCondition::Zero, String::new()),
                };
                PanelAgent {
                    diagnostician: Diagnostician::new(&spec.agent_id, gen, gateway.clone(), rules.clone()),
                    condition,
                    reference,
                }
            })
            .collect();
        Ok(Self {
            agents,
            max_rounds: config.max_rounds,
            threshold: config.consensus_threshold,
            seed: config.seed,
            embedder,
        })
    }

    pub fn max_rounds(&self) -> usize {
        self.max_rounds
    }

    fn ask(
        &self,
        agent: &PanelAgent,
        case: &PatientCase,
        index: usize,
        previous: Option<&[String]>,
    ) -> Result<DiagnosisResult, GatewayError> {
        let pass = format!("consult/round{index}");
        let Some(previous) = previous else {
            return agent.diagnostician.diagnose_case(case, &agent.condition, Some(&pass));
        };
        let seed = derive_seed(self.seed, &format!("{}:{index}", case.case_id));
        let bundle = build_consultation_prompt(case, &agent.reference, previous, seed)?;
        let d = &agent.diagnostician;
        let completion = d.gateway.complete(
            LlmRequest::new(&bundle, &d.generation)
                .case(&case.case_id)
                .agent(&d.agent_id)
                .pass(Some(&pass)),
        )?;
        Ok(d.result_from(&case.case_id, completion.text, completion.latency_seconds))
    }

    /// All agent calls of one round, concurrently; failed agents drop out.
    fn round(&self, case: &PatientCase, index: usize, previous: Option<&[String]>) -> Vec<DiagnosisResult> {
        self.agents
            .par_iter()
            .map(|agent| self.ask(agent, case, index, previous))
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&self.agents)
            .filter_map(|(r, agent)| match r {
                Ok(r) => Some(r),
                Err(e) => {
                    tracing::warn!(case = %case.case_id, agent = %agent.diagnostician.agent_id, round = index, error = %e, "agent failed");
                    None
                }
            })
            .collect()
    }

    pub fn run_consultation(&self, case: &PatientCase) -> ConsultationRecord {
        let mut rounds: Vec<RoundRecord> = Vec::new();
        let mut previous: Option<Vec<String>> = None;
        for index in 1..=self.max_rounds {
            let mut opinions = self.round(case, index, previous.as_deref());
            if opinions.len() < 2 {
                opinions = self.round(case, index, previous.as_deref());
            }
            if opinions.len() < 2 {
                rounds.push(RoundRecord {
                    index,
                    normalized_terms: opinions.iter().map(consensus_term).collect(),
                    pairwise_similarity: identity(opinions.len()),
                    opinions,
                    agreed: false,
                });
                break;
            }
            let check = evaluate_consensus(&opinions, self.threshold, self.embedder.as_ref());
            let outcome = check.agreed.then(|| match &check.shared_label {
                Some(d) => ConsultationOutcome::Consensus {
                    disease: Some(d.clone()),
                    text: d.canonical_name(),
                    non_canonical: false,
                },
                None => ConsultationOutcome::Consensus {
                    disease: opinions[0].normalized.clone(),
                    text: opinions[0].primary_diagnosis_text.clone(),
                    non_canonical: opinions.iter().any(|o| o.normalized.is_none()),
                },
            });
            previous = Some(opinions.iter().map(|o| o.raw_text.clone()).collect());
            rounds.push(RoundRecord {
                index,
                opinions,
                normalized_terms: check.normalized_terms,
                pairwise_similarity: check.matrix,
                agreed: check.agreed,
            });
            if let Some(outcome) = outcome {
                let final_diagnosis = match &outcome {
                    ConsultationOutcome::Consensus { text, .. } => Some(text.clone()),
                    ConsultationOutcome::Escalated => None,
                };
                return ConsultationRecord {
                    case_id: case.case_id.clone(),
                    rounds,
                    outcome,
                    final_diagnosis,
                    human_verdict: None,
                };
            }
        }
        ConsultationRecord {
            case_id: case.case_id.clone(),
            rounds,
            outcome: ConsultationOutcome::Escalated,
            final_diagnosis: None,
            human_verdict: None,
        }
    }

    /// Consults on many cases concurrently; output follows input order.
    pub fn run_batch(&self, cases: &[&PatientCase]) -> Vec<ConsultationRecord> {
        cases.par_iter().map(|c| self.run_consultation(c)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowMetrics {
    pub run_id: Option<String>,
    pub total: usize,
    /// Cumulative count and rate of consensus by round 1, 2, ...
    pub consensus_counts: Vec<usize>,
    pub consensus_by_round: Vec<f64>,
    pub escalated: usize,
    /// Escalated cases still waiting for a verdict; excluded from
    /// combined accuracy.
    pub pending: usize,
    pub effective_cases: usize,
    pub effective_opinion_rate: f64,
    pub combined_correct: usize,
    pub combined_accuracy: f64,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Workflow metrics over consultation records whose ground truth is
/// known. Verdicts come from `verdicts` or, failing that, the record.
pub fn compute_workflow_metrics(
    records: &[ConsultationRecord],
    verdicts: &BTreeMap<String, Verdict>,
    truths: &BTreeMap<String, DiseaseId>,
    rules: &MatchRuleSet,
    run_id: Option<String>,
) -> WorkflowMetrics {
    let scored: Vec<(&ConsultationRecord, &DiseaseId)> = records
        .iter()
        .filter_map(|r| match truths.get(&r.case_id) {
            Some(t) => Some((r, t)),
            None => {
                tracing::warn!(case = %r.case_id, "no ground truth; record left out of metrics");
                None
            }
        })
        .collect();
    let total = scored.len();
    let max_round = scored.iter().map(|(r, _)| r.rounds.len()).max().unwrap_or(0);
    let consensus_counts: Vec<usize> = (1..=max_round)
        .map(|k| {
            scored
                .iter()
                .filter(|(r, _)| r.consensus_round().is_some_and(|c| c <= k))
                .count()
        })
        .collect();
    let consensus_by_round = consensus_counts.iter().map(|c| rate(*c, total)).collect();

    let mut metrics = WorkflowMetrics {
        run_id,
        total,
        consensus_counts,
        consensus_by_round,
        ..WorkflowMetrics::default()
    };
    for (record, truth) in scored {
        let mentioned = record
            .final_opinions()
            .iter()
            .any(|o| is_correct(&o.primary_diagnosis_text, truth, rules, MatchLevel::Tolerant));
        if mentioned {
            metrics.effective_cases += 1;
        }
        match &record.outcome {
            ConsultationOutcome::Consensus { disease, text, .. } => {
                let correct = match disease {
                    Some(d) => d == truth,
                    None => is_correct(text, truth, rules, MatchLevel::Tolerant),
                };
                if correct {
                    metrics.combined_correct += 1;
                }
            }
            ConsultationOutcome::Escalated => {
                metrics.escalated += 1;
                match verdicts.get(&record.case_id).or(record.human_verdict.as_ref()) {
                    None => metrics.pending += 1,
                    Some(v) => {
                        let correct = match &v.normalized {
                            Some(d) => d == truth,
                            None => is_correct(&v.diagnosis_text, truth, rules, MatchLevel::Tolerant),
                        };
                        if correct {
                            metrics.combined_correct += 1;
                        }
                    }
                }
            }
        }
    }
    metrics.effective_opinion_rate = rate(metrics.effective_cases, total);
    metrics.combined_accuracy = rate(metrics.combined_correct, total - metrics.pending);
    metrics
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FallbackEmbedder;
    use crate::matching::normalize;

    fn opinion(text: &str) -> DiagnosisResult {
        DiagnosisResult {
            case_id: "c".into(),
            agent_id: "a".into(),
            raw_text: text.into(),
            primary_diagnosis_text: text.into(),
            criteria_text: String::new(),
            normalized: normalize(text, &MatchRuleSet::default_rules()),
            latency_seconds: 0.0,
        }
    }

    fn check(texts: &[&str]) -> ConsensusCheck {
        let ops: Vec<_> = texts.iter().map(|t| opinion(t)).collect();
        evaluate_consensus(&ops, 0.85, &FallbackEmbedder::default())
    }

    #[test]
    fn identical_labels_agree() {
        let c = check(&["appendicitis", "acute appendicitis", "appendicitis"]);
        assert!(c.agreed);
        assert_eq!(c.shared_label, Some(DiseaseId::Appendicitis));
        let c = check(&["pericarditis", "pericardial effusion", "pericarditis"]);
        assert!(c.agreed);
        assert_eq!(c.shared_label, Some(DiseaseId::Pericarditis));
    }

    #[test]
    fn distinct_diseases_disagree() {
        let c = check(&["pneumonia", "pulmonary embolism", "pneumonia"]);
        assert!(!c.agreed);
        assert!(c.matrix[0][1] < 0.85);
    }

    #[test]
    fn identical_free_text_agrees_by_embedding() {
        let c = check(&["Myocarditis", "myocarditis", "MYOCARDITIS"]);
        assert!(c.agreed);
        assert_eq!(c.shared_label, None);
    }

    #[test]
    fn panel_size_is_checked() {
        let one = PanelConfig::new(vec![AgentSpec {
            agent_id: "a".into(),
            model_id: "m".into(),
            knowledge: None,
        }]);
        assert!(one.validate().is_err());
    }
}
