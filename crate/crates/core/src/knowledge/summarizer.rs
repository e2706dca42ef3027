//! Summarizer agent: turns correctly diagnosed learning cases into
//! candidate diagnostic concepts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::KnowledgeError;
use crate::gateway::prompt::{build_summarizer_prompt, render_case_input, DIAGNOSIS_PRIMER};
use crate::gateway::{Gateway, GatewayError, GenerationConfig, LlmRequest};
use crate::model::{
    is_not_available, ConceptCategory, ConceptStatus, DiagnosticConcept, DiseaseId, PatientCase, NOT_AVAILABLE,
};

pub const CRITERIA_PER_CATEGORY: usize = 5;

/// Parsed summarizer completion. Both lists hold exactly five entries;
/// rare entries may be the "Not available" filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizerOutput {
    pub disease_text: String,
    pub general: Vec<String>,
    pub rare: Vec<String>,
}

impl SummarizerOutput {
    pub fn usable_general(&self) -> impl Iterator<Item = &str> {
        self.general.iter().map(String::as_str).filter(|t| !is_not_available(t))
    }

    pub fn usable_rare(&self) -> impl Iterator<Item = &str> {
        self.rare.iter().map(String::as_str).filter(|t| !is_not_available(t))
    }

    /// Disease named on the `Disease:` line, when it is one of ours.
    pub fn disease(&self) -> Option<DiseaseId> {
        DiseaseId::parse_canonical(&self.disease_text).ok()
    }
}

fn header_value<'a>(line: &'a str, header: &str) -> Option<&'a str> {
    let trimmed = line.trim().trim_start_matches(['*', '#', ' ']);
    let head = trimmed.get(..header.len())?;
    if head.eq_ignore_ascii_case(header) {
        Some(trimmed[header.len()..].trim_start_matches(['*', ' ']).trim())
    } else {
        None
    }
}

fn numbered_item(line: &str) -> Option<&str> {
    let trimmed = line.trim().trim_start_matches(['-', '*', ' ']);
    let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &trimmed[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim())
}

pub fn parse_summarizer_output(raw: &str) -> Result<SummarizerOutput, KnowledgeError> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        General,
        Rare,
    }
    let mut disease = None;
    let mut general = Vec::new();
    let mut rare = Vec::new();
    let mut section = Section::Preamble;
    let mut saw_general = false;
    let mut saw_rare = false;
    for line in raw.lines() {
        if line.trim().starts_with("[/OUTPUT") {
            break;
        }
        if let Some(value) = header_value(line, "Disease:") {
            if disease.is_some() {
                // A second block means the model repeated itself; keep the first.
                break;
            }
            disease = Some(value.trim_matches(['(', ')']).trim().to_string());
            continue;
        }
        if header_value(line, "General Criteria:").is_some() {
            section = Section::General;
            saw_general = true;
            continue;
        }
        if header_value(line, "Rare Criteria:").is_some() {
            section = Section::Rare;
            saw_rare = true;
            continue;
        }
        if let Some(item) = numbered_item(line) {
            match section {
                Section::General => general.push(item.to_string()),
                Section::Rare => rare.push(item.to_string()),
                Section::Preamble => {}
            }
        }
    }
    let disease_text = disease
        .filter(|d| !d.is_empty())
        .ok_or_else(|| KnowledgeError::FormatViolation("missing `Disease:` line".into()))?;
    if !saw_general {
        return Err(KnowledgeError::FormatViolation("missing `General Criteria:` header".into()));
    }
    if !saw_rare {
        return Err(KnowledgeError::FormatViolation("missing `Rare Criteria:` header".into()));
    }
    if general.len() != CRITERIA_PER_CATEGORY {
        return Err(KnowledgeError::FormatViolation(format!(
            "expected {CRITERIA_PER_CATEGORY} general criteria, found {}",
            general.len()
        )));
    }
    if general.iter().any(|g| g.is_empty() || is_not_available(g)) {
        return Err(KnowledgeError::FormatViolation("general criteria must all be filled".into()));
    }
    if rare.len() > CRITERIA_PER_CATEGORY {
        return Err(KnowledgeError::FormatViolation(format!(
            "expected {CRITERIA_PER_CATEGORY} rare criteria, found {}",
            rare.len()
        )));
    }
    for r in rare.iter_mut() {
        if r.is_empty() {
            *r = NOT_AVAILABLE.to_string();
        }
    }
    while rare.len() < CRITERIA_PER_CATEGORY {
        rare.push(NOT_AVAILABLE.to_string());
    }
    Ok(SummarizerOutput {
        disease_text,
        general,
        rare,
    })
}

/// One correctly diagnosed learning case with the diagnosis record
/// that is shown to the summarizer.
#[derive(Debug, Clone, Copy)]
pub struct LearningExample<'a> {
    pub case: &'a PatientCase,
    pub disease: &'a DiseaseId,
    pub diagnosis_text: &'a str,
}

/// Report handed to the summarizer: case sections followed by the
/// diagnostician's answer.
pub fn learning_report(example: &LearningExample<'_>) -> String {
    format!(
        "{}\n\n{} {}",
        render_case_input(example.case),
        DIAGNOSIS_PRIMER,
        example.diagnosis_text.trim()
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HarvestOutcome {
    pub concepts: Vec<DiagnosticConcept>,
    /// Case ids whose summaries failed to parse twice.
    pub skipped: Vec<String>,
}

/// Runs the summarizer on every learning example and flattens the
/// results into candidate concepts, duplicates included.
pub fn harvest_concepts(
    examples: &[LearningExample<'_>],
    model_id: &str,
    gateway: &Gateway,
    cfg: &GenerationConfig,
) -> Result<HarvestOutcome, GatewayError> {
    let per_case: Vec<Result<Option<SummarizerOutput>, GatewayError>> = examples
        .par_iter()
        .map(|ex| {
            let bundle = build_summarizer_prompt(&learning_report(ex))?;
            for attempt in 0..2 {
                let completion = gateway.complete(
                    LlmRequest::new(&bundle, cfg)
                        .case(&ex.case.case_id)
                        .agent(model_id)
                        .pass(Some("learn")),
                )?;
                match parse_summarizer_output(&completion.text) {
                    Ok(out) => return Ok(Some(out)),
                    Err(e) => tracing::warn!(case = %ex.case.case_id, attempt, error = %e, "summarizer output rejected"),
                }
            }
            Ok(None)
        })
        .collect();

    let mut outcome = HarvestOutcome::default();
    for (ex, result) in examples.iter().zip(per_case) {
        let Some(summary) = result? else {
            outcome.skipped.push(ex.case.case_id.clone());
            continue;
        };
        let lists = [
            (ConceptCategory::General, summary.usable_general().collect::<Vec<_>>()),
            (ConceptCategory::Rare, summary.usable_rare().collect::<Vec<_>>()),
        ];
        for (category, texts) in lists {
            let tag = match category {
                ConceptCategory::General => 'g',
                ConceptCategory::Rare => 'r',
            };
            for (i, text) in texts.into_iter().enumerate() {
                outcome.concepts.push(DiagnosticConcept {
                    concept_id: format!("{model_id}:{}:{}:{tag}{}", ex.disease, ex.case.case_id, i + 1),
                    disease: ex.disease.clone(),
                    category,
                    text: text.to_string(),
                    source_model: model_id.to_string(),
                    status: ConceptStatus::Candidate,
                    provenance: vec![ex.case.case_id.clone()],
                });
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn canned(rare: &[&str]) -> String {
        let mut s = String::from("Disease: Pneumonia\nGeneral Criteria:\n");
        for i in 1..=5 {
            s.push_str(&format!("{i}. General finding {i}\n"));
        }
        s.push_str("Rare Criteria:\n");
        for (i, r) in rare.iter().enumerate() {
            s.push_str(&format!("{}. {r}\n", i + 1));
        }
        s
    }

    #[test]
    fn parses_full_output() {
        let out = parse_summarizer_output(&canned(&["a", "b", "c", "d", "e"])).unwrap();
        assert_eq!(out.disease(), Some(DiseaseId::Pneumonia));
        assert_eq!(out.general.len(), 5);
        assert_eq!(out.usable_rare().count(), 5);
    }

    #[test]
    fn missing_rare_header_is_a_violation() {
        let text = canned(&["a"]).replace("Rare Criteria:", "Uncommon:");
        assert!(matches!(parse_summarizer_output(&text), Err(KnowledgeError::FormatViolation(_))));
    }

    #[test]
    fn not_available_padding_is_dropped() {
        let text = canned(&["a", "b", "c", "Not available", "Not available."]);
        let out = parse_summarizer_output(&text).unwrap();
        assert_eq!(out.rare.len(), 5);
        assert_eq!(out.usable_rare().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn short_rare_list_is_filled_and_long_one_rejected() {
        let out = parse_summarizer_output(&canned(&["a", "b"])).unwrap();
        assert_eq!(out.rare.len(), 5);
        assert_eq!(out.usable_rare().count(), 2);
        assert!(parse_summarizer_output(&canned(&["a", "b", "c", "d", "e", "f"])).is_err());
        let four_general = canned(&["a"]).replace("5. General finding 5\n", "");
        assert!(parse_summarizer_output(&four_general).is_err());
    }
}
