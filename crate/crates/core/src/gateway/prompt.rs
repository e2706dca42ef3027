//! Prompt templates for the diagnostician, summarizer, consultation and
//! guideline-condensation agents.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DiseaseId, PatientCase};

pub const DIAGNOSIS_PRIMER: &str = "Final Diagnosis and diagnostic criteria:";

const DIAGNOSTICIAN_SYSTEM: &str = "You are a medical artificial intelligence assistant. You directly diagnose patients based on the provided information to assist a doctor in his clinical duties. Your goal is to correctly diagnose the patient.  Based on the provided information you will provide the diagnostic criteria of the most confident pathology. Don't write any further information. Provide a single diagnosis along with the most relevant diagnostic criteria.";

const DIAGNOSTICIAN_INSTRUCTION: &str =
    "Provide the most relevant diagnostic criteria of the following patient with no more other information.";

const CONSULTANT_SYSTEM: &str = "You are a senior medical artificial intelligence assistant. Your primary duty is to assist a doctor by verifying previous diagnostic opinions and forming an independent diagnosis based on the patient's complete situation. Based on the provided information you will provide the diagnostic criteria of the most confident pathology. Don't write any further information. Provide a single diagnosis along with the most relevant diagnostic criteria.";

const CONSULTATION_CAUTION: &str = "The provided diagnostic results are for reference only. Given that prior opinions may be inconsistent, you must conduct an impartial evaluation and not simply echo others' findings. ";

pub const PAST_RESULTS_MARKER: &str = "@@@ Past Diagnosis Results @@@";

const SUMMARIZER_ROLE: &str = "[Role]
You are a medical artificial intelligence assistant. Your task is to review the given report and summarize the diagnostic evidence for the identified disease.
[/Role]";

const SUMMARIZER_INSTRUCTIONS: &str = "[INSTRUCTIONS]
1. Analyze the report and identify the main disease.
2. Summarize the diagnostic evidence into two structured categories:
   - General Criteria: The 5 most relevant common clinical manifestations and diagnostic findings typically associated with the disease.
   - Rare Criteria: The 5 most relevant specific or unique clinical manifestations and diagnostic findings observed in a subset of patients with the disease.
3. Only one response is required. Do not repeat or provide multiple outputs.
4. Ensure the summarized content is specific, concise, and directly extracted from the input report. Avoid adding explanations, references, or unnecessary details.
5. Strictly adhere to the specified output format.
[/INSTRUCTIONS]";

const SUMMARIZER_FORMAT: &str = "[OUTPUT FORMAT]
Disease: (Identified disease)
General Criteria:
1. (Most relevant common clinical manifestation or diagnostic finding)
2. (Most relevant common clinical manifestation or diagnostic finding)
3. (Most relevant common clinical manifestation or diagnostic finding)
4. (Most relevant common clinical manifestation or diagnostic finding)
5. (Most relevant common clinical manifestation or diagnostic finding)
Rare Criteria:
1. (Most relevant specific or unique clinical manifestation or diagnostic finding)
2. (Most relevant specific or unique clinical manifestation or diagnostic finding)
3. (Most relevant specific or unique clinical manifestation or diagnostic finding)
4. (Most relevant specific or unique clinical manifestation or diagnostic finding)
5. (Most relevant specific or unique clinical manifestation or diagnostic finding)
[/OUTPUT FORMAT]

[REQUIEMENTS]
- Each category must contain exactly 5 summarized criteria. If fewer than 5 rare criteria are available, stat \"Not available\" for the remaining items.
- Focus solely on diagnostic evidence relevant to clinical practice, directly extracted from the report.
- Ensure the response is generated only once, with no repetitions or additional outputs.
Your response must strictly adhere to the above format. Any repeated or additional outputs will be considered a deviation.
[/REQUIEMENTS]
";

const SUMMARIZER_PRIMER: &str = "[OUTPUT]";

const GUIDELINE_SYSTEM: &str = "You are a medical AI assistant. Your task is to summarize the relevant diagnostic criteria for diseases from professional diagnostic guidelines.";

const GUIDELINE_REQUIREMENTS: &str = "requirement:
1. These diagnostic criteria must be explicitly mentioned in the guidelines, which can be mentioned in the pictures or in the text section. Please do not include your knowledge.
2. The diagnostic criteria for summarizing require each disease to be output separately in the same format, which can include physical examination, blood examination, imaging examination, etc. If there is no diagnostic basis or diagnostic feature for any part of it, the corresponding content may not be output.
3. Require semantic conciseness, only outputting the most relevant content for diagnosis, without additional output.
4. You can adjust the order of the content appropriately, or add some related words or dots to list the diagnostic criteria or features, but you cannot output content that is not mentioned in the guide.";

const COT_PREAMBLE: &str = "Think through the findings step by step before committing to a diagnosis, then state the final diagnosis first.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt input `{0}` is empty")]
    EmptyInput(&'static str),
    #[error("consultation prompt needs at least one past opinion")]
    NoPastOpinions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Diagnosis,
    Summarizer,
    Consultation,
    GuidelineCondensation,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::Diagnosis => "diagnosis",
            TemplateKind::Summarizer => "summarizer",
            TemplateKind::Consultation => "consultation",
            TemplateKind::GuidelineCondensation => "guideline_condensation",
        })
    }
}

/// How role boundaries are spelled for a given model family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagDialect {
    pub name: String,
    pub system_start: String,
    pub system_end: String,
    pub user_start: String,
    pub user_end: String,
    pub ai_start: String,
}

impl TagDialect {
    pub fn llama3() -> Self {
        Self {
            name: "llama3".into(),
            system_start: "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\n".into(),
            system_end: "<|eot_id|>".into(),
            user_start: "<|start_header_id|>user<|end_header_id|>\n\n".into(),
            user_end: "<|eot_id|>".into(),
            ai_start: "<|start_header_id|>assistant<|end_header_id|>\n\n".into(),
        }
    }

    pub fn chatml() -> Self {
        Self {
            name: "chatml".into(),
            system_start: "<|im_start|>system\n".into(),
            system_end: "<|im_end|>\n".into(),
            user_start: "<|im_start|>user\n".into(),
            user_end: "<|im_end|>\n".into(),
            ai_start: "<|im_start|>assistant\n".into(),
        }
    }

    /// Bracketed plain-text tags, readable in logs.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            system_start: "[SYSTEM]\n".into(),
            system_end: "\n[/SYSTEM]\n".into(),
            user_start: "[USER]\n".into(),
            user_end: "\n[/USER]\n".into(),
            ai_start: "[ASSISTANT]\n".into(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "llama3" => Some(Self::llama3()),
            "chatml" => Some(Self::chatml()),
            "plain" => Some(Self::plain()),
            _ => None,
        }
    }
}

impl Default for TagDialect {
    fn default() -> Self {
        Self::plain()
    }
}

/// A fully assembled prompt. `slots` records every injected value by
/// template slot, which is what the leakage scan inspects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: TemplateKind,
    pub system_text: String,
    pub user_text: String,
    pub assistant_prefix: String,
    pub tag_dialect: TagDialect,
    pub slots: BTreeMap<String, String>,
}

impl PromptBundle {
    pub fn render(&self) -> String {
        let d = &self.tag_dialect;
        let mut out = String::with_capacity(
            self.system_text.len() + self.user_text.len() + self.assistant_prefix.len() + 256,
        );
        out.push_str(&d.system_start);
        out.push_str(&self.system_text);
        out.push_str(&d.system_end);
        out.push_str(&d.user_start);
        out.push_str(&self.user_text);
        out.push_str(&d.user_end);
        out.push_str(&d.ai_start);
        out.push_str(&self.assistant_prefix);
        out
    }

    /// SHA-256 of the rendered bytes, hex encoded.
    pub fn hash(&self) -> String {
        content_hash(&self.render())
    }

    pub fn with_dialect(mut self, dialect: TagDialect) -> Self {
        self.tag_dialect = dialect;
        self
    }
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stable sub-seed for a labelled use of a base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{base}:{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Case sections in the fixed order HPI, exam, labs, radiology.
pub fn render_case_input(case: &PatientCase) -> String {
    case.sections()
        .iter()
        .map(|(heading, text)| format!("{heading}:\n{}", text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Extra context for the diagnostician template beyond the case itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiagnosisContext<'a> {
    /// Guideline or few-shot exemplar text (`{diagnostic_guidelines}` slot).
    pub guidelines: Option<&'a str>,
    /// Self-learned knowledge (`{diagnostic_reference}` slot).
    pub reference: Option<&'a str>,
    pub chain_of_thought: bool,
}

pub fn build_diagnosis_prompt(case: &PatientCase, knowledge: Option<&str>) -> PromptBundle {
    build_diagnosis_prompt_with(
        case,
        &DiagnosisContext {
            reference: knowledge,
            ..DiagnosisContext::default()
        },
    )
}

pub fn build_diagnosis_prompt_with(case: &PatientCase, ctx: &DiagnosisContext<'_>) -> PromptBundle {
    let input = render_case_input(case);
    let guidelines = ctx.guidelines.map(str::trim).unwrap_or("");
    let reference = ctx.reference.map(str::trim).unwrap_or("");
    let mut system_text = DIAGNOSTICIAN_SYSTEM.to_string();
    if ctx.chain_of_thought {
        system_text.push(' ');
        system_text.push_str(COT_PREAMBLE);
    }
    let mut user_text = String::from(DIAGNOSTICIAN_INSTRUCTION);
    for block in [guidelines, reference] {
        if !block.is_empty() {
            user_text.push('\n');
            user_text.push_str(block);
        }
    }
    user_text.push('\n');
    user_text.push_str(&input);

    let mut slots = BTreeMap::new();
    slots.insert("diagnostic_guidelines".to_string(), guidelines.to_string());
    slots.insert("diagnostic_reference".to_string(), reference.to_string());
    slots.insert("input".to_string(), input);
    PromptBundle {
        kind: TemplateKind::Diagnosis,
        system_text,
        user_text,
        assistant_prefix: DIAGNOSIS_PRIMER.to_string(),
        tag_dialect: TagDialect::default(),
        slots,
    }
}

pub fn build_summarizer_prompt(correct_diag_result: &str) -> Result<PromptBundle, PromptError> {
    let report = correct_diag_result.trim();
    if report.is_empty() {
        return Err(PromptError::EmptyInput("correct_diag_result"));
    }
    let user_text = format!(
        "{SUMMARIZER_INSTRUCTIONS}\n\n[REPORT]\n{report}\n[/REPORT]\n\n{SUMMARIZER_FORMAT}\n"
    );
    let mut slots = BTreeMap::new();
    slots.insert("correct_diag_result".to_string(), report.to_string());
    Ok(PromptBundle {
        kind: TemplateKind::Summarizer,
        system_text: SUMMARIZER_ROLE.to_string(),
        user_text,
        assistant_prefix: SUMMARIZER_PRIMER.to_string(),
        tag_dialect: TagDialect::default(),
        slots,
    })
}

/// Strips agent identity from past opinions: a seeded shuffle, then
/// "Opinion 1..n" labels.
pub fn anonymize_opinions(past: &[String], seed: u64) -> String {
    let mut order: Vec<&String> = past.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .iter()
        .enumerate()
        .map(|(i, text)| format!("Opinion {}:\n{}", i + 1, text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_consultation_prompt(
    case: &PatientCase,
    knowledge: &str,
    past: &[String],
    seed: u64,
) -> Result<PromptBundle, PromptError> {
    if past.is_empty() {
        return Err(PromptError::NoPastOpinions);
    }
    let input = render_case_input(case);
    let reference = knowledge.trim();
    let past_block = anonymize_opinions(past, seed);
    let mut user_text = String::from(DIAGNOSTICIAN_INSTRUCTION);
    if !reference.is_empty() {
        user_text.push('\n');
        user_text.push_str(reference);
    }
    user_text.push('\n');
    user_text.push_str(&input);
    user_text.push_str("\n\n");
    user_text.push_str(CONSULTATION_CAUTION);
    user_text.push('\n');
    user_text.push_str(PAST_RESULTS_MARKER);
    user_text.push('\n');
    user_text.push_str(&past_block);
    user_text.push_str("\n\n");

    let mut slots = BTreeMap::new();
    slots.insert("diagnostic_reference".to_string(), reference.to_string());
    slots.insert("input".to_string(), input);
    slots.insert("past_diagnosis_results".to_string(), past_block);
    Ok(PromptBundle {
        kind: TemplateKind::Consultation,
        system_text: CONSULTANT_SYSTEM.to_string(),
        user_text,
        assistant_prefix: DIAGNOSIS_PRIMER.to_string(),
        tag_dialect: TagDialect::default(),
        slots,
    })
}

fn join_names(diseases: &[DiseaseId]) -> String {
    let names: Vec<String> = diseases.iter().map(|d| d.display_name().to_lowercase()).collect();
    match names.len() {
        0 => "the target diseases".to_string(),
        1 => names[0].clone(),
        2 => format!("{} and {}", names[0], names[1]),
        n => format!("{}, and {}", names[..n - 1].join(", "), names[n - 1]),
    }
}

pub fn build_guideline_condensation_prompt(
    guideline_text: &str,
    diseases: &[DiseaseId],
) -> Result<PromptBundle, PromptError> {
    let document = guideline_text.trim();
    if document.is_empty() {
        return Err(PromptError::EmptyInput("guideline_text"));
    }
    let user_text = format!(
        "I will provide you with diagnostic guidelines for {}, and you will need to summarize the corresponding diagnostic criteria or features from these guidelines.\n\n{GUIDELINE_REQUIREMENTS}\n\n{document}",
        join_names(diseases)
    );
    let mut slots = BTreeMap::new();
    slots.insert("guideline_text".to_string(), document.to_string());
    Ok(PromptBundle {
        kind: TemplateKind::GuidelineCondensation,
        system_text: GUIDELINE_SYSTEM.to_string(),
        user_text,
        assistant_prefix: String::new(),
        tag_dialect: TagDialect::default(),
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case() -> PatientCase {
        PatientCase {
            case_id: "c1".into(),
            hpi: "HPI text".into(),
            physical_exam: "EXAM text".into(),
            labs: "LAB text".into(),
            radiology: "RAD text".into(),
        }
    }

    #[test]
    fn zero_knowledge_bundle_has_empty_reference_slot() {
        let b = build_diagnosis_prompt(&case(), None);
        assert_eq!(b.slots["diagnostic_reference"], "");
        assert_eq!(b.assistant_prefix, "Final Diagnosis and diagnostic criteria:");
        let user = &b.user_text;
        let order: Vec<usize> = ["HPI text", "EXAM text", "LAB text", "RAD text"]
            .iter()
            .map(|s| user.find(s).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn knowledge_precedes_case_sections() {
        let b = build_diagnosis_prompt(&case(), Some("Pneumonia\nGeneral Criteria:\n1. Fever"));
        let k = b.user_text.find("General Criteria:").unwrap();
        assert!(k < b.user_text.find("HPI text").unwrap());
        assert_eq!(build_diagnosis_prompt(&case(), Some("x")).render(), build_diagnosis_prompt(&case(), Some("x")).render());
    }

    #[test]
    fn summarizer_embeds_report() {
        let b = build_summarizer_prompt("Patient had fever.").unwrap();
        assert!(b.user_text.contains("[REPORT]\nPatient had fever.\n[/REPORT]"));
        assert!(b.user_text.contains("Summarize the diagnostic evidence into two structured categories"));
        assert_eq!(build_summarizer_prompt("  "), Err(PromptError::EmptyInput("correct_diag_result")));
        assert_eq!(build_summarizer_prompt("r").unwrap(), build_summarizer_prompt("r").unwrap());
    }

    #[test]
    fn consultation_prompt_anonymizes_and_is_seeded() {
        let past = vec![
            "agent-a says Pneumonia".to_string(),
            "agent-b says Pulmonary embolism".to_string(),
            "agent-c says Pericarditis".to_string(),
        ];
        let b = build_consultation_prompt(&case(), "", &past, 7).unwrap();
        assert!(b.user_text.contains("must conduct an impartial evaluation"));
        assert!(b.user_text.contains(PAST_RESULTS_MARKER));
        for i in 1..=3 {
            assert!(b.user_text.contains(&format!("Opinion {i}:")));
        }
        assert!(!b.user_text.contains("Opinion 4:"));
        let again = build_consultation_prompt(&case(), "", &past, 7).unwrap();
        assert_eq!(b.render(), again.render());
        assert_eq!(
            build_consultation_prompt(&case(), "", &[], 7),
            Err(PromptError::NoPastOpinions)
        );
    }

    #[test]
    fn guideline_prompt() {
        let b = build_guideline_condensation_prompt(
            "WSES 2020: CT is recommended...",
            &DiseaseId::CANONICAL[..4],
        )
        .unwrap();
        assert!(b.system_text.contains("summarize the relevant diagnostic criteria"));
        assert!(b.user_text.contains("Please do not include your knowledge"));
        assert!(b.user_text.contains("appendicitis, cholecystitis, diverticulitis, and pancreatitis"));
        assert!(b.user_text.ends_with("WSES 2020: CT is recommended..."));
        assert!(build_guideline_condensation_prompt("", &[]).is_err());
    }

    #[test]
    fn dialects_change_bytes_not_content() {
        let b = build_diagnosis_prompt(&case(), None);
        let llama = b.clone().with_dialect(TagDialect::llama3()).render();
        assert!(llama.starts_with("<|begin_of_text|>"));
        assert!(llama.ends_with("assistant<|end_header_id|>\n\nFinal Diagnosis and diagnostic criteria:"));
        assert_ne!(llama, b.render());
    }
}
