//! Two-level diagnosis matching.
//!
//! Exact level: a core stem of the disease occurs in the diagnosis text,
//! modifiers ignored. Tolerant level: exact, or some (location, modifier)
//! stem pair co-occurs. Both levels compare lowercased text with
//! punctuation folded to spaces, by substring, so stems such as
//! `pericard` match `pericarditis` and `pericardial`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DiseaseId;

pub const DEFAULT_RULES_JSON: &str = include_str!("../fixtures/rules/default.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("no match rules for disease {0}")]
    UnknownDisease(DiseaseId),
    #[error("invalid rule file: {0}")]
    InvalidRules(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    #[default]
    Exact,
    Tolerant,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiseaseRules {
    #[serde(default)]
    pub core: Vec<String>,
    #[serde(default)]
    pub tolerant: Vec<(String, String)>,
}

/// Rule file contents: `{disease: {core: [...], tolerant: [[location, modifier], ...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchRuleSet {
    pub diseases: BTreeMap<DiseaseId, DiseaseRules>,
}

impl MatchRuleSet {
    /// Shipped rules: chest-disease location/modifier pairs plus the core
    /// term of every target disease. Abdominal tolerant rules are empty.
    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled rule file is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, MatchError> {
        let rules: MatchRuleSet =
            serde_json::from_str(text).map_err(|e| MatchError::InvalidRules(e.to_string()))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MatchError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| MatchError::InvalidRules(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let check = |disease: &DiseaseId, stem: &str| {
            if stem.trim().is_empty() || stem != stem.to_lowercase() {
                Err(MatchError::InvalidRules(format!(
                    "{disease}: stems must be non-empty lowercase, got {stem:?}"
                )))
            } else {
                Ok(())
            }
        };
        for (disease, rules) in &self.diseases {
            for stem in &rules.core {
                check(disease, stem)?;
            }
            for (location, modifier) in &rules.tolerant {
                check(disease, location)?;
                check(disease, modifier)?;
            }
        }
        Ok(())
    }

    fn rules_for(&self, disease: &DiseaseId) -> Result<&DiseaseRules, MatchError> {
        self.diseases
            .get(disease)
            .ok_or_else(|| MatchError::UnknownDisease(disease.clone()))
    }
}

/// Lowercases and folds every non-alphanumeric run into one space.
pub fn fold(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

fn contains_stem(folded_text: &str, stem: &str) -> bool {
    let stem = fold(stem);
    !stem.is_empty() && folded_text.contains(&stem)
}

fn exact_folded(folded: &str, rules: &DiseaseRules) -> bool {
    rules.core.iter().any(|s| contains_stem(folded, s))
}

fn tolerant_folded(folded: &str, rules: &DiseaseRules) -> bool {
    exact_folded(folded, rules)
        || rules
            .tolerant
            .iter()
            .any(|(loc, modifier)| contains_stem(folded, loc) && contains_stem(folded, modifier))
}

pub fn match_exact(text: &str, disease: &DiseaseId, rules: &MatchRuleSet) -> Result<bool, MatchError> {
    let r = rules.rules_for(disease)?;
    Ok(exact_folded(&fold(text), r))
}

pub fn match_tolerant(text: &str, disease: &DiseaseId, rules: &MatchRuleSet) -> Result<bool, MatchError> {
    let r = rules.rules_for(disease)?;
    Ok(tolerant_folded(&fold(text), r))
}

pub fn match_at(
    text: &str,
    disease: &DiseaseId,
    rules: &MatchRuleSet,
    level: MatchLevel,
) -> Result<bool, MatchError> {
    match level {
        MatchLevel::Exact => match_exact(text, disease, rules),
        MatchLevel::Tolerant => match_tolerant(text, disease, rules),
    }
}

/// Maps free text to a single disease, or `None` when nothing fires or
/// several diseases fire without a unique exact-level winner.
pub fn normalize(text: &str, rules: &MatchRuleSet) -> Option<DiseaseId> {
    let folded = fold(text);
    if folded.is_empty() {
        return None;
    }
    let fired: Vec<(&DiseaseId, &DiseaseRules)> = rules
        .diseases
        .iter()
        .filter(|(_, r)| tolerant_folded(&folded, r))
        .collect();
    match fired.as_slice() {
        [] => None,
        [(d, _)] => Some((*d).clone()),
        many => {
            let exact: Vec<&DiseaseId> = many
                .iter()
                .filter(|(_, r)| exact_folded(&folded, r))
                .map(|(d, _)| *d)
                .collect();
            match exact.as_slice() {
                [d] => Some((*d).clone()),
                _ => None,
            }
        }
    }
}

/// Scores a diagnosis against ground truth. Distractor (`Other`) labels
/// have no rules, so they match on their folded text.
pub fn is_correct(text: &str, truth: &DiseaseId, rules: &MatchRuleSet, level: MatchLevel) -> bool {
    match truth {
        DiseaseId::Other(label) => {
            let label = fold(label);
            !label.is_empty() && fold(text).contains(&label)
        }
        d => match_at(text, d, rules, level).unwrap_or(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rules() -> MatchRuleSet {
        MatchRuleSet::default_rules()
    }

    #[test]
    fn exact_ignores_modifiers() {
        let r = rules();
        assert!(match_exact("Acute appendicitis with perforation", &DiseaseId::Appendicitis, &r).unwrap());
        assert!(!match_exact("pneumonia", &DiseaseId::PulmonaryEmbolism, &r).unwrap());
        assert!(!match_exact("appendix inflammation", &DiseaseId::Appendicitis, &r).unwrap());
    }

    #[test]
    fn appendix_inflammation_contains_no_core_stem() {
        let folded = fold("appendix inflammation");
        for rules in rules().diseases.values() {
            for stem in &rules.core {
                assert!(!folded.contains(stem.as_str()), "{stem}");
            }
        }
    }

    #[test]
    fn tolerant_location_modifier_pairs() {
        let r = rules();
        assert!(match_tolerant("pericardial effusion", &DiseaseId::Pericarditis, &r).unwrap());
        assert!(!match_exact("pericardial effusion", &DiseaseId::Pericarditis, &r).unwrap());
        assert!(match_tolerant("lung infection", &DiseaseId::Pneumonia, &r).unwrap());
        assert!(!match_tolerant("pleural effusion", &DiseaseId::Pericarditis, &r).unwrap());
    }

    #[test]
    fn pleural_effusion_fires_no_pericarditis_pair() {
        let folded = fold("pleural effusion");
        let peri = &rules().diseases[&DiseaseId::Pericarditis];
        for (loc, modifier) in &peri.tolerant {
            assert!(!(folded.contains(loc.as_str()) && folded.contains(modifier.as_str())));
        }
    }

    #[test]
    fn normalize_cases() {
        let r = rules();
        assert_eq!(normalize("pulmonary embolus suspected", &r), Some(DiseaseId::PulmonaryEmbolism));
        assert_eq!(normalize("gastroenteritis", &r), None);
        // Pneumonia fires only via (lung, infect); PE fires at the exact level.
        let both = "Pulmonary embolism, possible lung infection";
        assert!(match_tolerant(both, &DiseaseId::Pneumonia, &r).unwrap());
        assert!(!match_exact(both, &DiseaseId::Pneumonia, &r).unwrap());
        assert!(match_exact(both, &DiseaseId::PulmonaryEmbolism, &r).unwrap());
        assert_eq!(normalize(both, &r), Some(DiseaseId::PulmonaryEmbolism));
        assert_eq!(normalize("pneumonia vs pulmonary embolism", &r), None);
        assert_eq!(normalize("", &r), None);
    }

    #[test]
    fn unknown_disease_errors() {
        let r = rules();
        let other = DiseaseId::Other("gastritis".into());
        assert_eq!(match_exact("x", &other, &r), Err(MatchError::UnknownDisease(other.clone())));
        assert!(is_correct("Acute gastritis", &other, &r, MatchLevel::Exact));
    }

    #[test]
    fn rule_file_validation() {
        assert!(MatchRuleSet::from_json(r#"{"pneumonia": {"core": ["Pneumonia"]}}"#).is_err());
        assert!(MatchRuleSet::from_json(r#"{"gastritis": {"core": ["x"]}}"#).is_err());
        let r = MatchRuleSet::from_json(r#"{"pneumonia": {"core": ["pneumonia"]}}"#).unwrap();
        assert!(r.diseases[&DiseaseId::Pneumonia].tolerant.is_empty());
    }

    proptest! {
        #[test]
        fn exact_implies_tolerant_and_case_insensitive(text in "[A-Za-z ,.()-]{0,40}") {
            let r = rules();
            for d in DiseaseId::CANONICAL {
                let e = match_exact(&text, &d, &r).unwrap();
                let t = match_tolerant(&text, &d, &r).unwrap();
                prop_assert!(!e || t);
                prop_assert_eq!(e, match_exact(&text.to_uppercase(), &d, &r).unwrap());
                prop_assert_eq!(t, match_tolerant(&text.to_lowercase(), &d, &r).unwrap());
            }
        }
    }
}
