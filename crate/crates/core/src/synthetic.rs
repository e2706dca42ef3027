//! Deterministic synthetic cases and a scripted backend that answers
//! them, for desk-scale runs without real records or models.
//!
//! Case texts describe findings only and never name the disease.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gateway::prompt::{derive_seed, TemplateKind};
use crate::gateway::{ScriptRule, ScriptedBackend};
use crate::model::{CaseRecord, DiseaseId, LabelRecord, NOT_AVAILABLE};

struct Profile {
    disease: DiseaseId,
    hpi: [&'static str; 3],
    exam: [&'static str; 3],
    labs: [&'static str; 3],
    radiology: [&'static str; 3],
    general: [&'static str; 7],
    rare: [&'static str; 4],
    confused_with: DiseaseId,
}

fn profiles() -> Vec<Profile> {
    vec![
        Profile {
            disease: DiseaseId::Appendicitis,
            hpi: [
                "Periumbilical pain migrating to the right lower quadrant over 18 hours with anorexia.",
                "Right lower quadrant pain since last night, nausea and one episode of vomiting.",
                "Diffuse abdominal pain that localized to the right iliac fossa, low-grade fever.",
            ],
            exam: [
                "Tenderness at McBurney's point with rebound and guarding.",
                "Positive Rovsing sign, right lower quadrant guarding.",
                "Psoas sign present, localized right lower quadrant tenderness.",
            ],
            labs: [
                "WBC 14.2 K/uL with neutrophilia, CRP 48 mg/L.",
                "WBC 12.9 K/uL, CRP 31 mg/L, urinalysis unremarkable.",
                "WBC 16.1 K/uL, lipase 35 U/L, bilirubin normal.",
            ],
            radiology: [
                "CT abdomen: dilated 9 mm appendix with periappendiceal fat stranding.",
                "Ultrasound: non-compressible tubular structure in the right lower quadrant, 8 mm.",
                "CT abdomen: appendicolith with surrounding inflammatory change.",
            ],
            general: [
                "Right lower quadrant abdominal pain",
                "Pain migrating from the periumbilical region",
                "Leukocytosis with neutrophil predominance",
                "Dilated appendix above 6 mm on imaging",
                "Periappendiceal fat stranding",
                "Anorexia, nausea or vomiting",
                "Rebound tenderness at McBurney's point",
            ],
            rare: [
                "Appendicolith on CT",
                "Positive psoas sign",
                "Pelvic abscess formation",
                "Pain referred to the right flank",
            ],
            confused_with: DiseaseId::Diverticulitis,
        },
        Profile {
            disease: DiseaseId::Cholecystitis,
            hpi: [
                "Right upper quadrant pain after a fatty meal, lasting more than six hours, with fever.",
                "Constant epigastric and right upper quadrant pain radiating to the right shoulder.",
                "Recurrent postprandial right upper quadrant pain, now persistent with chills.",
            ],
            exam: [
                "Positive Murphy sign, right upper quadrant tenderness.",
                "Inspiratory arrest on right subcostal palpation, mild jaundice absent.",
                "Right upper quadrant guarding, temperature 38.4C.",
            ],
            labs: [
                "WBC 13.0 K/uL, ALP 160 U/L, total bilirubin 1.4 mg/dL.",
                "WBC 11.8 K/uL, AST 62 U/L, ALT 70 U/L, lipase normal.",
                "WBC 15.3 K/uL, CRP 120 mg/L, GGT 95 U/L.",
            ],
            radiology: [
                "Ultrasound: gallbladder wall thickening 5 mm, pericholecystic fluid, impacted stones.",
                "Ultrasound: distended gallbladder with sonographic Murphy sign and gallstones.",
                "HIDA scan: non-visualization of the gallbladder at four hours.",
            ],
            general: [
                "Right upper quadrant pain",
                "Positive Murphy sign",
                "Gallbladder wall thickening on ultrasound",
                "Pericholecystic fluid",
                "Fever and leukocytosis",
                "Gallstones on imaging",
                "Mildly raised alkaline phosphatase",
            ],
            rare: [
                "Non-visualized gallbladder on HIDA scan",
                "Emphysematous changes of the gallbladder wall",
                "Pain referred to the right shoulder",
                "Gallbladder perforation",
            ],
            confused_with: DiseaseId::Pancreatitis,
        },
        Profile {
            disease: DiseaseId::Diverticulitis,
            hpi: [
                "Left lower quadrant pain for three days with change in bowel habits.",
                "Crampy left-sided abdominal pain, low-grade fever and constipation.",
                "Persistent left lower quadrant pain after a similar episode last year.",
            ],
            exam: [
                "Left lower quadrant tenderness without peritonitis.",
                "Tender palpable mass in the left iliac fossa.",
                "Localized left lower quadrant guarding, bowel sounds present.",
            ],
            labs: [
                "WBC 12.8 K/uL, CRP 95 mg/L.",
                "WBC 14.0 K/uL, CRP 140 mg/L, lactate normal.",
                "WBC 11.2 K/uL, CRP 60 mg/L, urinalysis negative.",
            ],
            radiology: [
                "CT abdomen: sigmoid wall thickening with adjacent fat stranding and diverticula.",
                "CT abdomen: inflamed sigmoid diverticulum with a 2 cm pericolic collection.",
                "CT abdomen: descending colon diverticula with pericolic inflammatory change.",
            ],
            general: [
                "Left lower quadrant abdominal pain",
                "Colonic wall thickening on CT",
                "Pericolic fat stranding",
                "Fever with leukocytosis",
                "Raised C-reactive protein",
                "Change in bowel habits",
                "Known colonic diverticula",
            ],
            rare: [
                "Pericolic abscess",
                "Colovesical fistula with pneumaturia",
                "Incidental hepatic cyst",
                "Free intraperitoneal air",
            ],
            confused_with: DiseaseId::Appendicitis,
        },
        Profile {
            disease: DiseaseId::Pancreatitis,
            hpi: [
                "Severe epigastric pain radiating to the back with repeated vomiting after heavy alcohol use.",
                "Sudden band-like upper abdominal pain, worse lying flat, known gallstones.",
                "Epigastric pain for one day with nausea, relieved slightly by sitting forward.",
            ],
            exam: [
                "Epigastric tenderness with voluntary guarding.",
                "Tachycardia, diminished bowel sounds, upper abdominal distension.",
                "Periumbilical ecchymosis absent, marked epigastric tenderness.",
            ],
            labs: [
                "Lipase 1450 U/L (upper limit 60), WBC 13.5 K/uL.",
                "Lipase 980 U/L, amylase 720 U/L, triglycerides 210 mg/dL.",
                "Lipase 2100 U/L, calcium 8.1 mg/dL, BUN 28 mg/dL.",
            ],
            radiology: [
                "CT abdomen: edematous gland with peripancreatic fat stranding.",
                "CT abdomen: peripancreatic fluid collection, no necrosis.",
                "Ultrasound: bulky hypoechoic gland, cholelithiasis.",
            ],
            general: [
                "Epigastric pain radiating to the back",
                "Elevated serum lipase level (>3 times upper limit of normal)",
                "Nausea and vomiting",
                "Peripancreatic fat stranding on CT",
                "History of alcohol use or gallstones",
                "Epigastric tenderness",
                "Raised amylase",
            ],
            rare: [
                "Splenic vein thrombosis",
                "Grey Turner sign",
                "Hypocalcemia",
                "Pancreatic pseudocyst",
            ],
            confused_with: DiseaseId::Cholecystitis,
        },
        Profile {
            disease: DiseaseId::Pericarditis,
            hpi: [
                "Sharp retrosternal chest pain relieved by leaning forward, recent viral illness.",
                "Pleuritic chest pain for two days, worse lying supine, low-grade fever.",
                "Positional chest pain radiating to the trapezius ridge after an upper respiratory infection.",
            ],
            exam: [
                "Pericardial friction rub at the left sternal border.",
                "Scratchy three-component rub, no jugular venous distension.",
                "Friction rub heard best sitting forward, heart rate 102.",
            ],
            labs: [
                "Troponin I 0.04 ng/mL, CRP 40 mg/L.",
                "ESR 45 mm/h, CRP 55 mg/L, troponin normal.",
                "WBC 11.0 K/uL, CRP 38 mg/L, troponin 0.02 ng/mL.",
            ],
            radiology: [
                "Echo: small circumferential effusion, preserved ejection fraction. ECG: diffuse ST elevation with PR depression.",
                "ECG: widespread concave ST elevation. Echo: trace effusion.",
                "Cardiac MRI: pericardial enhancement, normal myocardium.",
            ],
            general: [
                "Pleuritic chest pain improved by sitting forward",
                "Pericardial friction rub",
                "Diffuse ST elevation on ECG",
                "PR segment depression",
                "New or worsening pericardial effusion",
                "Raised inflammatory markers",
                "Recent viral illness",
            ],
            rare: [
                "Pericardial enhancement on cardiac MRI",
                "Pulsus paradoxus",
                "Electrical alternans",
                "Pain radiating to the trapezius ridge",
            ],
            confused_with: DiseaseId::PulmonaryEmbolism,
        },
        Profile {
            disease: DiseaseId::Pneumonia,
            hpi: [
                "Productive cough with rust-colored sputum, fever 39C and pleuritic pain for four days.",
                "Cough, chills and shortness of breath for three days in an elderly nursing home resident.",
                "Fever, malaise and purulent sputum after a week of coryzal symptoms.",
            ],
            exam: [
                "Crackles and bronchial breath sounds at the right base.",
                "Dullness to percussion over the left lower zone, respiratory rate 26.",
                "Egophony and coarse crackles in the right middle zone, SpO2 92%.",
            ],
            labs: [
                "WBC 16.0 K/uL, procalcitonin 1.2 ng/mL.",
                "WBC 18.4 K/uL, CRP 210 mg/L, blood cultures pending.",
                "WBC 13.7 K/uL, sputum Gram stain with gram-positive diplococci.",
            ],
            radiology: [
                "Chest radiograph: right lower lobe consolidation with air bronchograms.",
                "Chest radiograph: left lower lobe airspace opacity and small effusion.",
                "CT chest: lobar consolidation in the right middle lobe.",
            ],
            general: [
                "Fever with productive cough",
                "Focal consolidation on chest imaging",
                "Crackles on auscultation",
                "Leukocytosis",
                "Raised procalcitonin",
                "Tachypnea or hypoxemia",
                "Pleuritic chest pain",
            ],
            rare: [
                "Parapneumonic effusion",
                "Cavitation on CT",
                "Confusion in the elderly",
                "Gram-positive diplococci in sputum",
            ],
            confused_with: DiseaseId::PulmonaryEmbolism,
        },
        Profile {
            disease: DiseaseId::PulmonaryEmbolism,
            hpi: [
                "Sudden dyspnea and pleuritic chest pain after a long-haul flight.",
                "Acute breathlessness and near syncope one week after hip surgery.",
                "Hemoptysis and sharp chest pain, on oral contraceptives, recent immobilization.",
            ],
            exam: [
                "Heart rate 118, SpO2 89% on room air, unilateral calf swelling.",
                "Tachypnea, clear lungs, loud P2.",
                "Tender swollen left calf, heart rate 110, blood pressure 102/64.",
            ],
            labs: [
                "D-dimer 3.2 mg/L, troponin 0.03 ng/mL.",
                "D-dimer 5.8 mg/L, arterial blood gas with respiratory alkalosis.",
                "D-dimer 2.4 mg/L, BNP 180 pg/mL.",
            ],
            radiology: [
                "CT angiography: filling defect in a right lower lobe segmental artery.",
                "CT angiography: saddle thrombus with right ventricular dilatation.",
                "Ventilation-perfusion scan: multiple mismatched perfusion defects.",
            ],
            general: [
                "Sudden onset dyspnea",
                "Pleuritic chest pain",
                "Tachycardia",
                "Elevated D-dimer",
                "Filling defect on CT angiography",
                "Risk factors such as immobilization or recent surgery",
                "Hypoxemia with clear lungs",
            ],
            rare: [
                "Hemoptysis",
                "Right ventricular strain on echocardiography",
                "Mismatched defects on ventilation-perfusion scan",
                "S1Q3T3 pattern on ECG",
            ],
            confused_with: DiseaseId::Pneumonia,
        },
    ]
}

/// Rare criterion that, once in the knowledge text, misleads the scripted
/// diagnostician on some diverticulitis cases.
pub const MISLEADING_CONCEPT: &str = "Incidental hepatic cyst";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub cases: Vec<CaseRecord>,
    pub labels: Vec<LabelRecord>,
}

impl SyntheticCorpus {
    pub fn label_of(&self, case_id: &str) -> Option<DiseaseId> {
        self.labels
            .iter()
            .find(|l| l.case_id == case_id)
            .and_then(|l| DiseaseId::parse_canonical(&l.disease).ok())
    }
}

/// `per_disease` cases for each of the seven diseases, ids `syn-001`...
/// assigned after a seeded shuffle so that ids carry no label.
pub fn corpus(per_disease: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts: Vec<(DiseaseId, CaseRecord)> = Vec::new();
    for profile in profiles() {
        for _ in 0..per_disease {
            let age = rng.random_range(24..88);
            let sex = if rng.random_bool(0.5) { "woman" } else { "man" };
            let pick = |rng: &mut ChaCha8Rng, options: &[&str; 3]| options[rng.random_range(0..3)].to_string();
            let hpi = format!("A {age}-year-old {sex}. {}", pick(&mut rng, &profile.hpi));
            drafts.push((
                profile.disease.clone(),
                CaseRecord {
                    case_id: String::new(),
                    hpi,
                    physical_exam: pick(&mut rng, &profile.exam),
                    labs: pick(&mut rng, &profile.labs),
                    radiology: pick(&mut rng, &profile.radiology),
                },
            ));
        }
    }
    drafts.shuffle(&mut rng);
    let mut cases = Vec::new();
    let mut labels = Vec::new();
    for (i, (disease, mut case)) in drafts.into_iter().enumerate() {
        case.case_id = format!("syn-{:03}", i + 1);
        labels.push(LabelRecord {
            case_id: case.case_id.clone(),
            disease: disease.canonical_name(),
            distractor: false,
        });
        cases.push(case);
    }
    SyntheticCorpus { cases, labels }
}

/// Knobs for the scripted oracle. Percentages are out of 100.
#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub models: Vec<String>,
    pub seed: u64,
    /// Cases a model gets wrong without knowledge.
    pub zero_shot_miss_pct: u64,
    /// Share of those misses that self-learned knowledge fixes.
    pub knowledge_fix_pct: u64,
    /// Share of still-disputed cases that converge once agents see
    /// each other's opinions.
    pub convergence_pct: u64,
}

impl OracleOptions {
    pub fn new(models: &[&str]) -> Self {
        Self {
            models: models.iter().map(|m| m.to_string()).collect(),
            seed: 7,
            zero_shot_miss_pct: 30,
            knowledge_fix_pct: 50,
            convergence_pct: 60,
        }
    }
}

fn roll(seed: u64, label: &str) -> u64 {
    derive_seed(seed, label) % 100
}

fn diagnosis_text(disease: &DiseaseId, profile: &Profile, variant: u64) -> String {
    let name = disease.display_name();
    match (disease, variant % 3) {
        (DiseaseId::Pericarditis, 1) => format!(
            "Pericardial effusion with inflammation. Diagnostic criteria: 1) {} 2) {}",
            profile.general[0], profile.general[1]
        ),
        (DiseaseId::Pneumonia, 1) => format!(
            "Lung infection of the right lower lobe.\n1. {}\n2. {}",
            profile.general[0], profile.general[1]
        ),
        (_, 2) => format!("Acute {}\n1. {}\n2. {}", name.to_lowercase(), profile.general[0], profile.general[1]),
        _ => format!("{name}. Criteria: 1) {} 2) {}", profile.general[0], profile.general[1]),
    }
}

fn summarizer_text(profile: &Profile, k: usize, rare_count: usize, misleading: bool) -> String {
    let mut out = format!("Disease: {}\nGeneral Criteria:\n", profile.disease.display_name());
    for i in 0..5 {
        out.push_str(&format!("{}. {}\n", i + 1, profile.general[(k + i) % profile.general.len()]));
    }
    out.push_str("Rare Criteria:\n");
    let mut rare: Vec<&str> = (0..rare_count)
        .map(|i| profile.rare[(k + i) % profile.rare.len()])
        .filter(|r| *r != MISLEADING_CONCEPT)
        .collect();
    if misleading {
        rare.insert(0, MISLEADING_CONCEPT);
    }
    rare.truncate(5);
    while rare.len() < 5 {
        rare.push(NOT_AVAILABLE);
    }
    for (i, r) in rare.iter().enumerate() {
        out.push_str(&format!("{}. {r}\n", i + 1));
    }
    out
}

/// Scripted backend answering every prompt the pipeline sends for the
/// corpus cases. Rules are keyed on model, template kind and case id.
pub fn oracle_script(corpus: &SyntheticCorpus, options: &OracleOptions) -> ScriptedBackend {
    let profiles = profiles();
    let profile_of = |d: &DiseaseId| profiles.iter().find(|p| &p.disease == d).expect("canonical disease");
    let mut script = ScriptedBackend::new("Unable to determine a diagnosis.");
    let mut rule = |model: Option<&str>, kind, case_id: &str, contains: Option<&str>, completion: String| {
        script.rules.push(ScriptRule {
            model: model.map(str::to_string),
            kind: Some(kind),
            case_id: Some(case_id.to_string()),
            contains: contains.map(str::to_string),
            completion,
            ..ScriptRule::default()
        });
    };
    for (idx, case) in corpus.cases.iter().enumerate() {
        let Some(truth) = corpus.label_of(&case.case_id) else { continue };
        let profile = profile_of(&truth);
        let wrong = &profile.confused_with;
        let wrong_profile = profile_of(wrong);
        let cid = case.case_id.as_str();
        let variant = derive_seed(options.seed, cid);

        let misleading_case = truth == DiseaseId::Diverticulitis && idx % 3 == 0;
        let k = (variant % 7) as usize;
        let rare_count = 2 + (variant % 3) as usize;
        rule(
            None,
            TemplateKind::Summarizer,
            cid,
            None,
            summarizer_text(profile, k, rare_count, misleading_case),
        );

        for model in &options.models {
            let m = model.as_str();
            let missed = roll(options.seed, &format!("miss:{m}:{cid}")) < options.zero_shot_miss_pct;
            let fixed = roll(options.seed, &format!("fix:{m}:{cid}")) < options.knowledge_fix_pct;
            let converges = roll(options.seed, &format!("conv:{cid}")) < options.convergence_pct;
            let right = diagnosis_text(&truth, profile, variant);
            let mistaken = diagnosis_text(wrong, wrong_profile, variant);

            if truth == DiseaseId::Diverticulitis && variant % 2 == 0 {
                rule(Some(m), TemplateKind::Diagnosis, cid, Some(MISLEADING_CONCEPT), mistaken.clone());
            }
            if missed && fixed {
                rule(Some(m), TemplateKind::Diagnosis, cid, Some("General Criteria:"), right.clone());
            }
            rule(
                Some(m),
                TemplateKind::Diagnosis,
                cid,
                None,
                if missed { mistaken.clone() } else { right.clone() },
            );
            let consult = if converges || !missed || fixed { right } else { mistaken };
            rule(Some(m), TemplateKind::Consultation, cid, None, consult);
        }
    }
    script
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_label_free() {
        let a = corpus(3, 11);
        assert_eq!(a, corpus(3, 11));
        assert_eq!(a.cases.len(), 21);
        for case in &a.cases {
            let text = format!("{} {} {} {}", case.hpi, case.physical_exam, case.labs, case.radiology).to_lowercase();
            for d in DiseaseId::CANONICAL {
                assert!(!text.contains(&d.display_name().to_lowercase()), "{} names {d}", case.case_id);
                assert!(!text.contains(&d.canonical_name()), "{} names {d}", case.case_id);
            }
        }
    }

    #[test]
    fn summaries_parse() {
        let c = corpus(2, 3);
        let script = oracle_script(&c, &OracleOptions::new(&["m"]));
        for rule in script.rules.iter().filter(|r| r.kind == Some(TemplateKind::Summarizer)) {
            crate::knowledge::parse_summarizer_output(&rule.completion).unwrap();
        }
    }
}
