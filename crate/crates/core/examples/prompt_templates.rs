//! Renders each prompt template for one case so the exact text sent to a
//! model can be inspected, along with its bundle hash.
//!
//! cargo run --example prompt_templates -- [diagnosis|summarizer|consultation|guideline]

use macd::gateway::prompt::{
    build_consultation_prompt, build_diagnosis_prompt, build_guideline_condensation_prompt, build_summarizer_prompt,
    PromptBundle,
};
use macd::model::{DiseaseId, PatientCase};

fn main() -> anyhow::Result<()> {
    let case = PatientCase {
        case_id: "demo-1".into(),
        hpi: "A 54-year-old man with three days of left lower quadrant pain and fever.".into(),
        physical_exam: "Tender left lower quadrant without peritonism.".into(),
        labs: "WBC 14.2, CRP 96.".into(),
        radiology: "CT: sigmoid wall thickening with pericolic fat stranding.".into(),
    };
    let knowledge = "Diverticulitis\nGeneral Criteria:\n1. Left lower quadrant pain\nRare Criteria:\n1. Not available";
    let which = std::env::args().nth(1).unwrap_or_else(|| "diagnosis".into());
    let bundle: PromptBundle = match which.as_str() {
        "diagnosis" => build_diagnosis_prompt(&case, Some(knowledge)),
        "summarizer" => build_summarizer_prompt("Diverticulitis. Criteria: 1) LLQ pain 2) CT fat stranding")?,
        "consultation" => build_consultation_prompt(
            &case,
            knowledge,
            &["Diverticulitis. Criteria: 1) LLQ pain".into(), "Colitis. Criteria: 1) fever".into()],
            7,
        )?,
        "guideline" => build_guideline_condensation_prompt(
            "Diverticulitis is diagnosed on CT by bowel wall thickening and pericolic inflammation.",
            &[DiseaseId::Diverticulitis],
        )?,
        other => anyhow::bail!("unknown template `{other}`"),
    };
    println!("{}", bundle.render());
    println!("\n-- {} template, bundle {}", bundle.kind, &bundle.hash()[..16]);
    Ok(())
}
