use macd::model::{
    CaseRecord, ConceptCategory, ConceptStatus, DiagnosticConcept, DiseaseId, DiseaseKnowledge, KnowledgeSet,
};
use macd::store::{Store, StoreError};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[ -~]{0,40}|[\\PC]{0,12}"
}

prop_compose! {
    fn case_record()(id in "[a-z0-9-]{1,10}", hpi in text(), exam in text(), labs in text(), radiology in text())
        -> CaseRecord {
        CaseRecord { case_id: id, hpi, physical_exam: exam, labs, radiology }
    }
}

fn knowledge(model: &str, version: u32, texts: &[String]) -> KnowledgeSet {
    let mut set = KnowledgeSet::new(model);
    set.version = version;
    let concepts: Vec<DiagnosticConcept> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| DiagnosticConcept {
            concept_id: format!("{model}:pneumonia:c{i}:g1"),
            disease: DiseaseId::Pneumonia,
            category: ConceptCategory::General,
            text: t.clone(),
            source_model: model.to_string(),
            provenance: vec![format!("c{i}")],
            status: ConceptStatus::Retained,
        })
        .collect();
    set.diseases.insert(
        DiseaseId::Pneumonia,
        DiseaseKnowledge {
            general: concepts,
            rare: Vec::new(),
        },
    );
    set
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn case_files_round_trip(cases in proptest::collection::vec(case_record(), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_cases("batch", &cases).unwrap();
        prop_assert_eq!(store.load_case_records().unwrap(), cases);
    }

    #[test]
    fn knowledge_round_trips_and_is_immutable(texts in proptest::collection::vec("[a-zA-Z0-9 ,.()>%-]{1,60}", 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let set = knowledge("m", 1, &texts);
        store.put_knowledge(&set).unwrap();
        prop_assert_eq!(store.load_knowledge("m", 1).unwrap(), set.clone());
        let again = store.put_knowledge(&set);
        prop_assert!(
            matches!(again, Err(StoreError::ConflictingVersion { .. })),
            "second write must be rejected"
        );
        let next = knowledge("m", 2, &texts[..1]);
        store.put_knowledge(&next).unwrap();
        prop_assert_eq!(store.knowledge_versions("m").unwrap(), vec![1, 2]);
        prop_assert_eq!(store.latest_knowledge("m").unwrap(), next);
    }

    #[test]
    fn artifact_bytes_survive_and_tampering_is_caught(bytes in proptest::collection::vec(any::<u8>(), 1..256), flip in any::<usize>()) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let path = store.write_artifact("rules/blob.bin", &bytes).unwrap();
        prop_assert_eq!(store.read_artifact("rules/blob.bin").unwrap(), bytes.clone());
        let mut tampered = bytes.clone();
        let i = flip % tampered.len();
        tampered[i] ^= 0x01;
        std::fs::write(&path, &tampered).unwrap();
        let corrupt = matches!(store.read_artifact("rules/blob.bin"), Err(StoreError::CorruptStore { .. }));
        prop_assert!(corrupt);
    }
}
