//! Redundancy filter: greedy maximal-marginal-relevance selection over
//! concept embeddings, with the pool centroid standing in for the query.

use std::collections::BTreeMap;

use super::{KnowledgeError, RefinementConfig};
use crate::embedding::{cosine, EmbedError, Embedder, EmbeddingVector};
use crate::model::{ConceptStatus, DiagnosticConcept};

/// Greedy MMR trace over `vectors`, which must already be in tie-break
/// order. Returns selected indices in pick order.
///
/// Step one takes the vector closest to the centroid. Each later step
/// takes the argmax of `lambda * sim(v, centroid) - (1 - lambda) * max sim(v, selected)`.
/// Exact ties go to the lower index.
pub fn mmr_trace(vectors: &[EmbeddingVector], lambda: f64, k: usize) -> Result<Vec<usize>, EmbedError> {
    let n = vectors.len();
    if n == 0 || k == 0 {
        return Ok(Vec::new());
    }
    let centroid = EmbeddingVector::centroid(vectors).ok_or(EmbedError::DimensionMismatch(0, 0))?;
    let relevance: Vec<f64> = vectors
        .iter()
        .map(|v| cosine(v, &centroid))
        .collect::<Result<_, _>>()?;
    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = cosine(&vectors[i], &vectors[j])?;
            pairwise[i][j] = s;
            pairwise[j][i] = s;
        }
    }

    let mut selected: Vec<usize> = Vec::with_capacity(k.min(n));
    let mut remaining: Vec<bool> = vec![true; n];
    while selected.len() < k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| remaining[i]) {
            let score = if selected.is_empty() {
                relevance[i]
            } else {
                let redundancy = selected
                    .iter()
                    .map(|&s| pairwise[i][s])
                    .fold(f64::NEG_INFINITY, f64::max);
                lambda * relevance[i] - (1.0 - lambda) * redundancy
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("at least one remaining candidate");
        remaining[pick] = false;
        selected.push(pick);
    }
    Ok(selected)
}

/// Collapses exact text duplicates (merging provenance) and sorts by
/// earliest provenance case id, then text.
pub fn dedupe_pool(pool: &[DiagnosticConcept]) -> Vec<DiagnosticConcept> {
    let mut by_text: BTreeMap<&str, Vec<&DiagnosticConcept>> = BTreeMap::new();
    for concept in pool {
        by_text.entry(concept.text.as_str()).or_default().push(concept);
    }
    let mut unique: Vec<DiagnosticConcept> = by_text
        .into_values()
        .map(|group| {
            let head = group
                .iter()
                .min_by(|a, b| {
                    (a.first_provenance(), a.concept_id.as_str()).cmp(&(b.first_provenance(), b.concept_id.as_str()))
                })
                .expect("non-empty group");
            let mut kept = (*head).clone();
            kept.provenance = group.iter().flat_map(|c| c.provenance.iter().cloned()).collect();
            kept.provenance.sort();
            kept.provenance.dedup();
            kept
        })
        .collect();
    unique.sort_by(|a, b| {
        a.first_provenance()
            .cmp(b.first_provenance())
            .then_with(|| a.text.cmp(&b.text))
    });
    unique
}

/// Selects up to `keep_per_category` concepts from one disease/category
/// pool. Output concepts are marked retained.
pub fn redundancy_filter(
    pool: &[DiagnosticConcept],
    cfg: &RefinementConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<DiagnosticConcept>, KnowledgeError> {
    if let Some(first) = pool.first() {
        if pool.iter().any(|c| c.disease != first.disease || c.category != first.category) {
            return Err(KnowledgeError::MixedPool);
        }
    }
    let unique = dedupe_pool(pool);
    let vectors: Vec<EmbeddingVector> = unique
        .iter()
        .map(|c| embedder.embed(&c.text))
        .collect::<Result<_, _>>()?;
    let trace = mmr_trace(&vectors, cfg.mmr_lambda, cfg.keep_per_category)?;
    trace
        .into_iter()
        .map(|i| {
            let mut c = unique[i].clone();
            if c.status == ConceptStatus::Candidate {
                c.transition(ConceptStatus::Retained).map_err(KnowledgeError::Invariant)?;
            }
            Ok(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FallbackEmbedder;
    use crate::model::{ConceptCategory, DiseaseId};

    fn concept(id: &str, case: &str, text: &str) -> DiagnosticConcept {
        DiagnosticConcept {
            concept_id: id.into(),
            disease: DiseaseId::Pneumonia,
            category: ConceptCategory::General,
            text: text.into(),
            source_model: "m".into(),
            status: ConceptStatus::Candidate,
            provenance: vec![case.into()],
        }
    }

    #[test]
    fn identical_texts_collapse() {
        let pool: Vec<_> = (0..10)
            .map(|i| concept(&format!("k{i}"), &format!("case{i:02}"), "Fever above 38C"))
            .collect();
        let out = redundancy_filter(&pool, &RefinementConfig::default(), &FallbackEmbedder::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].provenance.len(), 10);
        assert_eq!(out[0].concept_id, "k0");
        assert_eq!(out[0].status, ConceptStatus::Retained);
    }

    #[test]
    fn small_pool_is_kept_whole() {
        let pool = vec![
            concept("a", "c1", "Productive cough"),
            concept("b", "c2", "Right lower lobe consolidation"),
            concept("c", "c3", "Elevated white blood cell count"),
            concept("d", "c4", "Fever"),
        ];
        let out = redundancy_filter(&pool, &RefinementConfig::default(), &FallbackEmbedder::default()).unwrap();
        assert_eq!(out.len(), 4);
        let mut ids: Vec<_> = out.iter().map(|c| c.concept_id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn mixed_pool_rejected() {
        let mut other = concept("b", "c2", "x");
        other.category = ConceptCategory::Rare;
        let pool = vec![concept("a", "c1", "y"), other];
        assert!(matches!(
            redundancy_filter(&pool, &RefinementConfig::default(), &FallbackEmbedder::default()),
            Err(KnowledgeError::MixedPool)
        ));
    }

    #[test]
    fn near_duplicates_lose_to_diverse_concepts() {
        let pool = vec![
            concept("a", "c1", "fever cough sputum"),
            concept("b", "c2", "fever cough sputum chills"),
            concept("c", "c3", "consolidation on chest radiograph"),
        ];
        let cfg = RefinementConfig {
            keep_per_category: 2,
            ..RefinementConfig::default()
        };
        let out = redundancy_filter(&pool, &cfg, &FallbackEmbedder::default()).unwrap();
        let texts: Vec<_> = out.iter().map(|c| c.concept_id.as_str()).collect();
        assert!(texts.contains(&"c"), "{texts:?}");
    }
}
