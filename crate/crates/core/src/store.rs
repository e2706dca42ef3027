//! Plain-directory store for cases, labels, splits, knowledge versions,
//! rules, runs and the adjudication queue.
//!
//! Immutable artifacts carry a `.sha256` sidecar that is checked on load.
//! Append-only JSONL logs do not.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::EvaluationReport;
use crate::matching::MatchRuleSet;
use crate::model::{
    validate_case, CaseRecord, ConsultationRecord, DatasetSplit, DiagnosisResult, DiseaseId, KnowledgeSet, LabelRecord,
    LabeledCase, PatientCase, Verdict,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("knowledge version {version} of {model} already exists")]
    ConflictingVersion { model: String, version: u32 },
    #[error("corrupt store entry {path}: {reason}")]
    CorruptStore { path: String, reason: String },
    #[error("case {0} is already adjudicated")]
    AlreadyAdjudicated(String),
    #[error("invalid entity: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    path.with_file_name(name)
}

/// File-safe form of a model id.
pub fn path_segment(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Recorded configuration and inputs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub created_at: DateTime<Utc>,
    /// Full serialized configuration, seeds and thresholds included.
    pub config: serde_json::Value,
    /// Command arguments needed to re-execute the run.
    pub invocation: serde_json::Value,
    /// Store-relative path to sha256 of every input artifact.
    pub inputs: BTreeMap<String, String>,
}

/// One opinion as shown to a reviewing physician: no agent identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueOpinion {
    pub text: String,
    pub normalized: Option<DiseaseId>,
}

/// An escalated case waiting in the adjudication queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub case_id: String,
    pub run_id: String,
    pub case: PatientCase,
    pub opinions: Vec<QueueOpinion>,
    pub enqueued_at: DateTime<Utc>,
}

impl QueueEntry {
    /// Builds the queue payload from an escalated record's final round.
    pub fn from_record(record: &ConsultationRecord, case: &PatientCase, run_id: &str) -> Self {
        Self {
            case_id: record.case_id.clone(),
            run_id: run_id.to_string(),
            case: case.clone(),
            opinions: record
                .final_opinions()
                .iter()
                .map(|o| QueueOpinion {
                    text: o.raw_text.clone(),
                    normalized: o.normalized.clone(),
                })
                .collect(),
            enqueued_at: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept_id: String,
    pub physician_id: String,
    pub score: u8,
    pub submitted_at: DateTime<Utc>,
}

/// Zero-knowledge diagnoses made while partitioning, per model and case.
pub type SplitDiagnoses = BTreeMap<String, BTreeMap<String, DiagnosisResult>>;

pub struct Store {
    root: PathBuf,
    queue_lock: Mutex<()>,
}

impl Store {
    pub const DIRS: [&'static str; 8] = ["cases", "labels", "splits", "knowledge", "rules", "guidelines", "runs", "queue"];

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in Self::DIRS {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self {
            root,
            queue_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Writes an immutable artifact with its digest sidecar.
    pub fn write_artifact(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.root.join(rel);
        self.write_atomic(&path, bytes)?;
        self.write_atomic(&digest_path(&path), sha256_hex(bytes).as_bytes())?;
        Ok(path)
    }

    /// Reads an artifact, checking its sidecar digest when one exists.
    pub fn read_artifact(&self, rel: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(StoreError::NotFound(rel.to_string()));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let sidecar = digest_path(&path);
        if sidecar.exists() {
            let expected = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
            let actual = sha256_hex(&bytes);
            if expected.trim() != actual {
                return Err(StoreError::CorruptStore {
                    path: rel.to_string(),
                    reason: format!("digest mismatch: expected {}, found {actual}", expected.trim()),
                });
            }
        }
        Ok(bytes)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf, StoreError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Invalid(e.to_string()))?;
        bytes.push(b'\n');
        self.write_artifact(rel, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, StoreError> {
        let bytes = self.read_artifact(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptStore {
            path: rel.to_string(),
            reason: e.to_string(),
        })
    }

    fn write_jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> Result<PathBuf, StoreError> {
        let mut bytes = Vec::new();
        for item in items {
            serde_json::to_writer(&mut bytes, item).map_err(|e| StoreError::Invalid(e.to_string()))?;
            bytes.push(b'\n');
        }
        self.write_artifact(rel, &bytes)
    }

    fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, StoreError> {
        let bytes = self.read_artifact(rel)?;
        parse_jsonl(&bytes, rel)
    }

    fn list(&self, dir: &str, suffix: &str) -> Result<Vec<String>, StoreError> {
        let path = self.root.join(dir);
        let mut names: Vec<String> = fs::read_dir(&path)
            .map_err(io_err(&path))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(suffix))
            .collect();
        names.sort();
        Ok(names)
    }

    // Cases and labels.

    pub fn put_cases(&self, name: &str, cases: &[CaseRecord]) -> Result<PathBuf, StoreError> {
        self.write_jsonl(&format!("cases/{}.jsonl", path_segment(name)), cases)
    }

    pub fn put_labels(&self, name: &str, labels: &[LabelRecord]) -> Result<PathBuf, StoreError> {
        self.write_jsonl(&format!("labels/{}.jsonl", path_segment(name)), labels)
    }

    pub fn load_case_records(&self) -> Result<Vec<CaseRecord>, StoreError> {
        let mut out = Vec::new();
        for name in self.list("cases", ".jsonl")? {
            out.extend(self.read_jsonl::<CaseRecord>(&format!("cases/{name}"))?);
        }
        Ok(out)
    }

    pub fn load_labels(&self) -> Result<BTreeMap<String, LabelRecord>, StoreError> {
        let mut out = BTreeMap::new();
        for name in self.list("labels", ".jsonl")? {
            for label in self.read_jsonl::<LabelRecord>(&format!("labels/{name}"))? {
                out.insert(label.case_id.clone(), label);
            }
        }
        Ok(out)
    }

    /// Label-free cases keyed by id.
    pub fn load_cases(&self) -> Result<BTreeMap<String, PatientCase>, StoreError> {
        Ok(self
            .load_labeled()?
            .into_iter()
            .map(|(id, lc)| (id, lc.case))
            .collect())
    }

    /// Every stored case joined with its label, validated.
    pub fn load_labeled(&self) -> Result<BTreeMap<String, LabeledCase>, StoreError> {
        let labels = self.load_labels()?;
        let mut out = BTreeMap::new();
        for record in self.load_case_records()? {
            let label = labels
                .get(record.case_id.trim())
                .ok_or_else(|| StoreError::Invalid(format!("case {} has no label", record.case_id)))?;
            let lc = validate_case(&record, label).map_err(|e| StoreError::Invalid(e.to_string()))?;
            if out.insert(lc.case.case_id.clone(), lc).is_some() {
                return Err(StoreError::Invalid(format!("duplicate case id {}", record.case_id)));
            }
        }
        Ok(out)
    }

    // Splits.

    pub fn put_split(&self, split: &DatasetSplit) -> Result<PathBuf, StoreError> {
        split.check_invariants().map_err(StoreError::Invalid)?;
        self.write_json(&format!("splits/{}.json", path_segment(&split.name)), split)
    }

    pub fn load_split(&self, name: &str) -> Result<DatasetSplit, StoreError> {
        self.read_json(&format!("splits/{}.json", path_segment(name)))
    }

    pub fn put_split_diagnoses(&self, name: &str, diagnoses: &SplitDiagnoses) -> Result<PathBuf, StoreError> {
        self.write_json(&format!("splits/{}.diagnoses.json", path_segment(name)), diagnoses)
    }

    pub fn load_split_diagnoses(&self, name: &str) -> Result<SplitDiagnoses, StoreError> {
        self.read_json(&format!("splits/{}.diagnoses.json", path_segment(name)))
    }

    // Knowledge.

    fn knowledge_rel(model: &str, version: u32) -> String {
        format!("knowledge/{}/{version}.json", path_segment(model))
    }

    /// Stores a new knowledge version; existing versions are never rewritten.
    pub fn put_knowledge(&self, set: &KnowledgeSet) -> Result<PathBuf, StoreError> {
        set.check_invariants().map_err(StoreError::Invalid)?;
        let rel = Self::knowledge_rel(&set.model, set.version);
        if self.root.join(&rel).exists() {
            return Err(StoreError::ConflictingVersion {
                model: set.model.clone(),
                version: set.version,
            });
        }
        self.write_json(&rel, set)
    }

    pub fn load_knowledge(&self, model: &str, version: u32) -> Result<KnowledgeSet, StoreError> {
        self.read_json(&Self::knowledge_rel(model, version))
    }

    pub fn knowledge_versions(&self, model: &str) -> Result<Vec<u32>, StoreError> {
        let dir = format!("knowledge/{}", path_segment(model));
        if !self.root.join(&dir).exists() {
            return Ok(Vec::new());
        }
        let mut versions: Vec<u32> = self
            .list(&dir, ".json")?
            .iter()
            .filter_map(|n| n.trim_end_matches(".json").parse().ok())
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn latest_knowledge(&self, model: &str) -> Result<KnowledgeSet, StoreError> {
        let version = *self
            .knowledge_versions(model)?
            .last()
            .ok_or_else(|| StoreError::NotFound(format!("knowledge for model {model}")))?;
        self.load_knowledge(model, version)
    }

    // Rules.

    pub fn put_rules(&self, name: &str, rules: &MatchRuleSet) -> Result<PathBuf, StoreError> {
        rules.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.write_json(&format!("rules/{}.json", path_segment(name)), rules)
    }

    pub fn load_rules(&self, name: &str) -> Result<MatchRuleSet, StoreError> {
        let rules: MatchRuleSet = self.read_json(&format!("rules/{}.json", path_segment(name)))?;
        rules.validate().map_err(|e| StoreError::CorruptStore {
            path: format!("rules/{name}.json"),
            reason: e.to_string(),
        })?;
        Ok(rules)
    }

    pub fn put_guideline(&self, name: &str, text: &str) -> Result<PathBuf, StoreError> {
        self.write_artifact(&format!("guidelines/{}.txt", path_segment(name)), text.as_bytes())
    }

    pub fn load_guideline(&self, name: &str) -> Result<String, StoreError> {
        let bytes = self.read_artifact(&format!("guidelines/{}.txt", path_segment(name)))?;
        String::from_utf8(bytes).map_err(|e| StoreError::CorruptStore {
            path: format!("guidelines/{name}.txt"),
            reason: e.to_string(),
        })
    }

    /// Digests of every input artifact (cases, labels, splits, knowledge,
    /// rules, guidelines), keyed by store-relative path.
    pub fn input_digests(&self) -> Result<BTreeMap<String, String>, StoreError> {
        let mut out = BTreeMap::new();
        for dir in ["cases", "labels", "splits", "knowledge", "rules", "guidelines"] {
            collect_digests(&self.root, &self.root.join(dir), &mut out)?;
        }
        Ok(out)
    }

    // Runs.

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(path_segment(run_id))
    }

    pub fn run_log_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("llm_log.jsonl")
    }

    /// First unused id of the form `{base}`, `{base}-2`, `{base}-3`, ...
    pub fn fresh_run_id(&self, base: &str) -> String {
        let base = path_segment(base);
        let mut id = base.clone();
        let mut n = 2;
        while self.run_dir(&id).exists() {
            id = format!("{base}-{n}");
            n += 1;
        }
        id
    }

    pub fn create_run(&self, manifest: &RunManifest) -> Result<PathBuf, StoreError> {
        let dir = self.run_dir(&manifest.run_id);
        if dir.exists() {
            return Err(StoreError::Invalid(format!("run {} already exists", manifest.run_id)));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        self.write_json(&format!("runs/{}/manifest.json", path_segment(&manifest.run_id)), manifest)?;
        Ok(dir)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        self.read_json(&format!("runs/{}/manifest.json", path_segment(run_id)))
    }

    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let mut runs: Vec<String> = self
            .list("runs", "")?
            .into_iter()
            .filter(|r| self.run_dir(r).join("manifest.json").exists())
            .collect();
        runs.sort();
        Ok(runs)
    }

    pub fn put_results(&self, run_id: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        self.write_artifact(&format!("runs/{}/results.json", path_segment(run_id)), bytes)
    }

    pub fn load_results(&self, run_id: &str) -> Result<Vec<u8>, StoreError> {
        self.read_artifact(&format!("runs/{}/results.json", path_segment(run_id)))
    }

    pub fn put_reports(&self, run_id: &str, reports: &[EvaluationReport]) -> Result<PathBuf, StoreError> {
        self.write_json(&format!("runs/{}/reports.json", path_segment(run_id)), &reports)
    }

    pub fn put_consultations(&self, run_id: &str, records: &[ConsultationRecord]) -> Result<PathBuf, StoreError> {
        self.write_jsonl(&format!("runs/{}/consultations.jsonl", path_segment(run_id)), records)
    }

    pub fn load_consultations(&self, run_id: &str) -> Result<Vec<ConsultationRecord>, StoreError> {
        self.read_jsonl(&format!("runs/{}/consultations.jsonl", path_segment(run_id)))
    }

    /// Latest run (by id order) that stored consultation records.
    pub fn latest_consultation_run(&self) -> Result<Option<String>, StoreError> {
        Ok(self
            .list_runs()?
            .into_iter()
            .filter(|r| self.run_dir(r).join("consultations.jsonl").exists())
            .max_by_key(|r| self.load_manifest(r).map(|m| m.created_at).ok()))
    }

    pub fn put_run_artifact<T: Serialize>(&self, run_id: &str, file: &str, value: &T) -> Result<PathBuf, StoreError> {
        self.write_json(&format!("runs/{}/{file}", path_segment(run_id)), value)
    }

    pub fn put_run_text(&self, run_id: &str, file: &str, text: &str) -> Result<PathBuf, StoreError> {
        self.write_artifact(&format!("runs/{}/{file}", path_segment(run_id)), text.as_bytes())
    }

    pub fn load_run_artifact<T: DeserializeOwned>(&self, run_id: &str, file: &str) -> Result<T, StoreError> {
        self.read_json(&format!("runs/{}/{file}", path_segment(run_id)))
    }

    pub fn put_run_jsonl<T: Serialize>(&self, run_id: &str, file: &str, items: &[T]) -> Result<PathBuf, StoreError> {
        self.write_jsonl(&format!("runs/{}/{file}", path_segment(run_id)), items)
    }

    // Adjudication queue.

    fn queue_path(&self, file: &str) -> PathBuf {
        self.root.join("queue").join(file)
    }

    fn append_line<T: Serialize>(&self, file: &str, item: &T) -> Result<(), StoreError> {
        let path = self.queue_path(file);
        let mut line = serde_json::to_vec(item).map_err(|e| StoreError::Invalid(e.to_string()))?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&line).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))
    }

    fn read_lines<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>, StoreError> {
        let path = self.queue_path(file);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| StoreError::CorruptStore {
                path: format!("queue/{file}:{}", i + 1),
                reason: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Enqueues escalated cases. Cases already queued are skipped.
    pub fn enqueue(&self, entries: &[QueueEntry]) -> Result<usize, StoreError> {
        let _guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        let existing: Vec<QueueEntry> = self.read_lines("pending.jsonl")?;
        let mut added = 0;
        for entry in entries {
            if existing.iter().any(|e| e.case_id == entry.case_id) {
                continue;
            }
            self.append_line("pending.jsonl", entry)?;
            added += 1;
        }
        Ok(added)
    }

    pub fn queue_entries(&self) -> Result<Vec<QueueEntry>, StoreError> {
        self.read_lines("pending.jsonl")
    }

    pub fn verdicts(&self) -> Result<BTreeMap<String, Verdict>, StoreError> {
        Ok(self
            .read_lines::<Verdict>("verdicts.jsonl")?
            .into_iter()
            .map(|v| (v.case_id.clone(), v))
            .collect())
    }

    /// Records a verdict for a queued case, at most once per case.
    pub fn submit_verdict(&self, verdict: &Verdict) -> Result<(), StoreError> {
        let _guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        if !self.queue_entries()?.iter().any(|e| e.case_id == verdict.case_id) {
            return Err(StoreError::NotFound(format!("queued case {}", verdict.case_id)));
        }
        if self.verdicts()?.contains_key(&verdict.case_id) {
            return Err(StoreError::AlreadyAdjudicated(verdict.case_id.clone()));
        }
        self.append_line("verdicts.jsonl", verdict)
    }

    pub fn add_concept_score(&self, score: &ConceptScore) -> Result<(), StoreError> {
        if !(1..=5).contains(&score.score) {
            return Err(StoreError::Invalid(format!("score {} not in 1..=5", score.score)));
        }
        let _guard = self.queue_lock.lock().unwrap_or_else(|p| p.into_inner());
        self.append_line("concept_scores.jsonl", score)
    }

    pub fn concept_scores(&self) -> Result<Vec<ConceptScore>, StoreError> {
        self.read_lines("concept_scores.jsonl")
    }
}

fn parse_jsonl<T: DeserializeOwned>(bytes: &[u8], rel: &str) -> Result<Vec<T>, StoreError> {
    let text = std::str::from_utf8(bytes).map_err(|e| StoreError::CorruptStore {
        path: rel.to_string(),
        reason: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::CorruptStore {
                path: format!("{rel}:{}", i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn collect_digests(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), StoreError> {
    if !dir.exists() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_digests(root, &path, out)?;
        } else if path.extension().is_none_or(|e| e != "sha256" && e != "tmp") {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Reads a JSONL file of records from outside the store.
pub fn read_jsonl_file<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_jsonl(&bytes, &path.display().to_string())
}

/// Per-concept and per-model mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        let count = scores.len();
        if count == 0 {
            return Self { count, mean: 0.0, sd: 0.0 };
        }
        let mean = scores.iter().sum::<f64>() / count as f64;
        let sd = if count < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        };
        Self { count, mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_concept: BTreeMap<String, ScoreSummary>,
    /// Keyed by the model prefix of the concept id.
    pub per_model: BTreeMap<String, ScoreSummary>,
}

pub fn summarize_scores(scores: &[ConceptScore]) -> ScoreReport {
    let mut by_concept: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in scores {
        by_concept.entry(s.concept_id.clone()).or_default().push(s.score as f64);
        let model = s.concept_id.split(':').next().unwrap_or_default().to_string();
        by_model.entry(model).or_default().push(s.score as f64);
    }
    ScoreReport {
        per_concept: by_concept.into_iter().map(|(k, v)| (k, ScoreSummary::of(&v))).collect(),
        per_model: by_model.into_iter().map(|(k, v)| (k, ScoreSummary::of(&v))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knowledge_versions_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let v1 = KnowledgeSet::new("llama-70b");
        store.put_knowledge(&v1).unwrap();
        let before = fs::read(dir.path().join("knowledge/llama-70b/1.json")).unwrap();
        let v2 = v1.refined(BTreeMap::new());
        store.put_knowledge(&v2).unwrap();
        assert_eq!(fs::read(dir.path().join("knowledge/llama-70b/1.json")).unwrap(), before);
        assert!(matches!(store.put_knowledge(&v1), Err(StoreError::ConflictingVersion { version: 1, .. })));
        assert_eq!(store.knowledge_versions("llama-70b").unwrap(), vec![1, 2]);
        assert_eq!(store.latest_knowledge("llama-70b").unwrap().version, 2);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_knowledge(&KnowledgeSet::new("m")).unwrap();
        let path = dir.path().join("knowledge/m/1.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"m\"", "\"n\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(store.load_knowledge("m", 1), Err(StoreError::CorruptStore { .. })));
        assert!(matches!(store.load_knowledge("m", 7), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn default_rules_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_rules("default", &MatchRuleSet::default_rules()).unwrap();
        let rules = store.load_rules("default").unwrap();
        assert_eq!(rules, MatchRuleSet::default_rules());
    }

    #[test]
    fn score_summary_uses_sample_sd() {
        let s = ScoreSummary::of(&[4.0, 5.0]);
        assert_eq!(s.mean, 4.5);
        assert!((s.sd - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fresh_run_ids_are_suffixed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.fresh_run_id("diagnose-ab"), "diagnose-ab");
        fs::create_dir_all(store.run_dir("diagnose-ab")).unwrap();
        assert_eq!(store.fresh_run_id("diagnose-ab"), "diagnose-ab-2");
    }
}
