//! Operator entry point: one subcommand per pipeline stage.
//!
//! Stages that call a model record a run under `runs/{run_id}/` with the
//! configuration snapshot, input digests, the LLM log and `results.json`.
//! `replay` re-executes a recorded run against its own log and compares
//! `results.json` byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::consultation::{compute_workflow_metrics, AgentSpec, Panel, PanelConfig, WorkflowMetrics};
use crate::embedding::{Embedder, FallbackEmbedder, HttpEmbedder, EMBED_BASE_ENV};
use crate::engine::{evaluate, Diagnostician, EvaluationReport, KnowledgeCondition, KnowledgeSliceEvaluator};
use crate::gateway::backend::LLM_BASE_ENV;
use crate::gateway::prompt::{build_guideline_condensation_prompt, content_hash, derive_seed};
use crate::gateway::{
    ChatBackend, Gateway, GatewayError, GenerationConfig, LlmRequest, OpenAiBackend, ReplayBackend, RetryPolicy, RunLog,
    ScriptedBackend, TagDialect,
};
use crate::knowledge::summarizer::LearningExample;
use crate::knowledge::{
    apply_refinement, distill_knowledge, harvest_concepts, importance_assessment, ImportanceReport, RefinementConfig,
};
use crate::matching::{MatchLevel, MatchRuleSet};
use crate::model::{
    ConsultationRecord, DatasetSplit, DiseaseId, KnowledgeSet, LabelRecord, LabeledCase, CaseRecord, validate_case,
};
use crate::service::{self, AppState};
use crate::store::{read_jsonl_file, sha256_hex, QueueEntry, RunManifest, SplitDiagnoses, Store, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("replay mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Mismatch(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => CliError::Missing(what),
            StoreError::Invalid(_) | StoreError::ConflictingVersion { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError::Backend(e.to_string())
    }
}

// Configuration.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    #[serde(rename = "openai")]
    OpenAi,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Scripted backend rules file (JSON).
    pub script: Option<PathBuf>,
    /// Scripted fallback text when no script file is given.
    pub fallback: Option<String>,
    /// Overrides `MACD_LLM_BASE`.
    pub base_url: Option<String>,
    pub retry: RetryPolicy,
    /// Run whose log serves completions for the replay backend.
    pub replay_run: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent_id: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub split: String,
    pub default_quota: usize,
    pub quotas: BTreeMap<DiseaseId, usize>,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            split: "main".into(),
            default_quota: 90,
            quotas: BTreeMap::from([(DiseaseId::Pericarditis, 23)]),
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn quota(&self, disease: &DiseaseId) -> usize {
        self.quotas.get(disease).copied().unwrap_or(self.default_quota)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsultationConfig {
    pub max_rounds: usize,
    pub consensus_threshold: f64,
    pub seed: u64,
}

impl Default for ConsultationConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            consensus_threshold: 0.85,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Fallback,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    /// Overrides `MACD_EMBED_BASE`.
    pub base_url: Option<String>,
    pub model: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Fallback,
            dimension: 256,
            base_url: None,
            model: "text-embedding".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: Option<PathBuf>,
    pub backend: BackendConfig,
    pub dialect: String,
    pub generation: GenerationConfig,
    pub max_in_flight: usize,
    pub agents: Vec<AgentConfig>,
    pub partition: PartitionConfig,
    pub refinement: RefinementConfig,
    pub consultation: ConsultationConfig,
    pub embedder: EmbedderConfig,
    /// Rules file; defaults to the store's `rules/default.json`, then the
    /// built-in rules.
    pub rules: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store: None,
            backend: BackendConfig::default(),
            dialect: "plain".into(),
            generation: GenerationConfig::default(),
            max_in_flight: 8,
            agents: Vec::new(),
            partition: PartitionConfig::default(),
            refinement: RefinementConfig::default(),
            consultation: ConsultationConfig::default(),
            embedder: EmbedderConfig::default(),
            rules: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generation.validate().map_err(CliError::Config)?;
        self.refinement.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if TagDialect::by_name(&self.dialect).is_none() {
            return Err(CliError::Config(format!("unknown dialect `{}`", self.dialect)));
        }
        let ids: BTreeSet<&str> = self.agents.iter().map(|a| a.agent_id.as_str()).collect();
        if ids.len() != self.agents.len() {
            return Err(CliError::Config("agent ids must be unique".into()));
        }
        if self.embedder.dimension == 0 {
            return Err(CliError::Config("embedder.dimension must be positive".into()));
        }
        Ok(())
    }

    /// Distinct model ids in agent order.
    pub fn models(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.agents
            .iter()
            .filter(|a| seen.insert(a.model_id.clone()))
            .map(|a| a.model_id.clone())
            .collect()
    }

    fn require_agents(&self) -> Result<Vec<String>, CliError> {
        let models = self.models();
        if models.is_empty() {
            return Err(CliError::Config("no agents configured".into()));
        }
        Ok(models)
    }

    pub fn generation_for(&self, model: &str) -> GenerationConfig {
        GenerationConfig {
            model_id: model.to_string(),
            ..self.generation.clone()
        }
    }
}

// Command line.

#[derive(Debug, Parser)]
#[command(name = "macd", version, about = "Multi-agent clinical diagnosis pipeline")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, default_value = "macd.json")]
    pub config: PathBuf,
    /// Store directory; overrides the config's `store`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Exact,
    Tolerant,
}

impl From<Level> for MatchLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Exact => MatchLevel::Exact,
            Level::Tolerant => MatchLevel::Tolerant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CaseScope {
    Test,
    Sampling,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load case and label files into the store, or condense a guideline.
    Ingest(IngestArgs),
    /// Zero-knowledge screening and per-model learning/test split.
    Partition(SplitArgs),
    /// Summarize learning cases into a first knowledge version.
    Learn(SplitArgs),
    /// Concept ablation and pruning; bumps every knowledge version by one.
    Refine(RefineArgs),
    /// Single-agent diagnosis under one knowledge condition.
    Diagnose(DiagnoseArgs),
    /// Panel consultation with escalation to the review queue.
    Consult(ConsultArgs),
    /// Aggregate diagnosis reports and workflow metrics.
    Evaluate(EvaluateArgs),
    /// Run the adjudication HTTP service.
    Serve(ServeArgs),
    /// Re-execute a recorded run from its log and compare results.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[arg(long, requires = "labels")]
    pub cases: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Guideline document to condense with the first configured model.
    #[arg(long, conflicts_with = "cases")]
    pub guideline: Option<PathBuf>,
    /// Diseases the guideline covers (default: all seven).
    #[arg(long = "disease")]
    pub diseases: Vec<String>,
    #[arg(long, default_value = "default")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Split name; defaults to the config's partition.split.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub split: Option<String>,
    /// Ablate on every case instead of the sampling set.
    #[arg(long)]
    pub all_cases: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub split: Option<String>,
    /// zero | self-learned | cot | guideline:NAME | few-shot:PATH
    #[arg(long, default_value = "self-learned")]
    pub condition: String,
    #[arg(long, value_enum, default_value = "test")]
    pub cases: CaseScope,
    #[arg(long, value_enum, default_value = "exact")]
    pub level: Level,
}

#[derive(Debug, Clone, Args)]
pub struct ConsultArgs {
    #[arg(long)]
    pub split: Option<String>,
    /// Agents consult without self-learned knowledge.
    #[arg(long)]
    pub zero_knowledge: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Diagnose runs to include (default: all).
    #[arg(long = "diagnose-run")]
    pub diagnose_runs: Vec<String>,
    /// Consult run to score (default: latest).
    #[arg(long)]
    pub consult_run: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Built UI assets served under /app.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub run: String,
}

/// Everything needed to re-execute a stage, recorded in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Guideline {
        name: String,
        text: String,
        diseases: Vec<DiseaseId>,
    },
    Partition {
        split: String,
    },
    Learn {
        split: String,
    },
    Refine {
        split: String,
        all_cases: bool,
        knowledge: BTreeMap<String, u32>,
    },
    Diagnose {
        split: String,
        condition: String,
        cases: CaseScope,
        level: Level,
        knowledge: BTreeMap<String, u32>,
    },
    Consult {
        split: String,
        knowledge: BTreeMap<String, u32>,
    },
    Evaluate {
        diagnose_runs: Vec<String>,
        consult_run: Option<String>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Guideline { .. } => "guideline",
            Invocation::Partition { .. } => "partition",
            Invocation::Learn { .. } => "learn",
            Invocation::Refine { .. } => "refine",
            Invocation::Diagnose { .. } => "diagnose",
            Invocation::Consult { .. } => "consult",
            Invocation::Evaluate { .. } => "evaluate",
        }
    }
}

enum Artifact {
    Split(DatasetSplit, SplitDiagnoses),
    Knowledge(KnowledgeSet),
    Guideline(String, String),
    RunJson(&'static str, Value),
    RunJsonl(&'static str, Vec<Value>),
    RunText(&'static str, String),
    Consultations(Vec<ConsultationRecord>),
    Enqueue(Vec<QueueEntry>),
}

struct StageOutput {
    results: Value,
    summary: String,
    artifacts: Vec<Artifact>,
}

struct Ctx {
    cfg: Config,
    base_dir: PathBuf,
    store: Store,
    rules: Arc<MatchRuleSet>,
    embedder: Arc<dyn Embedder>,
    replaying: bool,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn split_name(&self, arg: &Option<String>) -> String {
        arg.clone().unwrap_or_else(|| self.cfg.partition.split.clone())
    }

    fn labeled(&self) -> Result<BTreeMap<String, LabeledCase>, CliError> {
        let labeled = self.store.load_labeled()?;
        if labeled.is_empty() {
            return Err(CliError::Missing("no cases in the store; run `macd ingest --cases .. --labels ..` first".into()));
        }
        Ok(labeled)
    }

    fn split(&self, name: &str) -> Result<DatasetSplit, CliError> {
        self.store.load_split(name).map_err(|e| match e {
            StoreError::NotFound(_) => CliError::Missing(format!("split `{name}`; run `macd partition` first")),
            other => other.into(),
        })
    }

    fn knowledge(&self, model: &str, version: u32) -> Result<KnowledgeSet, CliError> {
        self.store.load_knowledge(model, version).map_err(|e| match e {
            StoreError::NotFound(_) => {
                CliError::Missing(format!("knowledge v{version} for {model}; run `macd learn` first"))
            }
            other => other.into(),
        })
    }

    /// Latest stored version per model.
    fn pin_knowledge(&self, models: &[String]) -> Result<BTreeMap<String, u32>, CliError> {
        let mut pins = BTreeMap::new();
        for model in models {
            let versions = self.store.knowledge_versions(model)?;
            let latest = versions
                .last()
                .ok_or_else(|| CliError::Missing(format!("knowledge for {model}; run `macd learn` first")))?;
            pins.insert(model.clone(), *latest);
        }
        Ok(pins)
    }

    fn diagnostician(&self, model: &str, gateway: &Gateway) -> Diagnostician {
        Diagnostician::new(model, self.cfg.generation_for(model), gateway.clone(), self.rules.clone())
    }
}

fn load_rules(cfg: &Config, base_dir: &Path, store: &Store) -> Result<MatchRuleSet, CliError> {
    if let Some(path) = &cfg.rules {
        let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
        return MatchRuleSet::load(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    match store.load_rules("default") {
        Ok(r) => Ok(r),
        Err(StoreError::NotFound(_)) => Ok(MatchRuleSet::default_rules()),
        Err(e) => Err(e.into()),
    }
}

fn build_embedder(cfg: &EmbedderConfig) -> Result<Arc<dyn Embedder>, CliError> {
    Ok(match cfg.kind {
        EmbedderKind::Fallback => Arc::new(FallbackEmbedder::new(cfg.dimension)),
        EmbedderKind::Http => {
            let base = cfg
                .base_url
                .clone()
                .or_else(|| std::env::var(EMBED_BASE_ENV).ok())
                .ok_or_else(|| CliError::Config(format!("embedder.base_url or {EMBED_BASE_ENV} must be set")))?;
            Arc::new(HttpEmbedder::new(base, &cfg.model).map_err(|e| CliError::Config(e.to_string()))?)
        }
    })
}

fn build_backend(ctx: &Ctx) -> Result<Arc<dyn ChatBackend>, CliError> {
    let b = &ctx.cfg.backend;
    Ok(match b.kind {
        BackendKind::Scripted => match &b.script {
            Some(path) => {
                let path = ctx.resolve(path);
                Arc::new(ScriptedBackend::load(&path).map_err(|e| CliError::Config(e.to_string()))?)
            }
            None => Arc::new(ScriptedBackend::new(b.fallback.clone().unwrap_or_default())),
        },
        BackendKind::OpenAi => {
            let base = b
                .base_url
                .clone()
                .or_else(|| std::env::var(LLM_BASE_ENV).ok())
                .ok_or_else(|| CliError::Config(format!("backend.base_url or {LLM_BASE_ENV} must be set")))?;
            let key = std::env::var(crate::gateway::backend::LLM_KEY_ENV).ok();
            Arc::new(OpenAiBackend::new(base, key, b.retry.clone())?)
        }
        BackendKind::Replay => {
            let run = b
                .replay_run
                .as_deref()
                .ok_or_else(|| CliError::Config("backend.replay_run must name a run".into()))?;
            Arc::new(replay_backend(&ctx.store, run)?)
        }
    })
}

fn replay_backend(store: &Store, run: &str) -> Result<ReplayBackend, CliError> {
    let path = store.run_log_path(run);
    if !path.exists() {
        return Err(CliError::Missing(format!("run log {}", path.display())));
    }
    ReplayBackend::load(&path).map_err(Into::into)
}

fn dialect(cfg: &Config) -> TagDialect {
    TagDialect::by_name(&cfg.dialect).unwrap_or_default()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn to_bytes(v: &Value) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Snapshot used for hashing and the manifest: the config as written.
fn config_snapshot(cfg: &Config) -> Value {
    let mut v = to_value(cfg);
    if let Some(obj) = v.as_object_mut() {
        obj.remove("store");
    }
    v
}

fn all_failed(report: &EvaluationReport) -> bool {
    !report.outcomes.is_empty() && report.outcomes.iter().all(|o| o.result.is_none())
}

fn backend_check(report: &EvaluationReport) -> Result<(), CliError> {
    if all_failed(report) {
        let first = report.outcomes.iter().find_map(|o| o.error.clone()).unwrap_or_default();
        return Err(CliError::Backend(format!("every diagnosis for {} failed: {first}", report.model_id)));
    }
    Ok(())
}

fn report_summary(report: &EvaluationReport) -> Value {
    json!({
        "model_id": report.model_id,
        "condition": report.condition,
        "level": report.level,
        "per_disease": report.per_disease,
        "average": report.average,
        "cases": report.outcomes.len(),
        "failed": report.outcomes.iter().filter(|o| o.result.is_none()).count(),
    })
}

// Stages.

fn stage_guideline(ctx: &Ctx, gateway: &Gateway, name: &str, text: &str, diseases: &[DiseaseId]) -> Result<StageOutput, CliError> {
    let models = ctx.cfg.require_agents()?;
    let bundle = build_guideline_condensation_prompt(text, diseases).map_err(|e| CliError::Config(e.to_string()))?;
    let gen = ctx.cfg.generation_for(&models[0]);
    let completion = gateway.complete(LlmRequest::new(&bundle, &gen).pass(Some("guideline")))?;
    let condensed = completion.text.trim().to_string();
    Ok(StageOutput {
        results: json!({ "guideline": name, "model_id": models[0], "condensed": condensed }),
        summary: format!("condensed guideline `{name}` ({} chars)", condensed.len()),
        artifacts: vec![Artifact::Guideline(name.to_string(), condensed)],
    })
}

fn stage_partition(ctx: &Ctx, gateway: &Gateway, split_name: &str) -> Result<StageOutput, CliError> {
    let models = ctx.cfg.require_agents()?;
    let labeled = ctx.labeled()?;
    let canonical: Vec<LabeledCase> = labeled.values().filter(|lc| lc.truth.disease.is_canonical()).cloned().collect();

    let mut reports = Vec::new();
    for model in &models {
        let report = evaluate(
            &canonical,
            &KnowledgeCondition::Zero,
            &ctx.diagnostician(model, gateway),
            MatchLevel::Exact,
            Some("partition"),
        );
        backend_check(&report)?;
        reports.push(report);
    }

    let mut pool: BTreeMap<DiseaseId, Vec<String>> = BTreeMap::new();
    for lc in &canonical {
        let id = &lc.case.case_id;
        if reports.iter().any(|r| r.outcomes.iter().any(|o| &o.case_id == id && o.correct_exact)) {
            pool.entry(lc.truth.disease.clone()).or_default().push(id.clone());
        }
    }

    let mut split = DatasetSplit {
        name: split_name.to_string(),
        ..DatasetSplit::default()
    };
    let mut diagnoses: SplitDiagnoses = BTreeMap::new();
    for model in &models {
        let per_model = split.learning.entry(model.clone()).or_default();
        for disease in DiseaseId::CANONICAL {
            let quota = ctx.cfg.partition.quota(&disease);
            split.quotas.insert(disease.clone(), quota);
            let mut candidates = pool.get(&disease).cloned().unwrap_or_default();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.cfg.partition.seed, &format!("{model}:{disease}")));
            candidates.shuffle(&mut rng);
            candidates.truncate(quota);
            if candidates.is_empty() {
                continue;
            }
            for id in &candidates {
                // The model's own correct answer, else the first agent's.
                let record = std::iter::once(model)
                    .chain(models.iter())
                    .filter_map(|m| reports.iter().find(|r| &r.model_id == m))
                    .filter_map(|r| r.outcomes.iter().find(|o| &o.case_id == id && o.correct_exact))
                    .find_map(|o| o.result.clone())
                    .expect("pooled case has a correct diagnosis");
                diagnoses.entry(model.clone()).or_default().insert(id.clone(), record);
                split.sampling.insert(id.clone());
            }
            per_model.insert(disease.clone(), candidates);
        }
    }
    split.test = labeled.keys().filter(|id| !split.sampling.contains(*id)).cloned().collect();
    split.check_invariants().map_err(CliError::Other)?;

    let counts: BTreeMap<String, Value> = DiseaseId::CANONICAL
        .iter()
        .map(|d| {
            let learning: BTreeMap<&String, usize> =
                models.iter().map(|m| (m, split.learning_cases(m, d).len())).collect();
            let test = split.test.iter().filter(|id| labeled[*id].truth.disease == *d).count();
            (
                d.canonical_name(),
                json!({
                    "pool": pool.get(d).map_or(0, Vec::len),
                    "quota": ctx.cfg.partition.quota(d),
                    "learning": learning,
                    "test": test,
                }),
            )
        })
        .collect();
    let summary = format!(
        "split `{split_name}`: {} sampling, {} test cases across {} models",
        split.sampling.len(),
        split.test.len(),
        models.len()
    );
    Ok(StageOutput {
        results: json!({
            "split": split,
            "per_disease": counts,
            "zero_knowledge": reports.iter().map(report_summary).collect::<Vec<_>>(),
        }),
        summary,
        artifacts: vec![
            Artifact::RunJson("reports.json", to_value(&reports)),
            Artifact::Split(split, diagnoses),
        ],
    })
}

fn stage_learn(ctx: &Ctx, gateway: &Gateway, split_name: &str) -> Result<StageOutput, CliError> {
    let models = ctx.cfg.require_agents()?;
    let split = ctx.split(split_name)?;
    let diagnoses = ctx.store.load_split_diagnoses(split_name)?;
    let labeled = ctx.labeled()?;
    if !ctx.replaying {
        for model in &models {
            if let Some(v) = ctx.store.knowledge_versions(model)?.last() {
                return Err(CliError::Config(format!(
                    "knowledge for {model} already exists (v{v}); use `macd refine` or a fresh store"
                )));
            }
        }
    }
    let mut artifacts = Vec::new();
    let mut per_model = BTreeMap::new();
    let mut total = 0;
    for model in &models {
        let mut examples = Vec::new();
        for (disease, ids) in split.learning.get(model).into_iter().flatten() {
            for id in ids {
                let lc = labeled
                    .get(id)
                    .ok_or_else(|| CliError::Missing(format!("learning case {id} is no longer in the store")))?;
                let record = diagnoses
                    .get(model)
                    .and_then(|m| m.get(id))
                    .ok_or_else(|| CliError::Missing(format!("partition diagnosis for {model}/{id}")))?;
                examples.push((lc, disease, record.raw_text.clone()));
            }
        }
        let examples: Vec<LearningExample<'_>> = examples
            .iter()
            .map(|(lc, disease, text)| LearningExample {
                case: &lc.case,
                disease,
                diagnosis_text: text,
            })
            .collect();
        let harvest = harvest_concepts(&examples, model, gateway, &ctx.cfg.generation_for(model))?;
        let set = distill_knowledge(model, &harvest.concepts, &ctx.cfg.refinement, ctx.embedder.as_ref())
            .map_err(|e| CliError::Other(e.to_string()))?;
        let retained: usize = set.diseases.values().map(|s| s.len()).sum();
        total += retained;
        per_model.insert(
            model.clone(),
            json!({
                "learning_cases": examples.len(),
                "candidates": harvest.concepts.len(),
                "skipped": harvest.skipped,
                "retained": retained,
                "knowledge": set,
            }),
        );
        artifacts.push(Artifact::Knowledge(set));
    }
    Ok(StageOutput {
        results: json!({ "split": split_name, "models": per_model }),
        summary: format!("learned {total} concepts for {} models (knowledge v1)", models.len()),
        artifacts,
    })
}

fn stage_refine(
    ctx: &Ctx,
    gateway: &Gateway,
    split_name: &str,
    all_cases: bool,
    pins: &BTreeMap<String, u32>,
) -> Result<StageOutput, CliError> {
    let labeled = ctx.labeled()?;
    let eval_cases: Vec<&LabeledCase> = if all_cases {
        labeled.values().collect()
    } else {
        let split = ctx.split(split_name)?;
        split.sampling.iter().filter_map(|id| labeled.get(id)).collect()
    };
    let mut artifacts = Vec::new();
    let mut ablation_rows = Vec::new();
    let mut per_model = BTreeMap::new();
    let mut removed_total = 0;
    for (model, version) in pins {
        let set = ctx.knowledge(model, *version)?;
        let agent = ctx.diagnostician(model, gateway);
        let mut reports: Vec<ImportanceReport> = Vec::new();
        for (disease, slice) in &set.diseases {
            if slice.is_empty() {
                continue;
            }
            if !eval_cases.iter().any(|c| &c.truth.disease == disease) {
                tracing::warn!(%model, %disease, "no evaluation cases; slice left unrefined");
                continue;
            }
            let evaluator = KnowledgeSliceEvaluator {
                agent: &agent,
                base: &set,
                disease: disease.clone(),
                cases: eval_cases.clone(),
                level: MatchLevel::Exact,
            };
            let report = importance_assessment(disease, slice, &evaluator, &ctx.cfg.refinement)
                .map_err(|e| CliError::Backend(e.to_string()))?;
            for entry in &report.entries {
                ablation_rows.push(json!({ "model_id": model, "disease": disease, "entry": entry }));
            }
            removed_total += report.removed.len();
            reports.push(report);
        }
        let next = apply_refinement(&set, &reports).map_err(|e| CliError::Other(e.to_string()))?;
        per_model.insert(
            model.clone(),
            json!({
                "from_version": set.version,
                "to_version": next.version,
                "reports": reports,
                "knowledge": next,
            }),
        );
        artifacts.push(Artifact::Knowledge(next));
    }
    artifacts.push(Artifact::RunJsonl("ablation.jsonl", ablation_rows));
    Ok(StageOutput {
        results: json!({ "split": split_name, "all_cases": all_cases, "models": per_model }),
        summary: format!("refined {} knowledge sets; removed {removed_total} negative concepts", pins.len()),
        artifacts,
    })
}

fn check_condition_syntax(raw: &str) -> Result<(), CliError> {
    let (kind, arg) = raw.split_once(':').unwrap_or((raw, ""));
    match (kind, arg.is_empty()) {
        ("zero" | "cot" | "chain-of-thought" | "self-learned", true) | ("guideline" | "few-shot", false) => Ok(()),
        _ => Err(CliError::Config(format!(
            "unknown condition `{raw}`; expected zero, self-learned, cot, guideline:NAME or few-shot:PATH"
        ))),
    }
}

fn parse_condition(ctx: &Ctx, raw: &str, model: &str, knowledge: &BTreeMap<String, u32>) -> Result<KnowledgeCondition, CliError> {
    let (kind, arg) = raw.split_once(':').unwrap_or((raw, ""));
    Ok(match kind {
        "zero" => KnowledgeCondition::Zero,
        "cot" | "chain-of-thought" => KnowledgeCondition::ChainOfThought,
        "self-learned" => {
            let version = knowledge
                .get(model)
                .ok_or_else(|| CliError::Missing(format!("knowledge for {model}; run `macd learn` first")))?;
            KnowledgeCondition::SelfLearned {
                knowledge: ctx.knowledge(model, *version)?,
            }
        }
        "guideline" if !arg.is_empty() => KnowledgeCondition::Guideline {
            name: arg.to_string(),
            text: ctx.store.load_guideline(arg).map_err(|e| match e {
                StoreError::NotFound(_) => {
                    CliError::Missing(format!("guideline `{arg}`; run `macd ingest --guideline ..` first"))
                }
                other => other.into(),
            })?,
        },
        "few-shot" if !arg.is_empty() => {
            let path = ctx.resolve(Path::new(arg));
            KnowledgeCondition::FewShot {
                name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                exemplars: std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Missing(format!("few-shot exemplars {}: {e}", path.display())))?,
            }
        }
        _ => {
            return Err(CliError::Config(format!(
                "unknown condition `{raw}`; expected zero, self-learned, cot, guideline:NAME or few-shot:PATH"
            )))
        }
    })
}

fn scoped_cases(ctx: &Ctx, split_name: &str, scope: CaseScope) -> Result<Vec<LabeledCase>, CliError> {
    let labeled = ctx.labeled()?;
    Ok(match scope {
        CaseScope::All => labeled.into_values().collect(),
        CaseScope::Test | CaseScope::Sampling => {
            let split = ctx.split(split_name)?;
            let ids = if scope == CaseScope::Test { &split.test } else { &split.sampling };
            ids.iter().filter_map(|id| labeled.get(id).cloned()).collect()
        }
    })
}

fn stage_diagnose(
    ctx: &Ctx,
    gateway: &Gateway,
    split_name: &str,
    condition: &str,
    scope: CaseScope,
    level: Level,
    knowledge: &BTreeMap<String, u32>,
) -> Result<StageOutput, CliError> {
    let models = ctx.cfg.require_agents()?;
    let cases = scoped_cases(ctx, split_name, scope)?;
    let mut reports = Vec::new();
    for model in &models {
        let cond = parse_condition(ctx, condition, model, knowledge)?;
        let report = evaluate(&cases, &cond, &ctx.diagnostician(model, gateway), level.into(), Some("diagnose"));
        backend_check(&report)?;
        reports.push(report);
    }
    let csv: String = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let text = r.to_csv();
            if i == 0 {
                text
            } else {
                text.lines().skip(1).map(|l| format!("{l}\n")).collect()
            }
        })
        .collect();
    let averages: Vec<String> = reports.iter().map(|r| format!("{} {:.3}", r.model_id, r.average)).collect();
    Ok(StageOutput {
        results: json!({
            "condition": condition,
            "cases": cases.len(),
            "reports": reports,
        }),
        summary: format!("diagnosed {} cases under `{condition}`: {}", cases.len(), averages.join(", ")),
        artifacts: vec![
            Artifact::RunJson("reports.json", to_value(&reports)),
            Artifact::RunText("accuracy.csv", csv),
        ],
    })
}

fn truths(labeled: &BTreeMap<String, LabeledCase>) -> BTreeMap<String, DiseaseId> {
    labeled.iter().map(|(id, lc)| (id.clone(), lc.truth.disease.clone())).collect()
}

fn stage_consult(
    ctx: &Ctx,
    gateway: &Gateway,
    split_name: &str,
    knowledge: &BTreeMap<String, u32>,
    run_id: &str,
) -> Result<StageOutput, CliError> {
    ctx.cfg.require_agents()?;
    let labeled = ctx.labeled()?;
    let split = ctx.split(split_name)?;
    let mut agents = Vec::new();
    for a in &ctx.cfg.agents {
        let knowledge = match knowledge.get(&a.model_id) {
            Some(v) => Some(ctx.knowledge(&a.model_id, *v)?),
            None => None,
        };
        agents.push(AgentSpec {
            agent_id: a.agent_id.clone(),
            model_id: a.model_id.clone(),
            knowledge,
        });
    }
    let panel_cfg = PanelConfig {
        agents,
        max_rounds: ctx.cfg.consultation.max_rounds,
        consensus_threshold: ctx.cfg.consultation.consensus_threshold,
        seed: ctx.cfg.consultation.seed,
    };
    let panel = Panel::new(&panel_cfg, gateway, &ctx.cfg.generation, ctx.rules.clone(), ctx.embedder.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cases: Vec<&LabeledCase> = split.test.iter().filter_map(|id| labeled.get(id)).collect();
    let patient_cases: Vec<_> = cases.iter().map(|lc| &lc.case).collect();
    let records = panel.run_batch(&patient_cases);
    if !records.is_empty() && records.iter().all(|r| r.final_opinions().is_empty()) {
        return Err(CliError::Backend("every panel agent failed on every case".into()));
    }
    let queue: Vec<QueueEntry> = records
        .iter()
        .zip(&cases)
        .filter(|(r, _)| r.is_escalated())
        .map(|(r, lc)| QueueEntry::from_record(r, &lc.case, run_id))
        .collect();
    let metrics = compute_workflow_metrics(&records, &BTreeMap::new(), &truths(&labeled), &ctx.rules, None);
    Ok(StageOutput {
        results: json!({ "records": records, "metrics": metrics }),
        summary: format!(
            "consulted on {} cases: {} consensus, {} escalated",
            records.len(),
            records.len() - queue.len(),
            queue.len()
        ),
        artifacts: vec![Artifact::Consultations(records), Artifact::Enqueue(queue)],
    })
}

fn stage_evaluate(ctx: &Ctx, diagnose_runs: &[String], consult_run: Option<&str>) -> Result<StageOutput, CliError> {
    let labeled = ctx.labeled()?;
    let mut diagnosis = Vec::new();
    let mut csv = String::from("disease,condition,level,model,accuracy\n");
    for run in diagnose_runs {
        let reports: Vec<EvaluationReport> = ctx.store.load_run_artifact(run, "reports.json")?;
        for report in reports {
            let mut entry = json!({ "condition": report.condition, "model_id": report.model_id });
            for level in [MatchLevel::Exact, MatchLevel::Tolerant] {
                let view = report.at_level(level);
                for (d, acc) in &view.per_disease {
                    csv.push_str(&format!(
                        "{d},{},{},{},{:.6}\n",
                        view.condition,
                        level_name(level),
                        view.model_id,
                        acc.accuracy
                    ));
                }
                csv.push_str(&format!(
                    "average,{},{},{},{:.6}\n",
                    view.condition,
                    level_name(level),
                    view.model_id,
                    view.average
                ));
                entry[level_name(level)] = json!({ "per_disease": view.per_disease, "average": view.average });
            }
            diagnosis.push(entry);
        }
    }
    let workflow: Option<WorkflowMetrics> = match consult_run {
        Some(run) => {
            let records = ctx.store.load_consultations(run)?;
            Some(compute_workflow_metrics(&records, &ctx.store.verdicts()?, &truths(&labeled), &ctx.rules, None))
        }
        None => None,
    };
    let summary = match &workflow {
        Some(m) => format!(
            "evaluated {} diagnosis reports; workflow combined accuracy {:.3}, effective opinion rate {:.3} ({} pending)",
            diagnosis.len(),
            m.combined_accuracy,
            m.effective_opinion_rate,
            m.pending
        ),
        None => format!("evaluated {} diagnosis reports", diagnosis.len()),
    };
    Ok(StageOutput {
        results: json!({ "diagnosis": diagnosis, "workflow": workflow }),
        summary,
        artifacts: vec![Artifact::RunText("accuracy.csv", csv)],
    })
}

fn level_name(level: MatchLevel) -> &'static str {
    match level {
        MatchLevel::Exact => "exact",
        MatchLevel::Tolerant => "tolerant",
    }
}

fn execute_stage(ctx: &Ctx, gateway: &Gateway, inv: &Invocation, run_id: &str) -> Result<StageOutput, CliError> {
    match inv {
        Invocation::Guideline { name, text, diseases } => stage_guideline(ctx, gateway, name, text, diseases),
        Invocation::Partition { split } => stage_partition(ctx, gateway, split),
        Invocation::Learn { split } => stage_learn(ctx, gateway, split),
        Invocation::Refine {
            split,
            all_cases,
            knowledge,
        } => stage_refine(ctx, gateway, split, *all_cases, knowledge),
        Invocation::Diagnose {
            split,
            condition,
            cases,
            level,
            knowledge,
        } => stage_diagnose(ctx, gateway, split, condition, *cases, *level, knowledge),
        Invocation::Consult { split, knowledge } => stage_consult(ctx, gateway, split, knowledge, run_id),
        Invocation::Evaluate {
            diagnose_runs,
            consult_run,
        } => stage_evaluate(ctx, diagnose_runs, consult_run.as_deref()),
    }
}

fn persist(store: &Store, run_id: &str, artifacts: Vec<Artifact>) -> Result<(), CliError> {
    for artifact in artifacts {
        match artifact {
            Artifact::Split(split, diagnoses) => {
                store.put_split(&split)?;
                store.put_split_diagnoses(&split.name, &diagnoses)?;
            }
            Artifact::Knowledge(set) => {
                store.put_knowledge(&set)?;
            }
            Artifact::Guideline(name, text) => {
                store.put_guideline(&name, &text)?;
            }
            Artifact::RunJson(file, value) => {
                store.put_run_artifact(run_id, file, &value)?;
            }
            Artifact::RunJsonl(file, rows) => {
                store.put_run_jsonl(run_id, file, &rows)?;
            }
            Artifact::RunText(file, text) => {
                store.put_run_text(run_id, file, &text)?;
            }
            Artifact::Consultations(records) => {
                store.put_consultations(run_id, &records)?;
            }
            Artifact::Enqueue(entries) => {
                store.enqueue(&entries)?;
            }
        }
    }
    Ok(())
}

/// Records and executes one stage; returns the summary line.
fn run_stage(ctx: &Ctx, inv: Invocation) -> Result<String, CliError> {
    let mut inputs = ctx.store.input_digests()?;
    if let (BackendKind::Scripted, Some(script)) = (ctx.cfg.backend.kind, &ctx.cfg.backend.script) {
        let bytes = std::fs::read(ctx.resolve(script))
            .map_err(|e| CliError::Config(format!("{}: {e}", script.display())))?;
        inputs.insert("backend:script".into(), sha256_hex(&bytes));
    }
    let config = config_snapshot(&ctx.cfg);
    let invocation = to_value(&inv);
    let fingerprint = content_hash(&serde_json::to_string(&json!([config, invocation, inputs])).expect("json"));
    let run_id = ctx.store.fresh_run_id(&format!("{}-{}", inv.name(), &fingerprint[..12]));
    let manifest = RunManifest {
        run_id: run_id.clone(),
        command: inv.name().to_string(),
        created_at: chrono::Utc::now(),
        config,
        invocation,
        inputs,
    };
    ctx.store.create_run(&manifest)?;
    let log = RunLog::open(ctx.store.run_log_path(&run_id))
        .map_err(|e| CliError::Other(format!("run log for {run_id}: {e}")))?;
    let gateway = Gateway::new(build_backend(ctx)?)
        .with_log(Arc::new(log))
        .with_dialect(dialect(&ctx.cfg))
        .with_max_in_flight(ctx.cfg.max_in_flight);
    let out = execute_stage(ctx, &gateway, &inv, &run_id)?;
    ctx.store.put_results(&run_id, &to_bytes(&out.results))?;
    persist(&ctx.store, &run_id, out.artifacts)?;
    Ok(format!("{} [run {run_id}]", out.summary))
}

fn replay(ctx: &Ctx, run: &str) -> Result<String, CliError> {
    let manifest = ctx.store.load_manifest(run).map_err(|e| match e {
        StoreError::NotFound(_) => CliError::Missing(format!("run `{run}`")),
        other => other.into(),
    })?;
    let recorded = ctx.store.load_results(run)?;
    let inv: Invocation = serde_json::from_value(manifest.invocation.clone())
        .map_err(|e| CliError::Other(format!("manifest invocation of {run}: {e}")))?;
    let cfg: Config = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CliError::Other(format!("manifest config of {run}: {e}")))?;
    let current = ctx.store.input_digests()?;
    for (path, digest) in &manifest.inputs {
        if path.starts_with("backend:") {
            continue;
        }
        if current.get(path) != Some(digest) {
            tracing::warn!(%path, "input changed since the recorded run");
        }
    }
    let replay_ctx = Ctx {
        rules: Arc::new(load_rules(&cfg, &ctx.base_dir, &ctx.store)?),
        embedder: build_embedder(&cfg.embedder)?,
        cfg,
        base_dir: ctx.base_dir.clone(),
        store: Store::open(ctx.store.root())?,
        replaying: true,
    };
    let gateway = Gateway::new(Arc::new(replay_backend(&ctx.store, run)?))
        .with_dialect(dialect(&replay_ctx.cfg))
        .with_max_in_flight(replay_ctx.cfg.max_in_flight);
    let out = execute_stage(&replay_ctx, &gateway, &inv, run)?;
    let replayed = to_bytes(&out.results);
    if replayed == recorded {
        return Ok(format!("replay of {run}: results.json identical ({} bytes)", recorded.len()));
    }
    let recorded_text = String::from_utf8_lossy(&recorded);
    let replayed_text = String::from_utf8_lossy(&replayed);
    let line = recorded_text
        .lines()
        .zip(replayed_text.lines())
        .position(|(a, b)| a != b)
        .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
    Err(CliError::Mismatch(format!("replay of {run} differs from results.json at {line}")))
}

fn ingest(ctx: &Ctx, args: &IngestArgs) -> Result<String, CliError> {
    if let Some(path) = &args.guideline {
        let path = ctx.resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        let diseases = if args.diseases.is_empty() {
            DiseaseId::CANONICAL.to_vec()
        } else {
            args.diseases
                .iter()
                .map(|d| DiseaseId::parse_canonical(d).map_err(|e| CliError::Config(e.to_string())))
                .collect::<Result<_, _>>()?
        };
        return run_stage(
            ctx,
            Invocation::Guideline {
                name: args.name.clone(),
                text,
                diseases,
            },
        );
    }
    let (Some(cases_path), Some(labels_path)) = (&args.cases, &args.labels) else {
        return Err(CliError::Config("ingest needs --cases and --labels, or --guideline".into()));
    };
    let read = |p: &PathBuf| {
        let p = ctx.resolve(p);
        if !p.exists() {
            return Err(CliError::Missing(format!("input file {}", p.display())));
        }
        Ok(p)
    };
    let cases: Vec<CaseRecord> = read_jsonl_file(read(cases_path)?).map_err(|e| CliError::Config(e.to_string()))?;
    let labels: Vec<LabelRecord> = read_jsonl_file(read(labels_path)?).map_err(|e| CliError::Config(e.to_string()))?;
    let by_id: BTreeMap<&str, &LabelRecord> = labels.iter().map(|l| (l.case_id.trim(), l)).collect();
    let mut problems = Vec::new();
    let mut diseases = BTreeMap::<DiseaseId, usize>::new();
    let mut seen = BTreeSet::new();
    for case in &cases {
        if !seen.insert(case.case_id.trim()) {
            problems.push(format!("duplicate case id {}", case.case_id));
            continue;
        }
        match by_id.get(case.case_id.trim()) {
            None => problems.push(format!("case {} has no label", case.case_id)),
            Some(label) => match validate_case(case, label) {
                Ok(lc) => *diseases.entry(lc.truth.disease).or_default() += 1,
                Err(e) => problems.push(e.to_string()),
            },
        }
    }
    if !problems.is_empty() {
        let shown: Vec<_> = problems.iter().take(5).cloned().collect();
        return Err(CliError::Config(format!("{} invalid records: {}", problems.len(), shown.join("; "))));
    }
    ctx.store.put_cases(&args.name, &cases)?;
    ctx.store.put_labels(&args.name, &labels)?;
    if matches!(ctx.store.load_rules("default"), Err(StoreError::NotFound(_))) {
        ctx.store.put_rules("default", &ctx.rules)?;
    }
    let breakdown: Vec<String> = diseases.iter().map(|(d, n)| format!("{d} {n}")).collect();
    Ok(format!("ingested {} cases as `{}` ({})", cases.len(), args.name, breakdown.join(", ")))
}

fn serve(ctx: Ctx, args: &ServeArgs) -> Result<String, CliError> {
    let addr = service::bind_address().map_err(CliError::Config)?;
    let state = AppState {
        store: Arc::new(ctx.store),
        rules: ctx.rules,
    };
    let static_dir = args.static_dir.as_ref().map(|p| {
        if p.is_absolute() {
            p.clone()
        } else {
            ctx.base_dir.join(p)
        }
    });
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    runtime
        .block_on(service::serve(state, addr, static_dir))
        .map_err(|e| CliError::Other(format!("service on {addr}: {e}")))?;
    Ok("service stopped".into())
}

/// Runs a parsed command line; returns the summary line.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let config_exists = cli.config.exists();
    let cfg = if config_exists {
        Config::load(&cli.config)?
    } else if cli.config == Path::new("macd.json") {
        Config::default()
    } else {
        return Err(CliError::Config(format!("config file {} not found", cli.config.display())));
    };
    let base_dir = cli
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let store_path = match (&cli.store, &cfg.store) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_absolute() => p.clone(),
        (None, Some(p)) => base_dir.join(p),
        (None, None) => PathBuf::from("macd-store"),
    };
    let store = Store::open(store_path)?;
    let ctx = Ctx {
        rules: Arc::new(load_rules(&cfg, &base_dir, &store)?),
        embedder: build_embedder(&cfg.embedder)?,
        cfg,
        base_dir,
        store,
        replaying: false,
    };
    match &cli.command {
        Command::Ingest(args) => ingest(&ctx, args),
        Command::Partition(args) => {
            let split = ctx.split_name(&args.split);
            run_stage(&ctx, Invocation::Partition { split })
        }
        Command::Learn(args) => {
            let split = ctx.split_name(&args.split);
            run_stage(&ctx, Invocation::Learn { split })
        }
        Command::Refine(args) => {
            let split = ctx.split_name(&args.split);
            let knowledge = ctx.pin_knowledge(&ctx.cfg.require_agents()?)?;
            run_stage(
                &ctx,
                Invocation::Refine {
                    split,
                    all_cases: args.all_cases,
                    knowledge,
                },
            )
        }
        Command::Diagnose(args) => {
            check_condition_syntax(&args.condition)?;
            let split = ctx.split_name(&args.split);
            let knowledge = if args.condition == "self-learned" {
                ctx.pin_knowledge(&ctx.cfg.require_agents()?)?
            } else {
                BTreeMap::new()
            };
            run_stage(
                &ctx,
                Invocation::Diagnose {
                    split,
                    condition: args.condition.clone(),
                    cases: args.cases,
                    level: args.level,
                    knowledge,
                },
            )
        }
        Command::Consult(args) => {
            let split = ctx.split_name(&args.split);
            let knowledge = if args.zero_knowledge {
                BTreeMap::new()
            } else {
                ctx.pin_knowledge(&ctx.cfg.require_agents()?)?
            };
            run_stage(&ctx, Invocation::Consult { split, knowledge })
        }
        Command::Evaluate(args) => {
            let diagnose_runs = if args.diagnose_runs.is_empty() {
                ctx.store
                    .list_runs()?
                    .into_iter()
                    .filter(|r| ctx.store.load_manifest(r).is_ok_and(|m| m.command == "diagnose"))
                    .filter(|r| ctx.store.run_dir(r).join("reports.json").exists())
                    .collect()
            } else {
                args.diagnose_runs.clone()
            };
            let consult_run = match &args.consult_run {
                Some(r) => Some(r.clone()),
                None => ctx.store.latest_consultation_run()?,
            };
            if diagnose_runs.is_empty() && consult_run.is_none() {
                return Err(CliError::Missing("no diagnose or consult runs to evaluate".into()));
            }
            run_stage(
                &ctx,
                Invocation::Evaluate {
                    diagnose_runs,
                    consult_run,
                },
            )
        }
        Command::Serve(args) => serve(ctx, args),
        Command::Replay(args) => replay(&ctx, &args.run),
    }
}

/// Parses `args`, runs the command and prints its outcome; returns the
/// process exit code.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("macd: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os())
}
