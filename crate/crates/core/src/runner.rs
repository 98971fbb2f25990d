//! Manifest-driven experiments: per-seed runs, k x p grids, and reports.
//!
//! A run directory holds `manifest.json`, one `seed-<n>/` directory per seed
//! (split, feature set, mask plan, transcripts, predictions, metrics) and
//! `summary.json`. Every metrics artifact carries the manifest hash.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{predict_from_context, BaselineError, ExternalAdapter, RowEncoder, DEFAULT_L2};
use crate::export::{export_chat_jsonl, finetune_record, sha256_hex, ExportError, FinetuneRecord};
use crate::inference::{
    constrained_binary_decode, ChatBackend, EndpointConfig, HttpChatClient, InferenceError, MockBackend, MockRule,
};
use crate::interpret::{decode_response, run_self_reflection, ReflectionError};
use crate::metrics::{aggregate_seeds, confusion, metrics, ConfusionMatrix, MetricsError, MetricsReport, SummaryStats};
use crate::missing::{
    bin_by_target_missingness, mask_mcar, mask_mcar_targets, natural_split, MaskPlan, MissingError, NaturalSplit,
};
use crate::pool::parallel_map;
use crate::prompt::{
    build_prompt, InstructionSet, Message, PromptError, PromptFormat, PromptInputs, RenderedPrompt,
    SerializationTemplate, Shots, Structure, Variant,
};
use crate::record::PredictionRecord;
use crate::select::{
    import_external_ranking, lasso_path_rank, select_top_p, FeatureSet, RankMethod, RankedFeatures, SelectError,
};
use crate::split::{make_splits, pool_examples, sample_context, ContextSet, Partition, SplitAssignment, SplitError, SplitFractions};
use crate::table::{filter_complete, filter_incomplete, load_table, select_columns, FeatureTable, Schema, TableError};

pub const DEFAULT_SEEDS: [u64; 10] = [36, 73, 105, 254, 314, 492, 564, 688, 777, 825];
pub const ABLATION_SEEDS: [u64; 3] = [36, 73, 314];
pub const NATURAL_POOL_SEED: u64 = 36;
pub const DEFAULT_STRATA_EDGES: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 1.0];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("artifact {path} has manifest hash {found}, expected {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Missing(#[from] MissingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Export(#[from] ExportError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

mod format_text {
    use super::PromptFormat;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &PromptFormat, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PromptFormat, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub table: PathBuf,
    pub schema: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllFeatures {
    #[serde(rename = "all")]
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureCount {
    Count(usize),
    All(AllFeatures),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    LassoPath,
    External {
        path: PathBuf,
    },
    #[default]
    None,
}

fn default_mock_concurrency() -> usize {
    4
}

fn default_l2() -> f64 {
    DEFAULT_L2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointSpec {
    Mock {
        rule: MockRule,
        #[serde(default = "default_mock_concurrency")]
        concurrency: usize,
    },
    Http(EndpointConfig),
    Logreg {
        #[serde(default = "default_l2")]
        l2: f64,
    },
    External(ExternalAdapter),
}

impl EndpointSpec {
    fn is_baseline(&self) -> bool {
        matches!(self, EndpointSpec::Logreg { .. } | EndpointSpec::External(_))
    }
}

fn default_pool_fraction() -> f64 {
    0.2
}

fn default_pool_seed() -> u64 {
    NATURAL_POOL_SEED
}

fn default_edges() -> Vec<f64> {
    DEFAULT_STRATA_EDGES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Missingness {
    #[default]
    None,
    Mcar {
        rate: f64,
        #[serde(default)]
        targets_only: bool,
    },
    Natural {
        #[serde(default = "default_pool_fraction")]
        pool_fraction: f64,
        #[serde(default = "default_pool_seed")]
        pool_seed: u64,
        #[serde(default = "default_edges")]
        edges: Vec<f64>,
    },
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub dataset: DatasetRef,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(with = "format_text")]
    pub format: PromptFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<FeatureCount>,
    #[serde(default)]
    pub selector: Selector,
    pub endpoint: EndpointSpec,
    #[serde(default)]
    pub missingness: Missingness,
    #[serde(default)]
    pub reflection: bool,
    #[serde(default = "yes")]
    pub stratified: bool,
    #[serde(default)]
    pub fractions: SplitFractions,
    /// `keyvalue`, `narrative`, or a template JSON path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<PathBuf>,
    /// Seeds run concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: PathBuf,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Manifest(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Manifest(e.to_string()))
    }

    /// Reads a `.toml` or `.json` manifest. Relative paths inside it are taken
    /// relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = read_text(path)?;
        let mut m = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve_paths(base);
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.table);
        fix(&mut self.dataset.schema);
        if let Selector::External { path } = &mut self.selector {
            fix(path);
        }
        if let Some(t) = &mut self.template {
            if t != "keyvalue" && t != "narrative" && Path::new(t.as_str()).is_relative() {
                *t = base.join(t.as_str()).to_string_lossy().into_owned();
            }
        }
        if let Some(i) = &mut self.instructions {
            fix(i);
        }
        fix(&mut self.output_dir);
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Manifest(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.format.variant == Variant::ReflectionRound {
            return bad("use `reflection = true` with a standard or interpretable format");
        }
        match (self.format.shots, self.k) {
            (Shots::Zero, Some(_)) => return bad("zero-shot formats take no k"),
            (Shots::Few, None | Some(0)) => return bad("few-shot formats need k >= 1"),
            _ => {}
        }
        match (&self.selector, self.p) {
            (Selector::None, Some(_)) => return bad("p needs a feature selector"),
            (Selector::LassoPath | Selector::External { .. }, None) => return bad("a feature selector needs p"),
            _ => {}
        }
        if self.format.structure == Structure::Serialized && self.template.is_none() {
            return bad("serialized formats need a template");
        }
        match &self.missingness {
            Missingness::Mcar { rate, .. } if !(0.0..=1.0).contains(rate) => return bad("mcar rate must be in [0, 1]"),
            Missingness::Natural { .. } if self.selector != Selector::None => {
                return bad("natural missingness runs without feature selection")
            }
            _ => {}
        }
        if self.endpoint.is_baseline() {
            if self.format.shots == Shots::Zero {
                return bad("baselines need few-shot context examples");
            }
            if self.reflection {
                return bad("reflection needs a chat endpoint");
            }
        }
        if let EndpointSpec::Http(cfg) = &self.endpoint {
            cfg.validate()?;
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the manifest JSON with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }
}

/// Loaded inputs shared by every seed.
pub struct Workspace {
    pub table: FeatureTable,
    pub dataset_sha256: String,
    pub instructions: InstructionSet,
    pub template: Option<SerializationTemplate>,
}

impl Workspace {
    pub fn load(m: &ExperimentManifest) -> Result<Self, RunError> {
        let schema_text = read_text(&m.dataset.schema)?;
        let schema = Schema::from_json(&schema_text)?;
        let bytes = fs::read(&m.dataset.table).map_err(io_err(&m.dataset.table))?;
        let table = load_table(&bytes[..], &schema)?;
        let instructions = match &m.instructions {
            Some(p) => InstructionSet::from_json(&read_text(p)?)?,
            None => InstructionSet::builtin(),
        };
        let template = match m.template.as_deref() {
            None => None,
            Some("keyvalue") => Some(SerializationTemplate::builtin_keyvalue()),
            Some("narrative") => Some(SerializationTemplate::builtin_narrative()),
            Some(path) => Some(SerializationTemplate::from_json(&read_text(Path::new(path))?)?),
        };
        Ok(Workspace {
            table,
            dataset_sha256: sha256_hex(&bytes),
            instructions,
            template,
        })
    }

    pub fn from_table(table: FeatureTable) -> Self {
        Workspace {
            table,
            dataset_sha256: String::new(),
            instructions: InstructionSet::builtin(),
            template: None,
        }
    }
}

/// Everything one seed needs before inference.
#[derive(Debug, Clone)]
pub struct SeedPlan {
    pub seed: u64,
    pub split: Option<SplitAssignment>,
    pub natural: Option<NaturalSplit>,
    pub ranking: Option<RankedFeatures>,
    pub features: Option<FeatureSet>,
    pub mask: Option<MaskPlan>,
    /// Complete-case (or, in natural mode, incomplete-case) cohort.
    pub cohort: FeatureTable,
    /// Table the prompts are rendered from: selected columns, masked cells.
    pub table: FeatureTable,
    pub contexts: Vec<ContextSet>,
}

/// Splits, selects, masks and samples contexts for the targets of `targets`
/// (the test split for evaluation, train for fine-tuning exports).
pub fn plan_seed(m: &ExperimentManifest, ws: &Workspace, seed: u64, targets: Partition) -> Result<SeedPlan, RunError> {
    let k = m.k();
    if let Missingness::Natural {
        pool_fraction,
        pool_seed,
        ..
    } = &m.missingness
    {
        let cohort = filter_incomplete(&ws.table);
        let natural = natural_split(&cohort, *pool_fraction, *pool_seed)?;
        let pool: Vec<_> = natural
            .pool
            .iter()
            .map(|id| crate::split::ContextExample {
                subject_id: id.clone(),
                label: cohort.label_of(id).expect("loaded labels are present"),
            })
            .collect();
        let contexts = natural
            .targets
            .iter()
            .map(|t| sample_context(&pool, k, seed, t, "natural_pool"))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(SeedPlan {
            seed,
            split: None,
            natural: Some(natural),
            ranking: None,
            features: None,
            mask: None,
            table: cohort.clone(),
            cohort,
            contexts,
        });
    }

    let cohort = filter_complete(&ws.table);
    let split = make_splits(&cohort, m.fractions, seed, m.stratified)?;
    split.verify(&cohort)?;

    let ranking = match &m.selector {
        Selector::None => None,
        Selector::LassoPath => {
            let train = cohort.subset(split.ids(Partition::Train))?;
            Some(lasso_path_rank(&train)?)
        }
        Selector::External { path } => {
            let doc = fs::read(path).map_err(io_err(path))?;
            Some(import_external_ranking(&doc[..], &cohort)?)
        }
    };
    let features = match (&ranking, m.p) {
        (Some(r), Some(p)) => {
            let p = match p {
                FeatureCount::Count(p) => p,
                FeatureCount::All(_) => r.entries.len(),
            };
            Some(select_top_p(r, p, &cohort.covariate_names())?)
        }
        _ => None,
    };
    let selected = match &features {
        Some(fs) => select_columns(&cohort, &fs.selected)?,
        None => cohort.clone(),
    };

    let target_ids = split.ids(targets).to_vec();
    let (table, mask) = match &m.missingness {
        Missingness::Mcar { rate, targets_only } => {
            let (t, plan) = if *targets_only {
                mask_mcar_targets(&selected, *rate, seed, &target_ids)?
            } else {
                mask_mcar(&selected, *rate, seed)?
            };
            (t, Some(plan))
        }
        _ => (selected, None),
    };

    let pool_part = targets
        .pool()
        .ok_or_else(|| RunError::Manifest(format!("{} has no ICL pool", targets.name())))?;
    let pool = pool_examples(&cohort, &split, pool_part)?;
    let contexts = target_ids
        .iter()
        .map(|t| sample_context(&pool, k, seed, t, pool_part.name()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SeedPlan {
        seed,
        split: Some(split),
        natural: None,
        ranking,
        features,
        mask,
        cohort,
        table,
        contexts,
    })
}

/// First-round prompts for every planned target.
pub fn render_prompts(
    m: &ExperimentManifest,
    ws: &Workspace,
    plan: &SeedPlan,
    format: PromptFormat,
) -> Result<Vec<RenderedPrompt>, RunError> {
    plan.contexts
        .iter()
        .map(|ctx| {
            let empty;
            let ctx = if format.shots == Shots::Zero {
                empty = ContextSet::empty(&ctx.target_id);
                &empty
            } else {
                ctx
            };
            let inputs = PromptInputs {
                table: &plan.table,
                target_id: &ctx.target_id,
                context: ctx,
                instructions: &ws.instructions,
                template: ws.template.as_ref(),
            };
            let _ = m;
            Ok(build_prompt(&inputs, format, None)?)
        })
        .collect()
}

/// Fine-tuning records for the train split of `seed`, one per target and
/// format, format-major.
pub fn finetune_records(
    m: &ExperimentManifest,
    ws: &Workspace,
    seed: u64,
    formats: &[PromptFormat],
) -> Result<Vec<FinetuneRecord>, RunError> {
    if matches!(m.missingness, Missingness::Natural { .. }) {
        return Err(RunError::Manifest("fine-tuning exports use the split protocol".into()));
    }
    let plan = plan_seed(m, ws, seed, Partition::Train)?;
    let mut out = Vec::new();
    for &format in formats {
        for prompt in render_prompts(m, ws, &plan, format)? {
            let label = plan
                .cohort
                .label_of(&prompt.target_id)
                .expect("cohort labels are present");
            out.push(finetune_record(&prompt, label, seed, &m.dataset.name)?);
        }
    }
    Ok(out)
}

pub fn write_finetune_jsonl(records: Vec<FinetuneRecord>, path: &Path) -> Result<usize, RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(export_chat_jsonl(records, BufWriter::new(file))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub target_id: String,
    pub round: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<Message>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<Vec<String>>,
    pub response: String,
    pub label: Option<u8>,
}

struct TargetOutcome {
    record: PredictionRecord,
    transcript: Vec<TranscriptEntry>,
    changed: Option<bool>,
}

enum Predictor {
    Chat { backend: Box<dyn ChatBackend>, concurrency: usize },
    Logreg { l2: f64 },
    External(ExternalAdapter),
}

impl Predictor {
    fn from_spec(spec: &EndpointSpec) -> Result<Self, RunError> {
        Ok(match spec {
            EndpointSpec::Mock { rule, concurrency } => Predictor::Chat {
                backend: Box::new(MockBackend { rule: rule.clone() }),
                concurrency: *concurrency,
            },
            EndpointSpec::Http(cfg) => Predictor::Chat {
                backend: Box::new(HttpChatClient::new(cfg.clone())?),
                concurrency: cfg.concurrency,
            },
            EndpointSpec::Logreg { l2 } => Predictor::Logreg { l2: *l2 },
            EndpointSpec::External(a) => Predictor::External(a.clone()),
        })
    }

    fn name(&self) -> String {
        match self {
            Predictor::Chat { backend, .. } => backend.name(),
            Predictor::Logreg { l2 } => format!("logreg:l2={l2}"),
            Predictor::External(a) => format!("external:{}", a.name),
        }
    }
}

fn decode_label(format: PromptFormat, raw: &crate::inference::RawResponse) -> (Option<u8>, Option<f64>, Option<String>) {
    if format.variant == Variant::Interpretable {
        let d = decode_response(raw);
        (d.label, d.confidence, d.reasoning)
    } else {
        (constrained_binary_decode(raw).ok(), None, None)
    }
}

fn predict_chat(
    m: &ExperimentManifest,
    ws: &Workspace,
    backend: &dyn ChatBackend,
    prompt: &RenderedPrompt,
    seed: u64,
) -> Result<TargetOutcome, RunError> {
    let raw = backend.complete(prompt)?;
    let (label, confidence, reasoning) = decode_label(prompt.format, &raw);
    let record = PredictionRecord {
        target_id: prompt.target_id.clone(),
        label,
        confidence,
        reasoning,
        raw_text: raw.text.clone(),
        seed,
        format: prompt.format,
        endpoint: backend.name(),
        round: 1,
    };
    let mut transcript = vec![TranscriptEntry {
        target_id: prompt.target_id.clone(),
        round: 1,
        messages: Some(prompt.messages.clone()),
        context: None,
        response: raw.text,
        label,
    }];
    if !m.reflection || label.is_none() {
        return Ok(TargetOutcome {
            record,
            transcript,
            changed: None,
        });
    }
    let outcome = run_self_reflection(backend, prompt, &record, &ws.instructions).map_err(|e| match e {
        ReflectionError::Prompt(e) => RunError::Prompt(e),
        ReflectionError::Inference(e) => RunError::Inference(e),
        ReflectionError::InitialUndecodable(id) => RunError::Manifest(format!("undecodable initial answer for {id}")),
    })?;
    transcript.push(TranscriptEntry {
        target_id: prompt.target_id.clone(),
        round: 2,
        messages: None,
        context: None,
        response: outcome.round_two_text.clone(),
        label: outcome.revised.label,
    });
    Ok(TargetOutcome {
        record: outcome.revised,
        transcript,
        changed: Some(outcome.changed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub manifest_hash: String,
    pub dataset: String,
    pub dataset_sha256: String,
    pub format: String,
    pub k: usize,
    pub p: Option<usize>,
    pub seed: u64,
    pub endpoint: String,
    pub instruction_version: String,
    pub template_version: Option<String>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub flip_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_mean_missingness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<Vec<StratumMetrics>>,
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// One seed end to end. Artifacts land in `<output_dir>/seed-<seed>/`.
pub fn run_seed(m: &ExperimentManifest, ws: &Workspace, hash: &str, seed: u64) -> Result<SeedMetrics, RunError> {
    let dir = seed_dir(&m.output_dir, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let plan = plan_seed(m, ws, seed, Partition::Test)?;
    if let Some(split) = &plan.split {
        write_text(&dir.join("split.json"), &to_json(split))?;
    }
    if let Some(natural) = &plan.natural {
        write_text(&dir.join("natural_split.json"), &to_json(natural))?;
    }
    if let Some(r) = &plan.ranking {
        write_text(&dir.join("ranking.csv"), &r.to_csv())?;
    }
    let features = plan.features.clone().unwrap_or_else(|| FeatureSet {
        p: plan.cohort.feature_names().len(),
        selected: plan.cohort.feature_names(),
        always_included: plan.cohort.covariate_names(),
        method: RankMethod::External,
        train_fingerprint: String::new(),
    });
    write_text(&dir.join("features.json"), &to_json(&features))?;
    if let Some(mask) = &plan.mask {
        write_text(&dir.join("mask.json"), &to_json(mask))?;
    }

    let predictor = Predictor::from_spec(&m.endpoint)?;
    let outcomes: Vec<TargetOutcome> = match &predictor {
        Predictor::Chat { backend, concurrency } => {
            let prompts = render_prompts(m, ws, &plan, m.format)?;
            parallel_map(&prompts, *concurrency, |p| predict_chat(m, ws, backend.as_ref(), p, seed))
                .into_iter()
                .collect::<Result<_, _>>()?
        }
        Predictor::Logreg { .. } | Predictor::External(_) => {
            let encoder = RowEncoder::new(&plan.table);
            plan.contexts
                .iter()
                .map(|ctx| {
                    let (label, response) = match &predictor {
                        Predictor::Logreg { l2 } => match predict_from_context(&plan.table, &encoder, ctx, *l2) {
                            Ok(p) => (Some(p.label), serde_json::to_string(&p).expect("serializes")),
                            Err(e @ BaselineError::IncompleteRow(_)) => (None, e.to_string()),
                            Err(e) => return Err(e.into()),
                        },
                        Predictor::External(a) => match a.predict_from_context(&plan.table, &encoder, ctx) {
                            Ok(p) => (Some(p.label), serde_json::to_string(&p).expect("serializes")),
                            Err(e @ BaselineError::IncompleteRow(_)) => (None, e.to_string()),
                            Err(e) => return Err(e.into()),
                        },
                        Predictor::Chat { .. } => unreachable!(),
                    };
                    Ok(TargetOutcome {
                        record: PredictionRecord {
                            target_id: ctx.target_id.clone(),
                            label,
                            confidence: None,
                            reasoning: None,
                            raw_text: response.clone(),
                            seed,
                            format: m.format,
                            endpoint: predictor.name(),
                            round: 1,
                        },
                        transcript: vec![TranscriptEntry {
                            target_id: ctx.target_id.clone(),
                            round: 1,
                            messages: None,
                            context: Some(ctx.examples.iter().map(|e| e.subject_id.clone()).collect()),
                            response,
                            label,
                        }],
                        changed: None,
                    })
                })
                .collect::<Result<_, RunError>>()?
        }
    };

    let transcripts: Vec<&TranscriptEntry> = outcomes.iter().flat_map(|o| &o.transcript).collect();
    write_text(&dir.join("transcripts.jsonl"), &jsonl(&transcripts))?;
    let records: Vec<PredictionRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    write_text(&dir.join("predictions.jsonl"), &jsonl(&records))?;

    let truth: HashMap<String, u8> = records
        .iter()
        .map(|r| {
            let y = plan.cohort.label_of(&r.target_id).expect("targets come from the cohort");
            (r.target_id.clone(), y)
        })
        .collect();
    let cm = confusion(&records, &truth)?;
    let report = metrics(&cm).with_seed(seed);
    let flips: Vec<bool> = outcomes.iter().filter_map(|o| o.changed).collect();
    let flip_rate = (!flips.is_empty()).then(|| flips.iter().filter(|c| **c).count() as f64 / flips.len() as f64);

    let (pool_mean_missingness, strata) = match (&m.missingness, &plan.natural) {
        (Missingness::Natural { edges, .. }, Some(natural)) => {
            let rows = |ids: &[String]| -> Vec<_> { ids.iter().map(|id| plan.cohort.row(id).expect("cohort id").clone()).collect() };
            let s = bin_by_target_missingness(&rows(&natural.targets), &rows(&natural.pool), &plan.cohort, edges)?;
            let by_id: HashMap<&str, &PredictionRecord> = records.iter().map(|r| (r.target_id.as_str(), r)).collect();
            let strata = s
                .bins
                .iter()
                .enumerate()
                .map(|(i, ids)| {
                    let cm = ConfusionMatrix::from_pairs(ids.iter().map(|id| (by_id[id.as_str()].label, truth[id])));
                    StratumMetrics {
                        lower: s.edges[i],
                        upper: s.edges[i + 1],
                        n: ids.len(),
                        confusion: cm,
                        report: metrics(&cm).with_seed(seed),
                    }
                })
                .collect();
            (s.pool_mean_missingness, Some(strata))
        }
        _ => (None, None),
    };

    let sm = SeedMetrics {
        manifest_hash: hash.to_string(),
        dataset: m.dataset.name.clone(),
        dataset_sha256: ws.dataset_sha256.clone(),
        format: m.format.to_string(),
        k: m.k(),
        p: plan.features.as_ref().map(|f| f.p),
        seed,
        endpoint: predictor.name(),
        instruction_version: ws.instructions.version.clone(),
        template_version: ws.template.as_ref().map(|t| t.version.clone()),
        confusion: cm,
        report,
        flip_rate,
        pool_mean_missingness,
        strata,
    };
    write_text(&dir.join("metrics.json"), &to_json(&sm))?;
    Ok(sm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_hash: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub summary: Option<SummaryStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredManifest {
    manifest_hash: String,
    manifest: ExperimentManifest,
}

#[derive(Debug, Clone)]
pub struct ResultSet {
    pub manifest_hash: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedMetrics>,
    pub failures: Vec<SeedFailure>,
    pub summary: Option<SummaryStats>,
}

impl ResultSet {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.seeds.iter().map(|s| s.report.clone()).collect()
    }
}

/// Runs every seed of the manifest. A failing seed is recorded in
/// `summary.json` and the others still run.
pub fn run_experiment(m: &ExperimentManifest) -> Result<ResultSet, RunError> {
    m.validate()?;
    let ws = Workspace::load(m)?;
    run_experiment_with(m, &ws)
}

/// [`run_experiment`] over an already loaded workspace.
pub fn run_experiment_with(m: &ExperimentManifest, ws: &Workspace) -> Result<ResultSet, RunError> {
    m.validate()?;
    let hash = m.hash();
    fs::create_dir_all(&m.output_dir).map_err(io_err(&m.output_dir))?;
    let stored = StoredManifest {
        manifest_hash: hash.clone(),
        manifest: m.clone(),
    };
    write_text(&m.output_dir.join("manifest.json"), &to_json(&stored))?;

    let results = parallel_map(&m.seeds, m.workers, |&seed| (seed, run_seed(m, ws, &hash, seed)));
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(sm) => seeds.push(sm),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let reports: Vec<MetricsReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let summary = if reports.is_empty() {
        None
    } else {
        Some(aggregate_seeds(&reports)?)
    };
    let rs = RunSummary {
        manifest_hash: hash.clone(),
        seeds: m.seeds.clone(),
        failures: failures.clone(),
        summary: summary.clone(),
    };
    write_text(&m.output_dir.join("summary.json"), &to_json(&rs))?;
    Ok(ResultSet {
        manifest_hash: hash,
        output_dir: m.output_dir.clone(),
        seeds,
        failures,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub k: usize,
    pub p: Option<usize>,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub k: usize,
    pub p: Option<usize>,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
    pub runs: usize,
    pub csv: String,
}

pub const GRID_HEADER: &str = "k,p,seed,f1,balanced_accuracy,precision,recall,n,undecodable";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.k,
            r.p.map(|p| p.to_string()).unwrap_or_else(|| "all".into()),
            r.seed,
            opt(r.report.f1),
            opt(r.report.balanced_accuracy),
            opt(r.report.precision),
            opt(r.report.recall),
            r.report.n,
            r.report.undecodable
        ));
    }
    out
}

/// One run per (k, p, seed). Cells go to `<output_dir>/k<k>_p<p>/`; the grid
/// CSV is written to `<output_dir>/grid.csv`. An empty `ps` keeps the base
/// manifest's feature setting.
pub fn run_ablation_grid(
    base: &ExperimentManifest,
    ks: &[usize],
    ps: &[usize],
    seeds: &[u64],
) -> Result<GridResult, RunError> {
    if ks.is_empty() {
        return Err(RunError::Grid("k grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(RunError::Grid("seed list is empty".into()));
    }
    if base.format.shots == Shots::Zero {
        return Err(RunError::Grid("k ablation needs a few-shot format".into()));
    }
    if !ps.is_empty() && base.selector == Selector::None {
        return Err(RunError::Grid("a p grid needs a feature selector".into()));
    }
    let mut probe = base.clone();
    probe.k = Some(ks[0]);
    probe.seeds = seeds.to_vec();
    if let Some(&p) = ps.first() {
        probe.p = Some(FeatureCount::Count(p));
    }
    probe.validate()?;
    let ws = Workspace::load(base)?;

    let p_values: Vec<Option<usize>> = if ps.is_empty() {
        vec![None]
    } else {
        ps.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut runs = 0;
    for &k in ks {
        for &p in &p_values {
            let mut m = base.clone();
            m.k = Some(k);
            m.seeds = seeds.to_vec();
            if let Some(p) = p {
                m.p = Some(FeatureCount::Count(p));
            }
            let cell = match p {
                Some(p) => format!("k{k}_p{p}"),
                None => format!("k{k}_pall"),
            };
            m.output_dir = base.output_dir.join(cell);
            runs += seeds.len();
            match run_experiment_with(&m, &ws) {
                Ok(rs) => {
                    for sm in &rs.seeds {
                        rows.push(GridRow {
                            k,
                            p: sm.p.or(p),
                            seed: sm.seed,
                            report: sm.report.clone(),
                        });
                    }
                    failures.extend(rs.failures.into_iter().map(|f| GridFailure {
                        k,
                        p,
                        seed: Some(f.seed),
                        error: f.error,
                    }));
                }
                Err(e) => failures.push(GridFailure {
                    k,
                    p,
                    seed: None,
                    error: e.to_string(),
                }),
            }
        }
    }
    let csv = grid_csv(&rows);
    fs::create_dir_all(&base.output_dir).map_err(io_err(&base.output_dir))?;
    write_text(&base.output_dir.join("grid.csv"), &csv)?;
    write_text(&base.output_dir.join("grid_failures.json"), &to_json(&failures))?;
    Ok(GridResult {
        rows,
        failures,
        runs,
        csv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRun {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
    pub seeds: Vec<SeedMetrics>,
    pub summary: Option<SummaryStats>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| RunError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn check_hash(path: &Path, expected: &str, found: &str) -> Result<(), RunError> {
    if expected != found {
        return Err(RunError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Loads a run directory, refusing artifacts whose manifest hash disagrees
/// with the stored manifest.
pub fn load_run(dir: &Path) -> Result<ReportRun, RunError> {
    let mpath = dir.join("manifest.json");
    let stored: StoredManifest = parse_json(&mpath)?;
    let expected = stored.manifest.hash();
    check_hash(&mpath, &expected, &stored.manifest_hash)?;
    let mut seeds = Vec::new();
    for &seed in &stored.manifest.seeds {
        let path = seed_dir(dir, seed).join("metrics.json");
        if !path.exists() {
            continue;
        }
        let sm: SeedMetrics = parse_json(&path)?;
        check_hash(&path, &expected, &sm.manifest_hash)?;
        seeds.push(sm);
    }
    let spath = dir.join("summary.json");
    let summary = if spath.exists() {
        let rs: RunSummary = parse_json(&spath)?;
        check_hash(&spath, &expected, &rs.manifest_hash)?;
        rs.summary
    } else {
        None
    };
    Ok(ReportRun {
        dir: dir.to_path_buf(),
        manifest: stored.manifest,
        seeds,
        summary,
    })
}

/// Run directories at or directly under `root`, sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>, RunError> {
    if root.join("manifest.json").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    out.sort();
    Ok(out)
}

pub const REPORT_HEADER: &str = "dataset,format,variant,k,p,seed,metric,value";

fn format_parts(format: &str) -> (String, String) {
    match format.rsplit_once('-') {
        Some((a, b)) => (a.to_string(), b.to_string()),
        None => (format.to_string(), String::new()),
    }
}

/// Long-form CSV: one row per (run, seed, metric).
pub fn report_csv(runs: &[ReportRun]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for run in runs {
        for sm in &run.seeds {
            let (format, variant) = format_parts(&sm.format);
            let variant = if run.manifest.reflection {
                format!("{variant}+reflection")
            } else {
                variant
            };
            let p = sm.p.map(|p| p.to_string()).unwrap_or_else(|| "all".into());
            for name in crate::metrics::METRIC_NAMES {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    sm.dataset,
                    format,
                    variant,
                    sm.k,
                    p,
                    sm.seed,
                    name,
                    opt(sm.report.get(name))
                ));
            }
        }
    }
    out
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

/// Markdown table of per-run means and SDs.
pub fn report_markdown(runs: &[ReportRun]) -> String {
    let mut out = String::from("| run | dataset | format | k | p | metric | mean | sd | seeds |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for run in runs {
        let Some(summary) = &run.summary else { continue };
        let name = &run.manifest.name;
        let first = run.seeds.first();
        let k = first.map(|s| s.k).unwrap_or(0);
        let p = first
            .and_then(|s| s.p)
            .map(|p| p.to_string())
            .unwrap_or_else(|| "all".into());
        for (metric, s) in &summary.metrics {
            out.push_str(&format!(
                "| {name} | {} | {} | {k} | {p} | {metric} | {} | {} | {}/{} |\n",
                run.manifest.dataset.name,
                run.manifest.format,
                fmt4(s.mean),
                fmt4(s.sd),
                s.n_defined,
                summary.n_reports,
            ));
        }
    }
    out
}

/// Writes `metrics.csv` and `summary.md` to `out` for every run under `roots`.
pub fn write_report(roots: &[PathBuf], out: &Path) -> Result<Vec<ReportRun>, RunError> {
    let mut runs = Vec::new();
    for root in roots {
        for dir in find_runs(root)? {
            runs.push(load_run(&dir)?);
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join("metrics.csv"), &report_csv(&runs))?;
    let md = report_markdown(&runs);
    let path = out.join("summary.md");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(md.as_bytes()).map_err(io_err(&path))?;
    Ok(runs)
}
