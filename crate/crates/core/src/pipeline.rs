//! Batch runner: cues, description, target, verdicts, ensemble decisions and report.
//!
//! Every stage result is stored in the run directory under a key derived from
//! its inputs, so a rerun only issues the model calls whose inputs changed or
//! that never completed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use futures::future::BoxFuture;
use futures::{stream, FutureExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifier::{self, ClassifyRequest, ExtractionStatus, Scheme, SchemeVerdict};
use crate::corpus::{
    load_pool, sample_few_shot, ConfidenceLevel, ContextId, CorpusError, DatasetContext,
    FewShotExemplar, Label, MemeRecord, Split, TargetWorkflow,
};
use crate::digest::{digest_json, file_digest};
use crate::ensemble::{audit_line, decide, EnsembleDecision, VerdictMatrix};
use crate::evalkit::{self, confusion, metrics, DeltaReport, MetricsReport};
use crate::gateway::{
    ChatBackend, DecodingConfig, Gateway, Modality, ModelEndpoint, Priority, RefusalPolicy,
    RetryPolicy, TranscriptSink,
};
use crate::guidelines::{self, compose, shuffle, GuidelineError, GuidelineSet, GuidelineStore};
use crate::meme2text::{self, Attribute, CueRouting, CueSet, Description, QuestionBank};
use crate::runstore::{
    Clock, RunManifest, RunStore, RunStoreError, Stage, StageKey, SystemClock,
};
use crate::target::{
    self, HatefulFormsCache, HatefulFormsList, PrideTargetFinding, PrideVariant,
    ProtectedGroupFinding, SeedExamples,
};
use crate::templates::{TemplateError, TemplateStore};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("pre-flight failed: {}", .0.join("; "))]
    Preflight(Vec<String>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] RunStoreError),
    #[error(transparent)]
    Guidelines(#[from] GuidelineError),
    #[error(transparent)]
    Templates(#[from] TemplateError),
    #[error(transparent)]
    Meme2Text(#[from] meme2text::Meme2TextError),
}

fn cfg_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

/// One vision model producing a full set of cues, descriptions and verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionSource {
    pub endpoint: String,
    /// Attribute-level routing to other vision endpoints.
    #[serde(default)]
    pub overrides: BTreeMap<Attribute, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    #[default]
    None,
    Shuffle {
        variants: u32,
    },
    Rephrase,
    File {
        path: PathBuf,
    },
}

impl FromStr for Perturbation {
    type Err = String;

    /// `none`, `shuffle:N`, `rephrase` or `file:PATH`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim().to_ascii_lowercase().as_str() {
            "none" | "" => Ok(Perturbation::None),
            "rephrase" => Ok(Perturbation::Rephrase),
            "shuffle" => {
                let variants = if arg.is_empty() {
                    1
                } else {
                    arg.parse()
                        .map_err(|_| format!("bad shuffle count {arg:?}"))?
                };
                if variants == 0 {
                    return Err("shuffle needs at least one variant".into());
                }
                Ok(Perturbation::Shuffle { variants })
            }
            "file" if !arg.is_empty() => Ok(Perturbation::File { path: arg.into() }),
            _ => Err(format!("unknown perturbation {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub k: usize,
    pub pool: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingSettings {
    pub vision_max_tokens: u32,
    pub text_max_tokens: u32,
}

impl Default for DecodingSettings {
    fn default() -> Self {
        Self {
            vision_max_tokens: 256,
            text_max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrySettings {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetrySettings {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::MCoT, Scheme::UCoT, Scheme::UCoTPlus]
}

fn default_guideline_version() -> String {
    "packaged".into()
}

fn default_concurrency() -> usize {
    4
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub run_id: Option<String>,
    pub context: ContextId,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: Split,
    pub endpoints: Vec<ModelEndpoint>,
    pub vision_sources: Vec<VisionSource>,
    pub integration_llm: String,
    #[serde(default)]
    pub reasoning_llm: Option<String>,
    #[serde(default)]
    pub rephrase_llm: Option<String>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// `packaged`, `latest`, or a version number in `guidelines_dir`.
    #[serde(default = "default_guideline_version")]
    pub guideline_version: String,
    #[serde(default)]
    pub guidelines_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub decoding: DecodingSettings,
    #[serde(default)]
    pub few_shot: Option<FewShotConfig>,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub refusal_markers: Option<Vec<String>>,
    #[serde(default)]
    pub retry: RetrySettings,
    /// Replaces the per-scheme default chain-of-thought trigger.
    #[serde(default)]
    pub cot_trigger: Option<String>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub question_bank: Option<PathBuf>,
    #[serde(default)]
    pub seed_examples: Option<PathBuf>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    /// Reads a TOML config; relative paths are taken against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.manifest.as_mut(),
            self.guidelines_dir.as_mut(),
            self.templates.as_mut(),
            self.question_bank.as_mut(),
            self.seed_examples.as_mut(),
            self.few_shot.as_mut().map(|f| &mut f.pool),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Perturbation::File { path } = &mut self.perturbation {
            fix(path);
        }
    }

    pub fn endpoint(&self, id: &str) -> Result<&ModelEndpoint, PipelineError> {
        self.endpoints
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| cfg_err(format!("endpoint {id:?} is not defined")))
    }

    pub fn reasoning_endpoint(&self) -> Result<&ModelEndpoint, PipelineError> {
        let id = self
            .reasoning_llm
            .as_deref()
            .ok_or_else(|| cfg_err("reasoning_llm is required by the unimodal schemes"))?;
        self.endpoint(id)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            if !seen.insert(e.id.as_str()) {
                return Err(cfg_err(format!("endpoint {:?} defined twice", e.id)));
            }
        }
        if self.schemes.is_empty() {
            return Err(cfg_err("no schemes selected"));
        }
        if self.vision_sources.is_empty() || self.vision_sources.len() > 2 {
            return Err(cfg_err("one or two vision sources are supported"));
        }
        if self.concurrency == 0 {
            return Err(cfg_err("concurrency must be at least 1"));
        }
        for s in &self.vision_sources {
            for id in std::iter::once(&s.endpoint).chain(s.overrides.values()) {
                if self.endpoint(id)?.modality != Modality::Vision {
                    return Err(cfg_err(format!("vision source endpoint {id:?} is not vision-capable")));
                }
            }
        }
        self.endpoint(&self.integration_llm)?;
        if self.schemes.iter().any(|s| !s.is_multimodal()) {
            self.reasoning_endpoint()?;
        }
        if self.schemes.contains(&Scheme::UCoTPlusFS) && self.few_shot.is_none() {
            return Err(cfg_err("ucotplus_fs needs a [few_shot] section"));
        }
        if self.perturbation != Perturbation::None && !self.schemes.contains(&Scheme::UCoTPlus) {
            return Err(cfg_err("guideline perturbations apply to ucotplus, which is not selected"));
        }
        if self.perturbation == Perturbation::Rephrase {
            self.endpoint(
                self.rephrase_llm
                    .as_deref()
                    .ok_or_else(|| cfg_err("rephrase needs rephrase_llm"))?,
            )?;
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry.max_attempts.max(1),
            initial_backoff: Duration::from_millis(self.retry.initial_backoff_ms),
        }
    }

    pub fn refusal_policy(&self) -> RefusalPolicy {
        match &self.refusal_markers {
            Some(m) => RefusalPolicy::new(m.iter().cloned()),
            None => RefusalPolicy::default(),
        }
    }

    pub fn vision_decoding(&self) -> DecodingConfig {
        DecodingConfig::greedy(self.decoding.vision_max_tokens)
    }

    pub fn text_decoding(&self) -> DecodingConfig {
        DecodingConfig::greedy(self.decoding.text_max_tokens)
    }

    pub fn load_templates(&self) -> Result<TemplateStore, PipelineError> {
        Ok(match &self.templates {
            Some(p) => TemplateStore::load(p)?,
            None => TemplateStore::packaged().clone(),
        })
    }

    /// The guideline set named by `guideline_version`.
    pub fn load_guidelines(&self, context: &DatasetContext) -> Result<GuidelineSet, PipelineError> {
        let id = &context.guideline_id;
        match self.guideline_version.as_str() {
            "packaged" => Ok(GuidelineSet::packaged(id)?),
            v => {
                let dir = self
                    .guidelines_dir
                    .as_ref()
                    .ok_or_else(|| cfg_err(format!("guideline version {v:?} needs guidelines_dir")))?;
                let store = GuidelineStore::open(dir)?;
                Ok(if v == "latest" {
                    store.latest(id)?
                } else {
                    store.load(id, v)?
                })
            }
        }
    }

    /// Run id from the config, or one derived from the config digest.
    pub fn effective_run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", &digest_json(self)[..12]))
    }
}

/// Verdict slot name: `scheme[@variant]/source`.
pub fn verdict_slot(scheme: Scheme, variant: Option<&str>, source: &str) -> String {
    match variant {
        Some(v) => format!("{}@{}/{}", scheme.as_str(), v, source),
        None => format!("{}/{}", scheme.as_str(), source),
    }
}

/// Output of the target stage for one meme and source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "workflow", rename_all = "snake_case")]
pub enum TargetPayload {
    ProtectedGroups {
        finding: ProtectedGroupFinding,
        forms: Option<HatefulFormsList>,
    },
    Pride {
        finding: PrideTargetFinding,
    },
}

impl TargetPayload {
    /// Guideline set with generated hateful forms appended where available.
    pub fn apply(&self, base: &GuidelineSet) -> GuidelineSet {
        match self {
            TargetPayload::ProtectedGroups {
                forms: Some(forms), ..
            } => compose(base, forms),
            _ => base.clone(),
        }
    }

    pub fn pride_variant(&self) -> Option<PrideVariant> {
        match self {
            TargetPayload::Pride { finding } => Some(finding.target.variant()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPayload {
    pub matrix: VerdictMatrix,
    pub level: ConfidenceLevel,
    pub decision: EnsembleDecision,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionCounts {
    pub matched: u64,
    pub fallback_matched: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    /// Verdict slot without the meme, e.g. `ucotplus/qwen`.
    pub slot: String,
    pub verdicts: usize,
    pub missing: usize,
    pub extraction: ExtractionCounts,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub context: ContextId,
    pub meme_count: usize,
    pub labeled_count: usize,
    pub slots: Vec<SlotReport>,
    pub ensemble: Option<MetricsReport>,
    pub undecided: usize,
    /// Every slot against the U-CoT slot of the same source.
    pub deltas: Vec<DeltaReport>,
    /// Mean (accuracy, macro-F1) delta over shuffle variants, per source.
    pub shuffle_mean_delta: BTreeMap<String, (f64, f64)>,
}

impl RunReport {
    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<(String, MetricsReport)> = self
            .slots
            .iter()
            .filter_map(|s| s.metrics.clone().map(|m| (s.slot.clone(), m)))
            .collect();
        if let Some(e) = &self.ensemble {
            rows.push(("ensemble".into(), e.clone()));
        }
        let mut out = format!(
            "# Run {}\n\nContext: {}. Memes: {} ({} labeled).\n\n",
            self.run_id, self.context, self.meme_count, self.labeled_count
        );
        out.push_str(&evalkit::render_table(&rows));
        if self.undecided > 0 {
            out.push_str(&format!("\nUndecided memes: {}\n", self.undecided));
        }
        if !self.deltas.is_empty() {
            out.push_str("\n## Deltas over U-CoT\n\n| Setting | Δ Acc. | Δ F1 |\n|---|---:|---:|\n");
            for d in &self.deltas {
                out.push_str(&format!(
                    "| {} | {:+.2} | {:+.2} |\n",
                    d.variant_id, d.delta_accuracy, d.delta_macro_f1
                ));
            }
        }
        for (source, (acc, f1)) in &self.shuffle_mean_delta {
            out.push_str(&format!(
                "\nMean shuffle delta for {source}: {acc:+.2} Acc., {f1:+.2} F1\n"
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub meme_id: String,
    pub slot: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub computed: BTreeMap<Stage, usize>,
    pub reused: BTreeMap<Stage, usize>,
    pub failures: Vec<StageFailure>,
    pub warnings: Vec<String>,
    pub report: Option<RunReport>,
}

pub struct RunOptions {
    /// Stop once this stage has been processed.
    pub stop_after: Option<Stage>,
    pub skip_preflight: bool,
    pub clock: Arc<dyn Clock>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stop_after: None,
            skip_preflight: false,
            clock: Arc::new(SystemClock),
        }
    }
}

/// A guideline set under which U-CoT+ is run, besides the base one.
struct GuidelineVariant {
    name: String,
    set: GuidelineSet,
    /// Shuffle variants reorder the per-meme composed set with this seed.
    shuffle_seed: Option<u64>,
}

struct VerdictPlan {
    scheme: Scheme,
    variant: Option<GuidelineVariant>,
}

impl VerdictPlan {
    fn slot(&self, source: &str) -> String {
        verdict_slot(self.scheme, self.variant.as_ref().map(|v| v.name.as_str()), source)
    }
}

struct Source {
    id: String,
    routing: CueRouting,
}

struct Runner<'a> {
    config: &'a RunConfig,
    memes: &'a [MemeRecord],
    context: DatasetContext,
    templates: TemplateStore,
    bank: QuestionBank,
    seeds: SeedExamples,
    base_guidelines: GuidelineSet,
    sources: Vec<Source>,
    integration: ModelEndpoint,
    reasoning: Option<ModelEndpoint>,
    exemplars: Option<Vec<FewShotExemplar>>,
    refusal: RefusalPolicy,
    gateway: Gateway,
    store: RunStore,
    clock: Arc<dyn Clock>,
    forms_cache: HatefulFormsCache,
    /// Serializes hateful-forms generation so each group set is generated once.
    forms_lock: tokio::sync::Mutex<()>,
    meme_digests: Vec<String>,
}

#[derive(Default)]
struct Tally {
    computed: usize,
    reused: usize,
    failures: Vec<StageFailure>,
    warnings: Vec<String>,
}

type Job<'f> = (StageKey, BoxFuture<'f, Result<Value, String>>);

/// Verdict keys of this run by (meme index, slot).
type VerdictKeys = BTreeMap<(usize, String), StageKey>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("stage payload serializes")
}

/// Runs (or resumes) the pipeline over `memes`, writing under `root/<run_id>`.
pub async fn run_pipeline(
    config: &RunConfig,
    memes: &[MemeRecord],
    backend: Arc<dyn ChatBackend>,
    root: &Path,
    options: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let memes = match config.limit {
        Some(n) => &memes[..n.min(memes.len())],
        None => memes,
    };
    if let Some(m) = memes.iter().find(|m| m.context != config.context) {
        return Err(cfg_err(format!(
            "meme {} belongs to context {}, the run is for {}",
            m.meme_id, m.context, config.context
        )));
    }
    let context = config.context.context();
    let templates = config.load_templates()?;
    let bank = match &config.question_bank {
        Some(p) => QuestionBank::load(p)?,
        None => QuestionBank::packaged(&context.question_bank_id)?,
    };
    let seeds = match &config.seed_examples {
        Some(p) => SeedExamples::load(p).map_err(|e| cfg_err(e.to_string()))?,
        None => SeedExamples::packaged().clone(),
    };
    let base_guidelines = config.load_guidelines(&context)?;
    let exemplars = match &config.few_shot {
        Some(fs) => {
            let pool = load_pool(&fs.pool, &context.label_lexicon)?;
            Some(sample_few_shot(&pool, fs.k, config.seed)?)
        }
        None => None,
    };
    let mut sources = Vec::new();
    for s in &config.vision_sources {
        let mut routing = CueRouting::single(config.endpoint(&s.endpoint)?.clone());
        for (attr, id) in &s.overrides {
            routing.overrides.insert(*attr, config.endpoint(id)?.clone());
        }
        sources.push(Source {
            id: s.endpoint.clone(),
            routing,
        });
    }
    let reasoning = if config.schemes.iter().any(|s| !s.is_multimodal()) {
        Some(config.reasoning_endpoint()?.clone())
    } else {
        None
    };

    let run_id = config.effective_run_id();
    let manifest_config = json!({
        "config": config,
        "templates_version": templates.version,
        "templates_digest": templates.digest(),
        "question_bank": {"id": bank.bank_id, "version": bank.version},
        "guidelines": {
            "id": base_guidelines.guideline_id,
            "version": base_guidelines.version,
            "content_digest": base_guidelines.content_digest(),
        },
        "seed_examples_version": seeds.version,
    });
    let manifest = RunManifest::new(&run_id, vec![config.context], manifest_config, options.clock.now());
    let store = RunStore::open_or_create(root, manifest)?;
    store.write_file(
        "memes.json",
        &(serde_json::to_string_pretty(memes).expect("memes serialize") + "\n"),
    )?;
    let transcript = TranscriptSink::file(&store.transcript_path()).map_err(|source| {
        RunStoreError::Io {
            path: store.transcript_path(),
            source,
        }
    })?;
    let gateway = Gateway::new(backend, Arc::new(transcript), config.concurrency)
        .with_retry(config.retry_policy());

    let meme_digests = memes
        .iter()
        .map(|m| {
            digest_json(&json!({
                "meme_id": m.meme_id,
                "context": m.context,
                "image": file_digest(&m.image_path()),
                "ocr": m.ocr_text,
            }))
        })
        .collect();

    let runner = Runner {
        config,
        memes,
        context,
        templates,
        bank,
        seeds,
        base_guidelines,
        sources,
        integration: config.endpoint(&config.integration_llm)?.clone(),
        reasoning,
        exemplars,
        refusal: config.refusal_policy(),
        gateway,
        store,
        clock: options.clock.clone(),
        forms_cache: HatefulFormsCache::new(),
        forms_lock: tokio::sync::Mutex::new(()),
        meme_digests,
    };
    let mut outcome = RunOutcome {
        run_id,
        dir: runner.store.dir().to_path_buf(),
        ..Default::default()
    };
    if !options.skip_preflight {
        runner.preflight().await?;
    }
    runner.run(options.stop_after, &mut outcome).await?;
    Ok(outcome)
}

impl Runner<'_> {
    fn bound_endpoints(&self) -> Vec<&ModelEndpoint> {
        let mut eps: BTreeMap<&str, &ModelEndpoint> = BTreeMap::new();
        for s in &self.sources {
            eps.insert(&s.routing.default.id, &s.routing.default);
            for e in s.routing.overrides.values() {
                eps.insert(&e.id, e);
            }
        }
        eps.insert(&self.integration.id, &self.integration);
        if let Some(r) = &self.reasoning {
            eps.insert(&r.id, r);
        }
        if let (Perturbation::Rephrase, Some(id)) = (&self.config.perturbation, &self.config.rephrase_llm) {
            if let Ok(e) = self.config.endpoint(id) {
                eps.insert(&e.id, e);
            }
        }
        eps.into_values().collect()
    }

    async fn preflight(&self) -> Result<(), PipelineError> {
        let probe = self.templates.probe.text.clone();
        let results = futures::future::join_all(
            self.bound_endpoints()
                .into_iter()
                .map(|e| async { (e.id.clone(), self.gateway.probe(e, &probe).await) }),
        )
        .await;
        let failed: Vec<String> = results
            .into_iter()
            .filter_map(|(id, r)| r.err().map(|e| format!("{id}: {e}")))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Preflight(failed))
        }
    }

    async fn run(&self, stop_after: Option<Stage>, outcome: &mut RunOutcome) -> Result<(), PipelineError> {
        let mut plans = Vec::new();
        let mut verdict_keys = VerdictKeys::new();
        for stage in Stage::ALL {
            let tally = match stage {
                Stage::Cues => self.cues_stage().await?,
                Stage::Description => self.description_stage().await?,
                Stage::Target => self.target_stage().await?,
                Stage::Verdict => {
                    let (p, mut warnings) = self.verdict_plans().await?;
                    plans = p;
                    let (mut tally, keys) = self.verdict_stage(&plans).await?;
                    verdict_keys = keys;
                    tally.warnings.append(&mut warnings);
                    tally
                }
                Stage::Decision => self.decision_stage(&verdict_keys)?,
                Stage::Report => {
                    let (tally, report) = self.report_stage(&plans, &verdict_keys)?;
                    outcome.report = Some(report);
                    tally
                }
            };
            tracing::info!(
                stage = stage.as_str(),
                computed = tally.computed,
                reused = tally.reused,
                failed = tally.failures.len(),
                "stage done"
            );
            *outcome.computed.entry(stage).or_default() += tally.computed;
            *outcome.reused.entry(stage).or_default() += tally.reused;
            outcome.failures.extend(tally.failures);
            outcome.warnings.extend(tally.warnings);
            if stop_after == Some(stage) {
                break;
            }
        }
        Ok(())
    }

    /// Runs the jobs with bounded concurrency and stores results in job order.
    async fn execute(&self, stage: Stage, jobs: Vec<Job<'_>>, tally: &mut Tally) -> Result<(), PipelineError> {
        let n = self.config.concurrency.max(1);
        let mut results = stream::iter(jobs.into_iter().map(|(k, f)| f.map(move |r| (k, r)))).buffered(n);
        while let Some((key, result)) = results.next().await {
            match result {
                Ok(payload) => {
                    self.store.put_payload(&key, payload, self.clock.now())?;
                    tally.computed += 1;
                }
                Err(error) => {
                    tracing::warn!(stage = stage.as_str(), meme = %key.meme_id, slot = %key.slot, %error, "stage item failed");
                    tally.failures.push(StageFailure {
                        stage,
                        meme_id: key.meme_id,
                        slot: key.slot,
                        error,
                    });
                }
            }
        }
        Ok(())
    }

    fn load<T: for<'de> Deserialize<'de>>(&self, key: &StageKey) -> Option<T> {
        self.store
            .get(key)
            .and_then(|r| serde_json::from_value(r.payload).ok())
    }

    fn cues_key(&self, i: usize, src: &Source) -> StageKey {
        let d = digest_json(&json!({
            "meme": self.meme_digests[i],
            "bank": self.bank.digest(),
            "markers": self.templates.markers,
            "routing": src.routing,
            "decoding": self.config.vision_decoding(),
        }));
        StageKey::new(Stage::Cues, &self.memes[i].meme_id, &src.id, &d)
    }

    fn description_key(&self, i: usize, src: &Source) -> StageKey {
        let d = digest_json(&json!({
            "cues": self.cues_key(i, src).input_digest,
            "template": self.templates.integration.get(&self.context.integration_prompt_id),
            "llm": self.integration,
            "refusal": self.refusal,
            "decoding": self.config.text_decoding(),
        }));
        StageKey::new(Stage::Description, &self.memes[i].meme_id, &src.id, &d)
    }

    fn target_needed(&self) -> bool {
        match self.context.target_workflow {
            TargetWorkflow::None => false,
            TargetWorkflow::FhmProtectedGroups => self.config.schemes.contains(&Scheme::UCoTPlus),
            TargetWorkflow::PrideTarget => self.config.schemes.iter().any(|s| !s.is_multimodal()),
        }
    }

    fn target_key(&self, i: usize, src: &Source) -> Option<StageKey> {
        if !self.target_needed() {
            return None;
        }
        let d = digest_json(&json!({
            "description": self.description_key(i, src).input_digest,
            "workflow": self.context.target_workflow,
            "target_templates": self.templates.target,
            "cot": self.templates.cot.generic,
            "markers": self.templates.markers,
            "seeds": self.seeds,
            "llm": self.reasoning,
            "decoding": self.config.text_decoding(),
        }));
        Some(StageKey::new(Stage::Target, &self.memes[i].meme_id, &src.id, &d))
    }

    async fn cues_stage(&self) -> Result<Tally, PipelineError> {
        let mut tally = Tally::default();
        let mut jobs: Vec<Job<'_>> = Vec::new();
        for (i, meme) in self.memes.iter().enumerate() {
            for src in &self.sources {
                let key = self.cues_key(i, src);
                if self.store.contains(&key) {
                    tally.reused += 1;
                    continue;
                }
                let fut = async move {
                    meme2text::extract_cues(
                        &self.gateway,
                        meme,
                        &self.bank,
                        &src.routing,
                        &self.templates,
                        &self.config.vision_decoding(),
                    )
                    .await
                    .map(|c| to_value(&c))
                    .map_err(|e| e.to_string())
                };
                jobs.push((key, fut.boxed()));
            }
        }
        self.execute(Stage::Cues, jobs, &mut tally).await?;
        Ok(tally)
    }

    async fn description_stage(&self) -> Result<Tally, PipelineError> {
        let mut tally = Tally::default();
        let mut jobs: Vec<Job<'_>> = Vec::new();
        for (i, meme) in self.memes.iter().enumerate() {
            for src in &self.sources {
                let key = self.description_key(i, src);
                if self.store.contains(&key) {
                    tally.reused += 1;
                    continue;
                }
                let Some(cues) = self.load::<CueSet>(&self.cues_key(i, src)) else {
                    continue;
                };
                let fut = async move {
                    meme2text::integrate(
                        &self.gateway,
                        &cues,
                        &meme.ocr_text,
                        &self.context,
                        &self.integration,
                        &self.templates,
                        &self.refusal,
                        &self.config.text_decoding(),
                    )
                    .await
                    .map(|d| to_value(&d))
                    .map_err(|e| e.to_string())
                };
                jobs.push((key, fut.boxed()));
            }
        }
        self.execute(Stage::Description, jobs, &mut tally).await?;
        Ok(tally)
    }

    async fn identify_target(&self, meme: &MemeRecord, description: &str) -> Result<TargetPayload, String> {
        let llm = self.reasoning.as_ref().expect("target stage runs with a reasoning endpoint");
        let decoding = self.config.text_decoding();
        match self.context.target_workflow {
            TargetWorkflow::PrideTarget => {
                let finding =
                    target::classify_pride_target(&self.gateway, description, llm, &self.templates, &decoding)
                        .await
                        .map_err(|e| e.to_string())?;
                Ok(TargetPayload::Pride { finding })
            }
            _ => {
                let finding = target::detect_protected_groups(
                    &self.gateway,
                    description,
                    &meme.ocr_text,
                    llm,
                    &self.templates,
                    &decoding,
                )
                .await
                .map_err(|e| e.to_string())?;
                let forms = if finding.none_found || finding.groups.is_empty() {
                    None
                } else {
                    let _guard = self.forms_lock.lock().await;
                    Some(
                        target::generate_hateful_forms(
                            &self.gateway,
                            &finding,
                            &self.seeds,
                            llm,
                            &self.templates,
                            &decoding,
                            Some(&self.forms_cache),
                        )
                        .await
                        .map_err(|e| e.to_string())?,
                    )
                };
                Ok(TargetPayload::ProtectedGroups { finding, forms })
            }
        }
    }

    async fn target_stage(&self) -> Result<Tally, PipelineError> {
        let mut tally = Tally::default();
        if !self.target_needed() {
            return Ok(tally);
        }
        let mut jobs: Vec<Job<'_>> = Vec::new();
        for (i, meme) in self.memes.iter().enumerate() {
            for src in &self.sources {
                let key = self.target_key(i, src).expect("target needed");
                if self.store.contains(&key) {
                    tally.reused += 1;
                    continue;
                }
                let Some(desc) = self.load::<Description>(&self.description_key(i, src)) else {
                    continue;
                };
                let fut = async move {
                    self.identify_target(meme, &desc.high_fidelity_text)
                        .await
                        .map(|t| to_value(&t))
                };
                jobs.push((key, fut.boxed()));
            }
        }
        self.execute(Stage::Target, jobs, &mut tally).await?;
        Ok(tally)
    }

    /// Base schemes plus the U-CoT+ perturbation variants.
    async fn verdict_plans(&self) -> Result<(Vec<VerdictPlan>, Vec<String>), PipelineError> {
        let mut plans: Vec<VerdictPlan> = self
            .config
            .schemes
            .iter()
            .map(|&scheme| VerdictPlan {
                scheme,
                variant: None,
            })
            .collect();
        let mut warnings = Vec::new();
        let base = &self.base_guidelines;
        let variants = match &self.config.perturbation {
            Perturbation::None => Vec::new(),
            Perturbation::Shuffle { variants } => (0..*variants)
                .map(|i| GuidelineVariant {
                    name: format!("shuffle-{i}"),
                    set: base.clone(),
                    shuffle_seed: Some(self.config.seed.wrapping_add(u64::from(i))),
                })
                .collect(),
            Perturbation::File { path } => vec![GuidelineVariant {
                name: "file".into(),
                set: GuidelineSet::load(path)?,
                shuffle_seed: None,
            }],
            Perturbation::Rephrase => {
                let (set, mut w) = self.rephrased_guidelines().await?;
                warnings.append(&mut w);
                vec![GuidelineVariant {
                    name: "rephrase".into(),
                    set,
                    shuffle_seed: None,
                }]
            }
        };
        plans.extend(variants.into_iter().map(|v| VerdictPlan {
            scheme: Scheme::UCoTPlus,
            variant: Some(v),
        }));
        Ok((plans, warnings))
    }

    /// Rephrased base guidelines, cached in the run directory by content digest.
    async fn rephrased_guidelines(&self) -> Result<(GuidelineSet, Vec<String>), PipelineError> {
        let base = &self.base_guidelines;
        let dir = self.store.dir().join("guidelines");
        let path = dir.join(format!(
            "rephrase-{}-{}.toml",
            base.guideline_id,
            &base.content_digest()[..16]
        ));
        if path.exists() {
            return Ok((GuidelineSet::load(&path)?, Vec::new()));
        }
        let llm = self.config.endpoint(
            self.config
                .rephrase_llm
                .as_deref()
                .ok_or_else(|| cfg_err("rephrase needs rephrase_llm"))?,
        )?;
        let outcome = guidelines::rephrase(
            &self.gateway,
            base,
            llm,
            &self.templates,
            &self.refusal,
            &self.config.text_decoding(),
        )
        .await;
        std::fs::create_dir_all(&dir).map_err(|source| RunStoreError::Io {
            path: dir.clone(),
            source,
        })?;
        std::fs::write(&path, outcome.set.to_toml_string()).map_err(|source| RunStoreError::Io {
            path: path.clone(),
            source,
        })?;
        Ok((outcome.set, outcome.warnings))
    }

    fn trigger(&self, scheme: Scheme) -> String {
        self.config
            .cot_trigger
            .clone()
            .unwrap_or_else(|| classifier::default_trigger(scheme, &self.templates))
    }

    /// The classify request and its stage key, or `None` while an input is missing.
    fn verdict_request(&self, i: usize, src: &Source, plan: &VerdictPlan) -> Option<(StageKey, ClassifyRequest, ModelEndpoint)> {
        let meme = &self.memes[i];
        let slot = plan.slot(&src.id);
        let trigger = self.trigger(plan.scheme);
        let mut req = ClassifyRequest {
            meme_id: meme.meme_id.clone(),
            scheme: plan.scheme,
            context: self.context.id,
            description: None,
            image_ref: None,
            ocr_text: meme.ocr_text.clone(),
            guidelines: None,
            exemplars: None,
            cot_trigger: trigger,
            pride_variant: None,
        };
        let (upstream, endpoint) = if plan.scheme == Scheme::MCoT {
            req.image_ref = Some(meme.image_path());
            (self.meme_digests[i].clone(), src.routing.default.clone())
        } else {
            let desc_key = self.description_key(i, src);
            let desc: Description = self.load(&desc_key)?;
            req.description = Some(desc.high_fidelity_text);
            let target = match self.target_key(i, src) {
                Some(k) => Some((self.load::<TargetPayload>(&k)?, k.input_digest)),
                None => None,
            };
            req.pride_variant = target.as_ref().and_then(|(t, _)| t.pride_variant());
            match plan.scheme {
                Scheme::UCoTPlus => {
                    let base = plan.variant.as_ref().map_or(&self.base_guidelines, |v| &v.set);
                    let mut set = match &target {
                        Some((t, _)) => t.apply(base),
                        None => base.clone(),
                    };
                    if let Some(seed) = plan.variant.as_ref().and_then(|v| v.shuffle_seed) {
                        set = shuffle(&set, seed);
                    }
                    req.guidelines = Some(set);
                }
                Scheme::UCoTPlusFS => req.exemplars = self.exemplars.clone(),
                _ => {}
            }
            let upstream = digest_json(&json!([desc_key.input_digest, target.map(|t| t.1)]));
            (upstream, self.reasoning.clone()?)
        };
        let template = self.templates.classify.get(&self.context.classify_prompt_id);
        let d = digest_json(&json!({
            "upstream": upstream,
            "slot": slot,
            "scheme": plan.scheme,
            "template": template,
            "classification": self.templates.classification,
            "trigger": req.cot_trigger,
            "guidelines": req.guidelines.as_ref().map(|g| (&g.version, g.content_digest())),
            "exemplars": req.exemplars,
            "pride_variant": req.pride_variant,
            "endpoint": endpoint,
            "decoding": self.config.text_decoding(),
        }));
        Some((StageKey::new(Stage::Verdict, &meme.meme_id, &slot, &d), req, endpoint))
    }

    async fn verdict_stage(&self, plans: &[VerdictPlan]) -> Result<(Tally, VerdictKeys), PipelineError> {
        let mut tally = Tally::default();
        let mut keys = VerdictKeys::new();
        let mut jobs: Vec<Job<'_>> = Vec::new();
        for i in 0..self.memes.len() {
            for src in &self.sources {
                for plan in plans {
                    let Some((key, req, endpoint)) = self.verdict_request(i, src, plan) else {
                        continue;
                    };
                    keys.insert((i, key.slot.clone()), key.clone());
                    if self.store.contains(&key) {
                        tally.reused += 1;
                        continue;
                    }
                    let fut = async move {
                        classifier::classify(
                            &self.gateway,
                            &req,
                            &endpoint,
                            &self.config.text_decoding(),
                            &self.templates,
                            &src.id,
                            Priority::Batch,
                        )
                        .await
                        .map(|v| to_value(&v))
                        .map_err(|e| e.to_string())
                    };
                    jobs.push((key, fut.boxed()));
                }
            }
        }
        self.execute(Stage::Verdict, jobs, &mut tally).await?;
        Ok((tally, keys))
    }

    fn verdict_label(&self, keys: &VerdictKeys, i: usize, slot: String) -> (Option<Label>, String) {
        match keys.get(&(i, slot)) {
            Some(k) => (
                self.load::<SchemeVerdict>(k).map(|v| v.label),
                k.input_digest.clone(),
            ),
            None => (None, String::new()),
        }
    }

    /// Verdict matrix of a meme and the decision input digest built from it.
    fn decision_input(&self, keys: &VerdictKeys, i: usize) -> (VerdictMatrix, String) {
        let mut matrix = VerdictMatrix::new(&self.memes[i].meme_id);
        let mut digests = Vec::new();
        for (j, src) in self.sources.iter().enumerate() {
            for (scheme, cell) in [
                (Scheme::MCoT, &mut matrix.mcot[j]),
                (Scheme::UCoT, &mut matrix.ucot[j]),
                (Scheme::UCoTPlus, &mut matrix.ucotplus[j]),
            ] {
                let (label, digest) = self.verdict_label(keys, i, verdict_slot(scheme, None, &src.id));
                *cell = label;
                digests.push(digest);
            }
        }
        let digest = digest_json(&json!({
            "verdicts": digests,
            "matrix": matrix,
            "level": self.context.confidence_level,
        }));
        (matrix, digest)
    }

    fn ensemble_applies(&self) -> Result<(), &'static str> {
        if self.context.confidence_level == ConfidenceLevel::Unset {
            Err("confidence level is unset for this context")
        } else if self.sources.len() != 2 {
            Err("the ensemble needs exactly two vision sources")
        } else if !self.config.schemes.contains(&Scheme::UCoTPlus) {
            Err("the ensemble needs ucotplus verdicts")
        } else {
            Ok(())
        }
    }

    fn decision_stage(&self, keys: &VerdictKeys) -> Result<Tally, PipelineError> {
        let mut tally = Tally::default();
        let level = self.context.confidence_level;
        if let Err(why) = self.ensemble_applies() {
            tally.warnings.push(format!("ensemble skipped: {why}"));
            return Ok(tally);
        }
        for (i, meme) in self.memes.iter().enumerate() {
            let (matrix, digest) = self.decision_input(keys, i);
            let key = StageKey::new(Stage::Decision, &meme.meme_id, "", &digest);
            if self.store.contains(&key) {
                tally.reused += 1;
                continue;
            }
            match decide(&matrix, level) {
                Ok(decision) => {
                    self.store.append_decision_log(&audit_line(&matrix, level, &decision))?;
                    let payload = DecisionPayload {
                        matrix,
                        level,
                        decision,
                    };
                    self.store.put_payload(&key, to_value(&payload), self.clock.now())?;
                    tally.computed += 1;
                }
                Err(e) => tally.failures.push(StageFailure {
                    stage: Stage::Decision,
                    meme_id: meme.meme_id.clone(),
                    slot: String::new(),
                    error: e.to_string(),
                }),
            }
        }
        Ok(tally)
    }

    fn report_stage(&self, plans: &[VerdictPlan], keys: &VerdictKeys) -> Result<(Tally, RunReport), PipelineError> {
        let mut tally = Tally::default();
        let decisions: BTreeMap<String, DecisionPayload> = self
            .store
            .records(Stage::Decision)
            .into_iter()
            .filter_map(|r| {
                serde_json::from_value::<DecisionPayload>(r.payload)
                    .ok()
                    .map(|p| (r.input_digest, p))
            })
            .collect();
        // Only decisions computed from this run's verdict keys count.
        let mut decision_digests = Vec::new();
        let mut ensemble_pairs = Vec::new();
        let mut undecided = 0;
        if self.ensemble_applies().is_ok() {
            for (i, meme) in self.memes.iter().enumerate() {
                let (_, digest) = self.decision_input(keys, i);
                match decisions.get(&digest) {
                    Some(d) => {
                        decision_digests.push(digest);
                        if let Some(gold) = meme.gold_label {
                            ensemble_pairs.push((d.decision.label, gold));
                        }
                    }
                    None => undecided += 1,
                }
            }
        }

        let golds: Vec<Option<Label>> = self.memes.iter().map(|m| m.gold_label).collect();
        let key = StageKey::new(
            Stage::Report,
            "_run",
            "",
            &digest_json(&json!({
                "verdicts": keys
                    .values()
                    .filter(|k| self.store.contains(k))
                    .map(|k| (&k.slot, &k.meme_id, &k.input_digest))
                    .collect::<Vec<_>>(),
                "decisions": decision_digests,
                "golds": golds,
            })),
        );
        let report = match self.load::<RunReport>(&key) {
            Some(r) => {
                tally.reused += 1;
                r
            }
            None => {
                let report = self.build_report(plans, keys, ensemble_pairs, undecided);
                self.store.put_payload(&key, to_value(&report), self.clock.now())?;
                tally.computed += 1;
                report
            }
        };
        self.store.write_file(
            "report.json",
            &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        )?;
        self.store.write_file("report.md", &report.to_markdown())?;
        Ok((tally, report))
    }

    fn build_report(
        &self,
        plans: &[VerdictPlan],
        keys: &VerdictKeys,
        ensemble_pairs: Vec<(Label, Label)>,
        undecided: usize,
    ) -> RunReport {
        let mut slots = Vec::new();
        let mut by_slot: BTreeMap<String, MetricsReport> = BTreeMap::new();
        for src in &self.sources {
            for plan in plans {
                let slot = plan.slot(&src.id);
                let mut pairs = Vec::new();
                let mut extraction = ExtractionCounts::default();
                let mut verdicts = 0;
                for (i, meme) in self.memes.iter().enumerate() {
                    let Some(v) = keys
                        .get(&(i, slot.clone()))
                        .and_then(|k| self.load::<SchemeVerdict>(k))
                    else {
                        continue;
                    };
                    verdicts += 1;
                    if let Some(gold) = meme.gold_label {
                        match v.extraction_status {
                            ExtractionStatus::Matched => extraction.matched += 1,
                            ExtractionStatus::FallbackMatched => extraction.fallback_matched += 1,
                            ExtractionStatus::Failed => extraction.failed += 1,
                        }
                        pairs.push((v.label, gold));
                    }
                }
                let metrics = confusion(&pairs).ok().and_then(|m| metrics(&m).ok()).map(|mut r| {
                    r.extraction_failure_count = extraction.failed;
                    r
                });
                if let Some(m) = &metrics {
                    by_slot.insert(slot.clone(), m.clone());
                }
                slots.push(SlotReport {
                    slot,
                    verdicts,
                    missing: self.memes.len() - verdicts,
                    extraction,
                    metrics,
                });
            }
        }
        let mut deltas = Vec::new();
        let mut shuffle_mean_delta = BTreeMap::new();
        for src in &self.sources {
            let base_slot = verdict_slot(Scheme::UCoT, None, &src.id);
            let Some(base) = by_slot.get(&base_slot) else {
                continue;
            };
            let mut shuffles = Vec::new();
            for s in &slots {
                if s.slot == base_slot || !s.slot.ends_with(&format!("/{}", src.id)) || s.slot.starts_with("mcot") {
                    continue;
                }
                if let Some(m) = &s.metrics {
                    let d = evalkit::delta(&s.slot, m, &base_slot, base);
                    if s.slot.contains("@shuffle-") {
                        shuffles.push(d.clone());
                    }
                    deltas.push(d);
                }
            }
            if let Some(mean) = evalkit::mean_delta(&shuffles) {
                shuffle_mean_delta.insert(src.id.clone(), mean);
            }
        }
        RunReport {
            run_id: self.store.run_id().to_string(),
            context: self.context.id,
            meme_count: self.memes.len(),
            labeled_count: self.memes.iter().filter(|m| m.gold_label.is_some()).count(),
            slots,
            ensemble: confusion(&ensemble_pairs).ok().and_then(|m| metrics(&m).ok()),
            undecided,
            deltas,
            shuffle_mean_delta,
        }
    }
}
