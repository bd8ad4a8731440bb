//! Batch commands. Each stage command runs the pipeline up to and including
//! its stage; all of them continue an existing run from its stored records.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use memelens_core::corpus::{check_statistics, load_manifest, ManifestSummary, Split};
use memelens_core::gateway::{
    read_transcript, ChatBackend, HttpBackend, ReplayBackend, ScriptedBackend, TranscriptSink,
};
use memelens_core::guidelines::GuidelineStore;
use memelens_core::pipeline::{run_pipeline, FewShotConfig, Perturbation, RunConfig, RunOptions, RunOutcome};
use memelens_core::runstore::Stage;
use memelens_core::{ContextId, Gateway, Scheme};

use crate::api::{self, AppState};

#[derive(Parser)]
#[command(name = "memelens", version, about = "Harmful meme classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Ask the visual questions for every meme.
    Extract(RunArgs),
    /// Turn visual cues into meme descriptions.
    Integrate(RunArgs),
    /// Identify targets (FHM protected groups, PrideMM entities).
    Target(RunArgs),
    /// Produce per-scheme verdicts.
    Classify(RunArgs),
    /// Combine verdicts by confidence level.
    Ensemble(RunArgs),
    /// Score verdicts and write the report.
    Eval(RunArgs),
    /// All stages end to end.
    Run(RunArgs),
    /// Serve the HTTP API over a runs directory.
    Serve(ServeArgs),
    /// Compare a dataset manifest with the published split sizes.
    ManifestCheck(ManifestArgs),
}

#[derive(Args, Clone)]
pub struct BackendArgs {
    /// Answer model calls from a scripted mock (TOML) instead of HTTP.
    #[arg(long, conflicts_with = "replay")]
    pub mock: Option<PathBuf>,
    /// Answer model calls from a recorded transcript.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Per-request HTTP timeout in seconds.
    #[arg(long, default_value_t = 300)]
    pub timeout_secs: u64,
}

impl BackendArgs {
    fn build(&self) -> anyhow::Result<Arc<dyn ChatBackend>> {
        Ok(match (&self.mock, &self.replay) {
            (Some(p), _) => Arc::new(ScriptedBackend::load(p)?),
            (_, Some(p)) => Arc::new(ReplayBackend::from_records(
                read_transcript(p).with_context(|| format!("reading {}", p.display()))?,
            )),
            _ => Arc::new(HttpBackend::new(Duration::from_secs(self.timeout_secs))?),
        })
    }
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured dataset context.
    #[arg(long)]
    pub context: Option<ContextId>,
    /// Override the manifest path.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Schemes to run; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub scheme: Vec<Scheme>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `packaged`, `latest` or a stored version number.
    #[arg(long)]
    pub guideline_version: Option<String>,
    /// `shuffle:N`, `rephrase` or `file:PATH`.
    #[arg(long)]
    pub perturb: Option<Perturbation>,
    /// Add U-CoT+FS with K class-balanced exemplars (4, 6, 8 or 10).
    #[arg(long, value_name = "K")]
    pub few_shot: Option<usize>,
    /// Holdout pool for --few-shot when the config has none.
    #[arg(long)]
    pub few_shot_pool: Option<PathBuf>,
    /// Require the run to exist already.
    #[arg(long)]
    pub resume: bool,
    /// Directory holding run stores.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Process only the first N memes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

impl RunArgs {
    /// The config file with command-line overrides applied.
    pub fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(c) = self.context {
            cfg.context = c;
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(r) = &self.run_id {
            cfg.run_id = Some(r.clone());
        }
        if !self.scheme.is_empty() {
            cfg.schemes = self.scheme.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = &self.guideline_version {
            cfg.guideline_version = v.clone();
        }
        if let Some(p) = &self.perturb {
            cfg.perturbation = p.clone();
        }
        if let Some(k) = self.few_shot {
            let pool = self
                .few_shot_pool
                .clone()
                .or_else(|| cfg.few_shot.as_ref().map(|f| f.pool.clone()))
                .context("--few-shot needs a holdout pool (--few-shot-pool or few_shot.pool in the config)")?;
            cfg.few_shot = Some(FewShotConfig { k, pool });
            if !cfg.schemes.contains(&Scheme::UCoTPlusFS) {
                cfg.schemes.push(Scheme::UCoTPlusFS);
            }
        }
        if self.limit.is_some() {
            cfg.limit = self.limit;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Guideline version store; packaged sets are seeded as version 1.
    #[arg(long, default_value = "guidelines")]
    pub guidelines: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Environment variable holding the shared bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    /// Concurrent model calls, one of them reserved for interactive probes.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub context: ContextId,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split for lines without a `split` field.
    #[arg(long, default_value = "test")]
    pub split: Split,
}

fn stop_after(command: &Command) -> Option<Stage> {
    match command {
        Command::Extract(_) => Some(Stage::Cues),
        Command::Integrate(_) => Some(Stage::Description),
        Command::Target(_) => Some(Stage::Target),
        Command::Classify(_) => Some(Stage::Verdict),
        Command::Ensemble(_) => Some(Stage::Decision),
        _ => None,
    }
}

pub async fn execute(cli: Cli) -> anyhow::Result<()> {
    let stop = stop_after(&cli.command);
    match cli.command {
        Command::Extract(a)
        | Command::Integrate(a)
        | Command::Target(a)
        | Command::Classify(a)
        | Command::Ensemble(a)
        | Command::Eval(a)
        | Command::Run(a) => {
            let outcome = run_stages(&a, stop).await?;
            print_outcome(&outcome);
            if !outcome.failures.is_empty() {
                bail!(
                    "{} stage failures; rerun the same command to retry them",
                    outcome.failures.len()
                );
            }
            Ok(())
        }
        Command::Serve(a) => serve(a).await,
        Command::ManifestCheck(a) => manifest_check(&a),
    }
}

pub async fn run_stages(args: &RunArgs, stop: Option<Stage>) -> anyhow::Result<RunOutcome> {
    let cfg = args.config()?;
    let run_dir = args.runs.join(cfg.effective_run_id());
    if args.resume && !run_dir.join("manifest.json").exists() {
        bail!("--resume given but {} holds no run", run_dir.display());
    }
    let manifest = cfg
        .manifest
        .clone()
        .context("the run configuration names no manifest")?;
    let load = load_manifest(&manifest, &cfg.context.context(), cfg.split)?;
    for w in &load.warnings {
        tracing::warn!("{w}");
    }
    let memes: Vec<_> = load.records.into_iter().filter(|m| m.split == cfg.split).collect();
    if memes.is_empty() {
        bail!("{} has no {} memes", manifest.display(), cfg.split);
    }
    let options = RunOptions {
        stop_after: stop,
        // recorded transcripts do not contain health probes
        skip_preflight: args.backend.replay.is_some(),
        ..Default::default()
    };
    Ok(run_pipeline(&cfg, &memes, args.backend.build()?, &args.runs, options).await?)
}

fn print_outcome(o: &RunOutcome) {
    println!("run {} at {}", o.run_id, o.dir.display());
    for stage in Stage::ALL {
        let computed = o.computed.get(&stage).copied().unwrap_or(0);
        let reused = o.reused.get(&stage).copied().unwrap_or(0);
        if computed + reused > 0 {
            println!("  {:<12} computed {computed:>5}  reused {reused:>5}", stage.as_str());
        }
    }
    for w in &o.warnings {
        println!("  warning: {w}");
    }
    for f in &o.failures {
        println!("  failed: {} {} [{}]: {}", f.stage.as_str(), f.meme_id, f.slot, f.error);
    }
    if let Some(r) = &o.report {
        println!();
        print!("{}", r.to_markdown());
    }
}

async fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let token = match &a.token_env {
        Some(var) => Some(std::env::var(var).with_context(|| format!("{var} is not set"))?),
        None => None,
    };
    let guidelines = GuidelineStore::open(&a.guidelines)?;
    guidelines.seed_packaged()?;
    let state = app_state(&a.runs, guidelines, a.backend.build()?, a.concurrency, token)?;
    let listener = tokio::net::TcpListener::bind(a.bind).await?;
    tracing::info!(addr = %a.bind, runs = %a.runs.display(), "serving");
    axum::serve(listener, api::router(Arc::new(state))).await?;
    Ok(())
}

/// Server state with the scratch transcript under the workbench directory.
pub fn app_state(
    runs: &Path,
    guidelines: GuidelineStore,
    backend: Arc<dyn ChatBackend>,
    concurrency: usize,
    token: Option<String>,
) -> anyhow::Result<AppState> {
    let scratch = runs.join(api::WORKBENCH_DIR);
    std::fs::create_dir_all(&scratch)?;
    let transcript = TranscriptSink::file(&scratch.join("transcript.jsonl"))?;
    let gateway = Gateway::new(backend, Arc::new(transcript), concurrency);
    Ok(AppState::new(runs.to_path_buf(), guidelines, gateway, token))
}

fn manifest_check(a: &ManifestArgs) -> anyhow::Result<()> {
    let load = load_manifest(&a.manifest, &a.context.context(), a.split)?;
    for w in &load.warnings {
        println!("warning: {w}");
    }
    let summary = ManifestSummary::of(&load.records);
    for (split, c) in &summary.per_split {
        println!(
            "{split:<8} positive {:>6}  negative {:>6}  unlabeled {:>6}",
            c.positive, c.negative, c.unlabeled
        );
    }
    let problems = check_statistics(&summary, a.context);
    if problems.is_empty() {
        println!("{}: matches the published split sizes", a.context);
        Ok(())
    } else {
        for p in &problems {
            println!("mismatch: {p}");
        }
        bail!("{} mismatches", problems.len())
    }
}
