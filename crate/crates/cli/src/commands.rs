use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use maka_core::agents::{
    load_search_hits, Agents, AugmentDeps, ModelSettings, PromptSet, PromptStrategy, StaticSearchClient,
};
use maka_core::corpus::{corpus_stats, load_corpus, load_criteria_catalog, Corpus, CorpusError};
use maka_core::evaluation::{
    evaluate as score, render_comparison_markdown, render_csv, render_json, render_trial_markdown, EvaluationError,
    EvaluationReport,
};
use maka_core::gateway::{
    BackendTag, Completion, Gateway, GatewayError, HttpBackend, ReplayBackend, ReplayMode, RetryPolicy,
    ScriptedBackend, DEFAULT_BASE_URL, ENV_API_BASE_URL, ENV_API_KEY,
};
use maka_core::knowledge::{index_snippets, load_snippets, SnippetIndex, DEFAULT_TOP_K};
use maka_core::pipeline::{
    load_decisions, load_manifest, load_prepared, prepare, write_prepared, write_run, PipelineError, Preparation,
    Provenance, RunManifest, RunOptions, MANIFEST_FILE, PREPARED_FILE,
};
use maka_core::CriteriaCatalog;

use crate::config::RunConfig;
use crate::{CliError, Io};

const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Configuration(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    }
}

fn say(io: &mut Io<'_>, text: impl AsRef<str>) -> Result<(), CliError> {
    io.out.write_all(text.as_ref().as_bytes()).map_err(|e| CliError::Data(format!("writing output: {e}")))
}

fn load_catalog(cfg: &RunConfig) -> Result<CriteriaCatalog, CliError> {
    load_criteria_catalog(cfg.require_criteria()?, cfg.variant).map_err(data)
}

fn load_corpus_for(cfg: &RunConfig, catalog: &CriteriaCatalog) -> Result<Corpus, CliError> {
    load_corpus(cfg.require_corpus()?, catalog).map_err(|e: CorpusError| data(e))
}

pub fn ingest(cfg: &RunConfig, io: &mut Io<'_>) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let corpus = load_corpus_for(cfg, &catalog)?;
    let stats = corpus_stats(&corpus, &catalog).map_err(data)?;
    say(
        io,
        format!(
            "patient_count={}\npair_count={}\ntotal_tokens={}\nmean_tokens_per_patient={:.1}\ncorpus_digest={}\n",
            stats.patient_count,
            stats.pair_count,
            stats.total_tokens,
            stats.mean_tokens_per_patient,
            corpus.digest()
        ),
    )
}

fn gateway_config(e: GatewayError) -> CliError {
    match e {
        GatewayError::Configuration(m) => CliError::Usage(m),
        other => CliError::Gateway(other.to_string()),
    }
}

fn http_backend(io: &Io<'_>) -> Result<HttpBackend, CliError> {
    let key = (io.env)(ENV_API_KEY)
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Usage(format!("{ENV_API_KEY} must be set for the http backend")))?;
    let base = (io.env)(ENV_API_BASE_URL).unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
    HttpBackend::new(&base, key, RetryPolicy::default(), HTTP_TIMEOUT).map_err(gateway_config)
}

fn build_backend(cfg: &RunConfig, io: &Io<'_>) -> Result<Gateway, CliError> {
    let backend: Arc<dyn Completion> = match cfg.backend {
        BackendTag::Http => Arc::new(http_backend(io)?),
        BackendTag::Scripted => {
            let path = cfg.script_path.as_deref().expect("validated in config");
            Arc::new(ScriptedBackend::from_file(path).map_err(data)?)
        }
        BackendTag::Replay => {
            let dir = cfg.cache_dir.clone().expect("validated in config");
            match cfg.replay_mode {
                ReplayMode::Strict => Arc::new(ReplayBackend::strict(dir)),
                ReplayMode::Record => Arc::new(ReplayBackend::recording(dir, Arc::new(http_backend(io)?))),
            }
        }
    };
    Ok(Gateway::new(backend, cfg.backend, cfg.max_concurrency))
}

fn load_prompts(cfg: &RunConfig) -> Result<PromptSet, CliError> {
    match &cfg.prompts_dir {
        Some(dir) => PromptSet::load_dir(dir).map_err(data),
        None => Ok(PromptSet::default()),
    }
}

fn settings(cfg: &RunConfig) -> ModelSettings {
    ModelSettings { seed: cfg.seed, ..ModelSettings::new(cfg.model_id.clone()) }
}

struct Knowledge {
    index: Option<SnippetIndex>,
    search: Option<StaticSearchClient>,
}

impl Knowledge {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let index = match &cfg.snippets_path {
            Some(p) => Some(index_snippets(load_snippets(p).map_err(data)?).map_err(data)?),
            None => None,
        };
        let search = match &cfg.search_results_path {
            Some(p) => Some(StaticSearchClient::new(load_search_hits(p).map_err(data)?).map_err(data)?),
            None => None,
        };
        Ok(Knowledge { index, search })
    }

    fn deps(&self) -> AugmentDeps<'_> {
        AugmentDeps {
            index: self.index.as_ref(),
            search: self.search.as_ref().map(|s| s as &dyn maka_core::agents::SearchClient),
            top_k: DEFAULT_TOP_K,
        }
    }
}

fn options(cfg: &RunConfig) -> RunOptions {
    RunOptions { strategy: cfg.strategy, max_concurrency: cfg.max_concurrency, token_budget: cfg.token_budget }
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::OriginalPassThrough => "original_pass_through",
        Provenance::AugmentedApproved => "augmented_approved",
        Provenance::FallbackAfterRejection => "fallback_after_rejection",
    }
}

pub fn augment(cfg: &RunConfig, io: &mut Io<'_>) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let gateway = build_backend(cfg, io)?;
    let prompts = load_prompts(cfg)?;
    let settings = settings(cfg);
    let knowledge = Knowledge::load(cfg)?;
    let agents = Agents::new(&gateway, &prompts, &settings);
    let prepared = prepare(&agents, &catalog, &options(cfg), Preparation::Fresh(knowledge.deps())).map_err(pipeline_err)?;
    let path = cfg.out_dir.join(PREPARED_FILE);
    write_prepared(&path, &prepared.criteria).map_err(pipeline_err)?;
    let mut text = String::new();
    for f in &prepared.criteria {
        text.push_str(&format!("{}\t{}\n", f.criterion_id, provenance_name(f.provenance)));
    }
    text.push_str(&format!("prepared={}\n", path.display()));
    say(io, text)?;
    if prepared.gateway_failures > 0 {
        return Err(CliError::Gateway(format!(
            "{} gateway calls failed; affected criteria fell back to their original text",
            prepared.gateway_failures
        )));
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, io: &mut Io<'_>) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let corpus = load_corpus_for(cfg, &catalog)?;
    let gateway = build_backend(cfg, io)?;
    let prompts = load_prompts(cfg)?;
    let settings = settings(cfg);
    let knowledge = Knowledge::load(cfg)?;
    let preparation = match &cfg.prepared_path {
        Some(p) if cfg.strategy == PromptStrategy::Maka => Preparation::Reuse(load_prepared(p).map_err(pipeline_err)?),
        Some(_) => return Err(CliError::Usage("--prepared only applies to the maka strategy".into())),
        None => Preparation::Fresh(knowledge.deps()),
    };
    let agents = Agents::new(&gateway, &prompts, &settings);
    let manifest = RunManifest::new(cfg.snapshot(), &catalog, &corpus, cfg.strategy, &cfg.model_id, gateway.tag());
    let output = write_run(&agents, &corpus, &catalog, &options(cfg), preparation, &manifest, &cfg.out_dir)
        .map_err(pipeline_err)?;
    say(
        io,
        format!(
            "decisions={}\nfallbacks={}\ngateway_failures={}\naudit_events={}\nout={}\n",
            output.decisions.len(),
            output.fallback_count(),
            output.gateway_failures,
            output.audit.len(),
            cfg.out_dir.display()
        ),
    )?;
    if output.gateway_failures > 0 {
        return Err(CliError::Gateway(format!(
            "{} gateway calls failed; affected pairs were recorded as fallbacks",
            output.gateway_failures
        )));
    }
    Ok(())
}

pub enum DecisionSource {
    File(PathBuf),
    Run(PathBuf),
}

pub enum Format {
    Markdown,
    Csv,
    Json,
}

/// Decisions path plus a column label.
fn resolve_source(source: &DecisionSource) -> Result<(PathBuf, Option<String>), CliError> {
    match source {
        DecisionSource::File(p) => Ok((p.clone(), None)),
        DecisionSource::Run(dir) => {
            let manifest = load_manifest(&dir.join(MANIFEST_FILE)).map_err(pipeline_err)?;
            Ok((dir.join(&manifest.files.decisions), Some(manifest.strategy.display_name().to_string())))
        }
    }
}

fn score_file(
    path: &Path,
    corpus: &Corpus,
    catalog: &CriteriaCatalog,
    threshold: usize,
    io: &mut Io<'_>,
) -> Result<EvaluationReport, CliError> {
    let decisions = load_decisions(path).map_err(pipeline_err)?;
    let gold = corpus.gold();
    match score(&decisions, &gold, catalog, Some(threshold)) {
        Err(EvaluationError::EmptyTrial { threshold, max_count }) => {
            let _ = writeln!(
                io.err,
                "maka: note: no criterion has {threshold} met patients (largest count is {max_count}); trial metrics skipped"
            );
            score(&decisions, &gold, catalog, None).map_err(data)
        }
        other => other.map_err(data),
    }
}

fn markdown(columns: &[(&str, &EvaluationReport)]) -> String {
    let mut text = render_comparison_markdown(columns);
    if columns.iter().any(|(_, r)| r.trial.is_some()) {
        text.push('\n');
        text.push_str(&render_trial_markdown(columns));
    }
    text
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn evaluate(
    cfg: &RunConfig,
    source: DecisionSource,
    format: Format,
    out: Option<&Path>,
    io: &mut Io<'_>,
) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let corpus = load_corpus_for(cfg, &catalog)?;
    let (path, label) = resolve_source(&source)?;
    let report = score_file(&path, &corpus, &catalog, cfg.trial_threshold, io)?;
    let label = label.unwrap_or_else(|| "Predicted".to_string());
    let md = markdown(&[(&label, &report)]);
    let csv = render_csv(&report);
    let json = render_json(&report);
    if let Some(dir) = out {
        write_file(&dir.join("report.md"), &md)?;
        write_file(&dir.join("report.csv"), &csv)?;
        write_file(&dir.join("report.json"), &json)?;
    }
    say(
        io,
        match format {
            Format::Markdown => md,
            Format::Csv => csv,
            Format::Json => json,
        },
    )
}

pub fn report(cfg: &RunConfig, inputs: &[String], out: Option<&Path>, io: &mut Io<'_>) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let corpus = load_corpus_for(cfg, &catalog)?;
    let mut columns = Vec::new();
    for input in inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) if !l.is_empty() => (Some(l.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(input)),
        };
        let source = if path.is_dir() { DecisionSource::Run(path.clone()) } else { DecisionSource::File(path.clone()) };
        let (decisions, manifest_label) = resolve_source(&source)?;
        let label = label.or(manifest_label).unwrap_or_else(|| {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| input.clone())
        });
        let report = score_file(&decisions, &corpus, &catalog, cfg.trial_threshold, io)?;
        columns.push((label, report));
    }
    let refs: Vec<(&str, &EvaluationReport)> = columns.iter().map(|(l, r)| (l.as_str(), r)).collect();
    let text = markdown(&refs);
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    say(io, text)
}
