//! Run artifacts on disk. The manifest is written after preparation and
//! before any decision; every other file it names is written afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{prepare, match_all, AuditEvent, FinalCriterion, PipelineError, Preparation, Provenance, RunOptions, RunOutput};
use crate::agents::{Agents, MatchDecision, PromptStrategy};
use crate::corpus::{CatalogVariant, CriteriaCatalog, Corpus};
use crate::digest::Digest;
use crate::gateway::BackendTag;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const PREPARED_FILE: &str = "prepared.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Artifact paths, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub decisions: String,
    pub audit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepared: Option<String>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub catalog_variant: CatalogVariant,
    pub corpus_digest: Digest,
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub backend: BackendTag,
    pub patient_count: usize,
    pub criterion_count: usize,
    pub started_at: String,
    pub files: ManifestFiles,
}

impl RunManifest {
    pub fn new(
        config: serde_json::Value,
        catalog: &CriteriaCatalog,
        corpus: &Corpus,
        strategy: PromptStrategy,
        model_id: impl Into<String>,
        backend: BackendTag,
    ) -> Self {
        RunManifest {
            config,
            catalog_variant: catalog.variant(),
            corpus_digest: corpus.digest(),
            strategy,
            model_id: model_id.into(),
            backend,
            patient_count: corpus.len(),
            criterion_count: catalog.len(),
            started_at: chrono::Utc::now().to_rfc3339(),
            files: ManifestFiles {
                decisions: DECISIONS_FILE.into(),
                audit: AUDIT_FILE.into(),
                prepared: (strategy == PromptStrategy::Maka).then(|| PREPARED_FILE.into()),
                summary: SUMMARY_FILE.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub finished_at: String,
    pub decision_count: usize,
    pub fallback_count: usize,
    pub audit_event_count: usize,
    pub gateway_failures: usize,
    pub provenance: BTreeMap<String, usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("artifact types serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_decisions(path: &Path) -> Result<Vec<MatchDecision>, PipelineError> {
    read_jsonl(path)
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditEvent>, PipelineError> {
    read_jsonl(path)
}

pub fn load_prepared(path: &Path) -> Result<Vec<FinalCriterion>, PipelineError> {
    read_json(path)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    read_json(path)
}

/// Runs the pipeline and persists every artifact under `out_dir`. Nothing is
/// written if preparation fails on a configuration error.
pub fn write_run(
    agents: &Agents<'_>,
    corpus: &Corpus,
    catalog: &CriteriaCatalog,
    options: &RunOptions,
    preparation: Preparation<'_>,
    manifest: &RunManifest,
    out_dir: &Path,
) -> Result<RunOutput, PipelineError> {
    let prepared = prepare(agents, catalog, options, preparation)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    if let Some(name) = &manifest.files.prepared {
        write_json(&out_dir.join(name), &prepared.criteria)?;
    }
    write_json(&out_dir.join(MANIFEST_FILE), manifest)?;

    let output = match_all(agents, corpus, &prepared, options)?;
    write_jsonl(&out_dir.join(&manifest.files.decisions), &output.decisions)?;
    write_jsonl(&out_dir.join(&manifest.files.audit), &output.audit)?;

    let mut provenance = BTreeMap::new();
    for f in &output.prepared {
        let key = match f.provenance {
            Provenance::OriginalPassThrough => "original_pass_through",
            Provenance::AugmentedApproved => "augmented_approved",
            Provenance::FallbackAfterRejection => "fallback_after_rejection",
        };
        *provenance.entry(key.to_string()).or_insert(0) += 1;
    }
    let summary = RunSummary {
        finished_at: chrono::Utc::now().to_rfc3339(),
        decision_count: output.decisions.len(),
        fallback_count: output.fallback_count(),
        audit_event_count: output.audit.len(),
        gateway_failures: output.gateway_failures,
        provenance,
    };
    write_json(&out_dir.join(&manifest.files.summary), &summary)?;
    Ok(output)
}

/// Writes a prepared-criteria file for reuse with a later run.
pub fn write_prepared(path: &Path, criteria: &[FinalCriterion]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_json(path, &criteria)
}

/// Writes decisions as sorted JSON Lines.
pub fn write_decisions(path: &Path, decisions: &[MatchDecision]) -> Result<(), PipelineError> {
    let mut sorted = decisions.to_vec();
    sorted.sort_by(|a, b| (&a.patient_id, &a.criterion_id).cmp(&(&b.patient_id, &b.criterion_id)));
    write_jsonl(path, &sorted)
}
