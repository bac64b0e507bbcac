//! End-to-end orchestration: each criterion is prepared once (probe, route,
//! augment, supervise with bounded revision), then every patient-criterion
//! pair is matched concurrently. Audit events are buffered per unit of work
//! and numbered afterwards, so logs are identical across runs regardless of
//! thread scheduling.

mod artifacts;

use serde::{Deserialize, Serialize};

use crate::agents::{
    AgentError, AgentOutcome, Agents, AugmentDeps, AugmentationRoute, AugmentedCriterion, Exchange, MatchDecision,
    ProbeDecision, ProbeVerdict, PromptStrategy, Stage, SupervisionDecision, SupervisionVerdict, DEFAULT_TOKEN_BUDGET,
    FALLBACK_LABEL,
};
use crate::corpus::{CatalogVariant, CriteriaCatalog, Criterion, CriterionId, Corpus, PatientRecord};
use crate::digest::{CanonicalHasher, Digest};

pub use artifacts::{
    load_decisions, load_manifest, load_prepared, read_audit, write_decisions, write_prepared, write_run, ManifestFiles,
    RunManifest, RunSummary,
    DECISIONS_FILE, AUDIT_FILE, MANIFEST_FILE, PREPARED_FILE, SUMMARY_FILE,
};

/// Re-augmentations allowed after a rejection.
pub const MAX_REVISIONS: u32 = 2;
pub const DEFAULT_MAX_CONCURRENCY: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Configuration(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OriginalPassThrough,
    AugmentedApproved,
    FallbackAfterRejection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ChainStep {
    Probe { verdict: ProbeVerdict, parse_ok: bool },
    Route { route: AugmentationRoute, parse_ok: bool },
    Augment {
        revision: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        augmented: Option<AugmentedCriterion>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Supervise { revision: u32, verdict: SupervisionVerdict, parse_ok: bool },
    /// A gateway or search failure cut preparation short.
    Aborted { stage: Stage, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalCriterion {
    pub criterion_id: CriterionId,
    /// Text the matcher sees.
    pub text: String,
    pub provenance: Provenance,
    pub chain: Vec<ChainStep>,
}

impl FinalCriterion {
    fn pass_through(criterion: &Criterion, chain: Vec<ChainStep>) -> Self {
        FinalCriterion {
            criterion_id: criterion.id.clone(),
            text: criterion.definition.clone(),
            provenance: Provenance::OriginalPassThrough,
            chain,
        }
    }

    fn fallback(criterion: &Criterion, chain: Vec<ChainStep>) -> Self {
        FinalCriterion {
            criterion_id: criterion.id.clone(),
            text: criterion.definition.clone(),
            provenance: Provenance::FallbackAfterRejection,
            chain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Monotonic position in the run, starting at 0.
    pub seq: u64,
    pub stage: Stage,
    pub criterion_id: CriterionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    /// Absent for decisions made without a model call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<Digest>,
    pub outcome: String,
}

/// Audit event before it has been given its sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingEvent {
    pub stage: Stage,
    pub criterion_id: CriterionId,
    pub patient_id: Option<String>,
    pub request_digest: Option<Digest>,
    pub outcome: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub strategy: PromptStrategy,
    pub max_concurrency: usize,
    pub token_budget: usize,
}

impl RunOptions {
    pub fn new(strategy: PromptStrategy) -> Self {
        RunOptions { strategy, max_concurrency: DEFAULT_MAX_CONCURRENCY, token_budget: DEFAULT_TOKEN_BUDGET }
    }
}

/// Where Maka criteria come from: prepared now, or loaded from an earlier run.
pub enum Preparation<'a> {
    Fresh(AugmentDeps<'a>),
    Reuse(Vec<FinalCriterion>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub criteria: Vec<FinalCriterion>,
    pub events: Vec<PendingEvent>,
    pub gateway_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub prepared: Vec<FinalCriterion>,
    /// Sorted by (patient_id, criterion_id).
    pub decisions: Vec<MatchDecision>,
    pub audit: Vec<AuditEvent>,
    /// Calls that failed at the gateway, in preparation or matching.
    pub gateway_failures: usize,
}

impl RunOutput {
    pub fn fallback_count(&self) -> usize {
        self.decisions.iter().filter(|d| !d.parse_ok).count()
    }
}

struct Recorder {
    criterion_id: CriterionId,
    patient_id: Option<String>,
    events: Vec<PendingEvent>,
    gateway_failures: usize,
}

impl Recorder {
    fn new(criterion_id: &CriterionId, patient_id: Option<&str>) -> Self {
        Recorder {
            criterion_id: criterion_id.clone(),
            patient_id: patient_id.map(str::to_string),
            events: Vec::new(),
            gateway_failures: 0,
        }
    }

    fn push(&mut self, stage: Stage, request_digest: Option<Digest>, outcome: String) {
        self.events.push(PendingEvent {
            stage,
            criterion_id: self.criterion_id.clone(),
            patient_id: self.patient_id.clone(),
            request_digest,
            outcome,
        });
    }

    fn exchanges(&mut self, stage: Stage, exchanges: &[Exchange]) {
        for e in exchanges {
            self.push(stage, Some(e.request_digest.clone()), e.outcome.clone());
        }
    }

    fn outcome<T>(&mut self, stage: Stage, outcome: &AgentOutcome<T>) {
        self.exchanges(stage, &outcome.exchanges);
    }

    /// Records a failed call. Configuration errors are returned for the
    /// caller to abort on; anything else becomes an `Aborted` chain step.
    fn failure(&mut self, stage: Stage, err: AgentError) -> Result<ChainStep, PipelineError> {
        if let AgentError::Configuration(msg) = err {
            return Err(PipelineError::Configuration(msg));
        }
        self.exchanges(stage, err.exchanges());
        let digest = match &err {
            AgentError::Gateway { digest, .. } => {
                self.gateway_failures += 1;
                Some(digest.clone())
            }
            _ => None,
        };
        self.push(stage, digest, format!("failed: {err}"));
        Ok(ChainStep::Aborted { stage, error: err.to_string() })
    }
}

/// Runs probe, navigation and the augment/supervise revision loop for one
/// criterion. Only configuration errors escape; every other failure ends in
/// `FallbackAfterRejection` with the original text.
pub fn prepare_criterion(
    agents: &Agents<'_>,
    criterion: &Criterion,
    deps: &AugmentDeps<'_>,
) -> Result<Prepared, PipelineError> {
    let mut rec = Recorder::new(&criterion.id, None);
    let final_criterion = prepare_inner(agents, criterion, deps, &mut rec)?;
    Ok(Prepared { criteria: vec![final_criterion], events: rec.events, gateway_failures: rec.gateway_failures })
}

fn prepare_inner(
    agents: &Agents<'_>,
    criterion: &Criterion,
    deps: &AugmentDeps<'_>,
    rec: &mut Recorder,
) -> Result<FinalCriterion, PipelineError> {
    let mut chain = Vec::new();

    let probe = match agents.probe(criterion) {
        Ok(p) => p,
        Err(e) => {
            chain.push(rec.failure(Stage::Probe, e)?);
            return Ok(FinalCriterion::fallback(criterion, chain));
        }
    };
    rec.outcome(Stage::Probe, &probe);
    let verdict = probe.value;
    chain.push(ChainStep::Probe { verdict: verdict.clone(), parse_ok: probe.parse_ok });
    if verdict.decision == ProbeDecision::Sufficient {
        return Ok(FinalCriterion::pass_through(criterion, chain));
    }

    let route = match agents.navigate(criterion, &verdict.rationale) {
        Ok(r) => r,
        Err(e) => {
            chain.push(rec.failure(Stage::Navigate, e)?);
            return Ok(FinalCriterion::fallback(criterion, chain));
        }
    };
    rec.outcome(Stage::Navigate, &route);
    chain.push(ChainStep::Route { route: route.value, parse_ok: route.parse_ok });

    let mut feedback: Vec<String> = Vec::new();
    for revision in 0..=MAX_REVISIONS {
        let augmented = match agents.augment(criterion, route.value, &verdict.rationale, &feedback, revision, deps) {
            Ok(a) => {
                rec.outcome(Stage::Augment, &a);
                a.value
            }
            Err(AgentError::AugmentFormat { exchanges, .. }) => {
                rec.exchanges(Stage::Augment, &exchanges);
                let msg = "reply lacked CRITERIA/EXPLANATION sections".to_string();
                chain.push(ChainStep::Augment { revision, augmented: None, error: Some(msg.clone()) });
                feedback = vec![format!("the previous {msg}")];
                continue;
            }
            Err(e) => {
                chain.push(rec.failure(Stage::Augment, e)?);
                return Ok(FinalCriterion::fallback(criterion, chain));
            }
        };
        chain.push(ChainStep::Augment { revision, augmented: Some(augmented.clone()), error: None });

        let supervision = match agents.supervise(criterion, &augmented) {
            Ok(s) => s,
            Err(e) => {
                chain.push(rec.failure(Stage::Supervise, e)?);
                return Ok(FinalCriterion::fallback(criterion, chain));
            }
        };
        if supervision.exchanges.is_empty() {
            rec.push(Stage::Supervise, None, format!("rejected: {}", supervision.value.reasons.join("; ")));
        } else {
            rec.outcome(Stage::Supervise, &supervision);
        }
        let approved = supervision.value.decision == SupervisionDecision::Approved;
        feedback = supervision.value.reasons.clone();
        chain.push(ChainStep::Supervise { revision, verdict: supervision.value, parse_ok: supervision.parse_ok });
        if approved {
            return Ok(FinalCriterion {
                criterion_id: criterion.id.clone(),
                text: augmented.render(),
                provenance: Provenance::AugmentedApproved,
                chain,
            });
        }
    }
    Ok(FinalCriterion::fallback(criterion, chain))
}

fn check_pairing(strategy: PromptStrategy, variant: CatalogVariant) -> Result<(), PipelineError> {
    let ok = match strategy {
        PromptStrategy::ZeroShot => variant == CatalogVariant::Redefined,
        PromptStrategy::CoT => variant == CatalogVariant::Original,
        PromptStrategy::Maka => variant != CatalogVariant::Augmented,
    };
    if ok {
        Ok(())
    } else {
        let expected = match strategy {
            PromptStrategy::ZeroShot => "the redefined catalog",
            PromptStrategy::CoT => "the original catalog",
            PromptStrategy::Maka => "the original or redefined catalog as its source",
        };
        Err(PipelineError::Configuration(format!(
            "strategy {} needs {expected}, got the {} catalog",
            strategy.as_str(),
            variant.as_str()
        )))
    }
}

fn thread_pool(max_concurrency: usize) -> Result<rayon::ThreadPool, PipelineError> {
    if max_concurrency == 0 {
        return Err(PipelineError::Configuration("max concurrency must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency)
        .build()
        .map_err(|e| PipelineError::Configuration(format!("thread pool: {e}")))
}

/// First phase of a run. For Zero-shot and CoT every criterion passes through
/// unchanged and no model call is made.
pub fn prepare(
    agents: &Agents<'_>,
    catalog: &CriteriaCatalog,
    options: &RunOptions,
    preparation: Preparation<'_>,
) -> Result<Prepared, PipelineError> {
    check_pairing(options.strategy, catalog.variant())?;
    if options.token_budget == 0 {
        return Err(PipelineError::Configuration("token budget must be positive".into()));
    }
    if options.strategy != PromptStrategy::Maka {
        let criteria = catalog.criteria().iter().map(|c| FinalCriterion::pass_through(c, vec![])).collect();
        return Ok(Prepared { criteria, events: vec![], gateway_failures: 0 });
    }
    match preparation {
        Preparation::Reuse(finals) => {
            let mut by_id: std::collections::BTreeMap<_, _> =
                finals.into_iter().map(|f| (f.criterion_id.clone(), f)).collect();
            let criteria = catalog
                .criteria()
                .iter()
                .map(|c| {
                    by_id
                        .remove(&c.id)
                        .ok_or_else(|| PipelineError::Configuration(format!("prepared criteria lack {}", c.id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(extra) = by_id.keys().next() {
                return Err(PipelineError::Configuration(format!("prepared criterion {extra} is not in the catalog")));
            }
            Ok(Prepared { criteria, events: vec![], gateway_failures: 0 })
        }
        Preparation::Fresh(deps) => {
            use rayon::prelude::*;
            let pool = thread_pool(options.max_concurrency)?;
            let results: Vec<_> = pool.install(|| {
                catalog.criteria().par_iter().map(|c| prepare_criterion(agents, c, &deps)).collect()
            });
            let mut prepared = Prepared { criteria: Vec::new(), events: Vec::new(), gateway_failures: 0 };
            for r in results {
                let one = r?;
                prepared.criteria.extend(one.criteria);
                prepared.events.extend(one.events);
                prepared.gateway_failures += one.gateway_failures;
            }
            Ok(prepared)
        }
    }
}

fn skipped_digest(patient_id: &str, criterion_id: &CriterionId) -> Digest {
    let mut h = CanonicalHasher::new("maka.skipped-pair.v1");
    h.str(patient_id).str(criterion_id.as_str());
    h.finish()
}

fn match_pair(
    agents: &Agents<'_>,
    final_criterion: &FinalCriterion,
    patient: &PatientRecord,
    options: &RunOptions,
) -> (MatchDecision, Vec<PendingEvent>, bool) {
    let id = &final_criterion.criterion_id;
    let mut rec = Recorder::new(id, Some(&patient.patient_id));
    let result =
        agents.match_patient(id, &final_criterion.text, patient, options.strategy, options.token_budget);
    let decision = match result {
        Ok(outcome) => {
            if outcome.dropped_notes > 0 {
                log::info!("{} / {}: dropped {} oldest notes", patient.patient_id, id, outcome.dropped_notes);
            }
            rec.exchanges(Stage::Match, &outcome.exchanges);
            outcome.decision
        }
        Err(err) => {
            log::warn!("{} / {}: {err}; recording {}", patient.patient_id, id, FALLBACK_LABEL.as_str());
            rec.exchanges(Stage::Match, err.exchanges());
            let digest = match &err {
                AgentError::Gateway { digest, .. } => {
                    rec.gateway_failures += 1;
                    digest.clone()
                }
                _ => skipped_digest(&patient.patient_id, id),
            };
            rec.push(Stage::Match, Some(digest.clone()), format!("failed: {err}; fallback decision {}", FALLBACK_LABEL.as_str()));
            MatchDecision {
                patient_id: patient.patient_id.clone(),
                criterion_id: id.clone(),
                label: FALLBACK_LABEL,
                rationale: format!("no decision: {err}"),
                parse_ok: false,
                transcript_digest: digest,
            }
        }
    };
    let failed = rec.gateway_failures > 0;
    (decision, rec.events, failed)
}

/// Second phase of a run: one decision per (patient, criterion) pair.
pub fn match_all(
    agents: &Agents<'_>,
    corpus: &Corpus,
    prepared: &Prepared,
    options: &RunOptions,
) -> Result<RunOutput, PipelineError> {
    use rayon::prelude::*;
    let pool = thread_pool(options.max_concurrency)?;
    let pairs: Vec<(&PatientRecord, &FinalCriterion)> = corpus
        .patients()
        .iter()
        .flat_map(|p| prepared.criteria.iter().map(move |c| (&p.record, c)))
        .collect();
    let results: Vec<(MatchDecision, Vec<PendingEvent>, bool)> =
        pool.install(|| pairs.par_iter().map(|(p, c)| match_pair(agents, c, p, options)).collect());

    let mut results = results;
    results.sort_by(|a, b| {
        (&a.0.patient_id, &a.0.criterion_id).cmp(&(&b.0.patient_id, &b.0.criterion_id))
    });
    let mut events = prepared.events.clone();
    let mut decisions = Vec::with_capacity(results.len());
    let mut gateway_failures = prepared.gateway_failures;
    for (d, e, failed) in results {
        decisions.push(d);
        events.extend(e);
        gateway_failures += usize::from(failed);
    }
    Ok(RunOutput { prepared: prepared.criteria.clone(), decisions, audit: number_events(events), gateway_failures })
}

/// Assigns sequence numbers in the given order.
pub fn number_events(events: Vec<PendingEvent>) -> Vec<AuditEvent> {
    events
        .into_iter()
        .zip(0u64..)
        .map(|(e, seq)| AuditEvent {
            seq,
            stage: e.stage,
            criterion_id: e.criterion_id,
            patient_id: e.patient_id,
            request_digest: e.request_digest,
            outcome: e.outcome,
        })
        .collect()
}

/// Prepares, then matches. Deterministic under scripted and replay backends.
pub fn run(
    agents: &Agents<'_>,
    corpus: &Corpus,
    catalog: &CriteriaCatalog,
    options: &RunOptions,
    preparation: Preparation<'_>,
) -> Result<RunOutput, PipelineError> {
    let prepared = prepare(agents, catalog, options, preparation)?;
    match_all(agents, corpus, &prepared, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{ModelSettings, PromptSet};
    use crate::corpus::{load_corpus, load_criteria_catalog, EligibilityLabel};
    use crate::gateway::{ScriptRule, ScriptedBackend};
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    const PROBE: &str = "Knowledge Probing Agent";
    const NAV: &str = "Navigation Agent";
    const SELF_AUG: &str = "Self-Augment Agent";
    const SUPERVISE: &str = "Supervision Agent";
    const MATCH: &str = "Matching Agent";

    fn root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
    }

    fn catalog(variant: CatalogVariant) -> CriteriaCatalog {
        let file = format!("data/criteria_{}.json", variant.as_str());
        load_criteria_catalog(&root().join(file), variant).unwrap()
    }

    fn rule(pattern: &str, response: &str) -> ScriptRule {
        ScriptRule::when(&[pattern], response).always()
    }

    fn creatinine() -> Criterion {
        Criterion {
            id: CriterionId::new("CREATININE").unwrap(),
            definition: "Serum creatinine above the upper normal limit.".into(),
            variant: CatalogVariant::Original,
        }
    }

    fn prep(backend: &ScriptedBackend, criterion: &Criterion) -> Result<(FinalCriterion, Vec<PendingEvent>), PipelineError> {
        let prompts = PromptSet::default();
        let settings = ModelSettings::new("m");
        let agents = Agents::new(backend, &prompts, &settings);
        let mut p = prepare_criterion(&agents, criterion, &AugmentDeps::default())?;
        Ok((p.criteria.remove(0), p.events))
    }

    const GOOD_AUG: &str = "CRITERIA: Serum creatinine level above the upper normal limit.\nEXPLANATION: Normal levels vary by age and gender";

    #[test]
    fn sufficient_passes_through() {
        let b = ScriptedBackend::new(vec![rule(PROBE, "VERDICT: SUFFICIENT")]).unwrap();
        let (f, events) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::OriginalPassThrough);
        assert_eq!(f.text, creatinine().definition);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].stage, Stage::Probe);
    }

    #[test]
    fn approved_augmentation() {
        let b = ScriptedBackend::new(vec![
            rule(PROBE, "VERDICT: AUGMENT\nREASON: no ranges"),
            rule(NAV, "ROUTE: SELF"),
            rule(SELF_AUG, GOOD_AUG),
            rule(SUPERVISE, "JUDGMENT: PASS"),
        ])
        .unwrap();
        let (f, events) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::AugmentedApproved);
        assert_eq!(
            f.text,
            "Criteria: Serum creatinine level above the upper normal limit.\nExplanation: Normal levels vary by age and gender"
        );
        assert!(matches!(
            f.chain.last(),
            Some(ChainStep::Supervise { verdict: SupervisionVerdict { decision: SupervisionDecision::Approved, .. }, .. })
        ));
        let stages: Vec<Stage> = events.iter().map(|e| e.stage).collect();
        assert_eq!(stages, [Stage::Probe, Stage::Navigate, Stage::Augment, Stage::Supervise]);
    }

    #[test]
    fn rejection_revises_then_falls_back() {
        let b = ScriptedBackend::new(vec![
            rule(PROBE, "VERDICT: AUGMENT\nREASON: no ranges"),
            rule(NAV, "ROUTE: SELF"),
            rule(SELF_AUG, GOOD_AUG),
            rule(SUPERVISE, "JUDGMENT: FAIL\nREASON: added exclusion not in original"),
        ])
        .unwrap();
        let (f, _) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::FallbackAfterRejection);
        assert_eq!(f.text, creatinine().definition);
        let calls = b.calls();
        assert_eq!(calls.len(), 2 + 2 * (MAX_REVISIONS as usize + 1));
        let augment_prompts: Vec<_> =
            calls.iter().filter(|c| c.messages[0].content.contains(SELF_AUG)).map(|c| &c.messages[1].content).collect();
        assert!(!augment_prompts[0].contains("added exclusion"));
        assert!(augment_prompts[1].contains("- added exclusion not in original"));
    }

    #[test]
    fn second_revision_can_be_approved() {
        let b = ScriptedBackend::new(vec![
            rule(PROBE, "VERDICT: AUGMENT\nREASON: vague"),
            rule(NAV, "ROUTE: SELF"),
            ScriptRule::when(&[SELF_AUG], "CRITERIA: Creatinine is high.\nEXPLANATION: x"),
            rule(SELF_AUG, GOOD_AUG),
            rule(SUPERVISE, "JUDGMENT: PASS"),
        ])
        .unwrap();
        let (f, _) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::AugmentedApproved);
        assert!(f.chain.iter().any(|s| matches!(s, ChainStep::Supervise { revision: 0, verdict, .. }
            if verdict.reasons == [crate::agents::VERBATIM_FAILED])));
        assert!(b.calls()[3].messages[1].content.contains(crate::agents::VERBATIM_FAILED));
    }

    #[test]
    fn format_errors_exhaust_revisions() {
        let b = ScriptedBackend::new(vec![
            rule(PROBE, "VERDICT: AUGMENT\nREASON: vague"),
            rule(NAV, "ROUTE: SELF"),
            rule(SELF_AUG, "no sections here"),
        ])
        .unwrap();
        let (f, events) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::FallbackAfterRejection);
        let augments = events.iter().filter(|e| e.stage == Stage::Augment).count();
        assert_eq!(augments, (MAX_REVISIONS as usize + 1) * (crate::agents::REASKS + 1));
    }

    #[test]
    fn gateway_failure_during_preparation_falls_back() {
        let b = ScriptedBackend::new(vec![rule(PROBE, "VERDICT: AUGMENT\nREASON: vague")]).unwrap();
        let (f, events) = prep(&b, &creatinine()).unwrap();
        assert_eq!(f.provenance, Provenance::FallbackAfterRejection);
        assert!(matches!(f.chain.last(), Some(ChainStep::Aborted { stage: Stage::Navigate, .. })));
        assert!(events.last().unwrap().request_digest.is_some());
    }

    #[test]
    fn missing_snippet_store_aborts() {
        let b = ScriptedBackend::new(vec![
            rule(PROBE, "VERDICT: AUGMENT\nREASON: vague"),
            rule(NAV, "ROUTE: RETRIEVAL"),
        ])
        .unwrap();
        assert!(matches!(prep(&b, &creatinine()), Err(PipelineError::Configuration(_))));
    }

    #[test]
    fn strategy_catalog_pairing() {
        use CatalogVariant::*;
        assert!(check_pairing(PromptStrategy::ZeroShot, Redefined).is_ok());
        assert!(check_pairing(PromptStrategy::ZeroShot, Original).is_err());
        assert!(check_pairing(PromptStrategy::CoT, Original).is_ok());
        assert!(check_pairing(PromptStrategy::CoT, Redefined).is_err());
        assert!(check_pairing(PromptStrategy::Maka, Original).is_ok());
        assert!(check_pairing(PromptStrategy::Maka, Augmented).is_err());
    }

    fn mini_run(strategy: PromptStrategy, variant: CatalogVariant, rules: Vec<ScriptRule>) -> (RunOutput, ScriptedBackend) {
        let cat = catalog(variant);
        let corpus = load_corpus(&root().join("fixtures/mini"), &cat).unwrap();
        let b = ScriptedBackend::new(rules).unwrap();
        let prompts = PromptSet::default();
        let settings = ModelSettings::new("m");
        let agents = Agents::new(&b, &prompts, &settings);
        let out = run(&agents, &corpus, &cat, &RunOptions::new(strategy), Preparation::Fresh(AugmentDeps::default()))
            .unwrap();
        (out, b)
    }

    #[test]
    fn zero_shot_run_is_complete_and_isolated() {
        let (out, b) = mini_run(PromptStrategy::ZeroShot, CatalogVariant::Redefined, vec![rule(MATCH, "DECISION: MET")]);
        assert_eq!(out.decisions.len(), 39);
        assert_eq!(b.call_count(), 39);
        assert!(out.audit.iter().all(|e| e.stage == Stage::Match));
        assert_eq!(out.gateway_failures, 0);
        let keys: Vec<_> = out.decisions.iter().map(|d| (d.patient_id.clone(), d.criterion_id.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
        let audited: BTreeSet<_> = out.audit.iter().filter_map(|e| e.request_digest.as_ref()).collect();
        assert!(out.decisions.iter().all(|d| audited.contains(&d.transcript_digest)));
        assert!(out.audit.iter().enumerate().all(|(i, e)| e.seq == i as u64));
    }

    #[test]
    fn failed_pairs_fall_back_without_aborting() {
        let (out, _) = mini_run(
            PromptStrategy::CoT,
            CatalogVariant::Original,
            vec![ScriptRule::when(&[MATCH, "Criterion ID: ENGLISH"], "DECISION: MET").always()],
        );
        assert_eq!(out.decisions.len(), 39);
        assert_eq!(out.fallback_count(), 36);
        assert_eq!(out.gateway_failures, 36);
        for d in &out.decisions {
            let english = d.criterion_id.as_str() == "ENGLISH";
            assert_eq!(d.parse_ok, english);
            assert_eq!(d.label, if english { EligibilityLabel::Met } else { FALLBACK_LABEL });
        }
        let audited: BTreeSet<_> = out.audit.iter().filter_map(|e| e.request_digest.as_ref()).collect();
        assert!(out.decisions.iter().all(|d| audited.contains(&d.transcript_digest)));
    }

    #[test]
    fn maka_prepares_once_per_criterion() {
        let (out, b) = mini_run(
            PromptStrategy::Maka,
            CatalogVariant::Original,
            vec![rule(PROBE, "VERDICT: SUFFICIENT"), rule(MATCH, "DECISION: NOT MET")],
        );
        assert_eq!(b.call_count(), 13 + 39);
        assert_eq!(out.prepared.len(), 13);
        let first_match = out.audit.iter().position(|e| e.stage == Stage::Match).unwrap();
        assert!(out.audit[..first_match].iter().all(|e| e.stage == Stage::Probe));
        assert_eq!(first_match, 13);
    }

    #[test]
    fn reused_preparation_must_cover_catalog() {
        let cat = catalog(CatalogVariant::Original);
        let b = ScriptedBackend::new(vec![]).unwrap();
        let prompts = PromptSet::default();
        let settings = ModelSettings::new("m");
        let agents = Agents::new(&b, &prompts, &settings);
        let opts = RunOptions::new(PromptStrategy::Maka);
        let mut finals: Vec<_> = cat.criteria().iter().map(|c| FinalCriterion::pass_through(c, vec![])).collect();
        let p = prepare(&agents, &cat, &opts, Preparation::Reuse(finals.clone())).unwrap();
        assert_eq!(p.criteria.len(), 13);
        finals.pop();
        assert!(matches!(prepare(&agents, &cat, &opts, Preparation::Reuse(finals)), Err(PipelineError::Configuration(_))));
        assert_eq!(b.call_count(), 0);
    }

    #[test]
    fn zero_concurrency_rejected() {
        let cat = catalog(CatalogVariant::Original);
        let b = ScriptedBackend::new(vec![]).unwrap();
        let prompts = PromptSet::default();
        let settings = ModelSettings::new("m");
        let agents = Agents::new(&b, &prompts, &settings);
        let mut opts = RunOptions::new(PromptStrategy::Maka);
        opts.max_concurrency = 0;
        assert!(prepare(&agents, &cat, &opts, Preparation::Fresh(AugmentDeps::default())).is_err());
    }
}
