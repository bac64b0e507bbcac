//! The five agents: probing, navigation, augmentation, supervision and
//! matching. Each one renders a prompt template, calls the gateway and parses
//! the reply strictly. Unparseable replies are re-asked up to
//! [`REASKS`] times before the agent falls back to its conservative default.

mod parse;
pub mod prompts;
mod search;
mod verbatim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Criterion, CriterionId, EligibilityLabel, PatientRecord};
use crate::digest::Digest;
use crate::gateway::{cache_key, ChatMessage, ChatRequest, Completion, GatewayError, DEFAULT_MAX_TOKENS};
use crate::knowledge::{query_top_k, SnippetIndex, DEFAULT_TOP_K};

pub use parse::{parse_decision, parse_judgment, parse_probe, parse_route, parse_sections, ParseError};
pub use prompts::{PromptSet, TemplateName};
pub use search::{load_search_hits, SearchClient, SearchHit, StaticSearchClient};
pub use verbatim::{content_tokens, first_sentence, retains_verbatim};

/// Re-asks after an unparseable reply, before falling back.
pub const REASKS: usize = 2;
/// Whitespace tokens allowed in a matching prompt.
pub const DEFAULT_TOKEN_BUDGET: usize = 12_000;
/// Label recorded when the matcher never produced a readable decision.
pub const FALLBACK_LABEL: EligibilityLabel = EligibilityLabel::NotMet;

pub const VERBATIM_FAILED: &str = "verbatim retention failed";
pub const UNPARSEABLE_SUPERVISION: &str = "unparseable supervision response";
const NO_REASON: &str = "no reason given";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Probe,
    Navigate,
    Augment,
    Supervise,
    Match,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDecision {
    Sufficient,
    NeedsAugmentation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub decision: ProbeDecision,
    /// Empty for `Sufficient`.
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationRoute {
    SelfAugment,
    Retrieval,
    OnlineSearch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedCriterion {
    pub criterion_id: CriterionId,
    /// Restatement that must keep the original wording.
    pub criteria_line: String,
    pub explanation: String,
    pub route: AugmentationRoute,
    pub revision: u32,
    /// Snippet or search-hit ids injected into the prompt.
    pub evidence: Vec<String>,
}

impl AugmentedCriterion {
    /// `Criteria:` / `Explanation:` rendering handed to the matcher.
    pub fn render(&self) -> String {
        format!("Criteria: {}\nExplanation: {}", self.criteria_line, self.explanation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionDecision {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionVerdict {
    pub decision: SupervisionDecision,
    pub reasons: Vec<String>,
}

impl SupervisionVerdict {
    fn rejected(reason: impl Into<String>) -> Self {
        SupervisionVerdict { decision: SupervisionDecision::Rejected, reasons: vec![reason.into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub patient_id: String,
    pub criterion_id: CriterionId,
    pub label: EligibilityLabel,
    pub rationale: String,
    pub parse_ok: bool,
    pub transcript_digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStrategy {
    ZeroShot,
    CoT,
    Maka,
}

impl PromptStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "zeroshot",
            PromptStrategy::CoT => "cot",
            PromptStrategy::Maka => "maka",
        }
    }

    /// Column heading used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "Zero-shot",
            PromptStrategy::CoT => "CoT",
            PromptStrategy::Maka => "MAKA",
        }
    }
}

impl std::str::FromStr for PromptStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zeroshot" | "zero-shot" => Ok(PromptStrategy::ZeroShot),
            "cot" => Ok(PromptStrategy::CoT),
            "maka" => Ok(PromptStrategy::Maka),
            other => Err(format!("unknown strategy {other:?} (expected zeroshot, cot or maka)")),
        }
    }
}

/// One gateway round trip as seen by the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request_digest: Digest,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome<T> {
    pub value: T,
    /// False when the value is a fallback after unparseable replies.
    pub parse_ok: bool,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub decision: MatchDecision,
    pub exchanges: Vec<Exchange>,
    /// Oldest notes dropped to fit the token budget.
    pub dropped_notes: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("gateway call {digest} failed: {source}")]
    Gateway {
        digest: Digest,
        exchanges: Vec<Exchange>,
        #[source]
        source: GatewayError,
    },
    #[error("augmentation of {criterion} lacks CRITERIA/EXPLANATION sections")]
    AugmentFormat { criterion: CriterionId, exchanges: Vec<Exchange> },
    #[error("configuration: {0}")]
    Configuration(String),
    #[error("patient {patient_id}: newest note alone needs {needed} prompt tokens, budget is {budget}")]
    TokenBudget { patient_id: String, needed: usize, budget: usize },
    #[error("search failed: {0}")]
    Search(String),
}

impl AgentError {
    /// Exchanges completed before the failure.
    pub fn exchanges(&self) -> &[Exchange] {
        match self {
            AgentError::Gateway { exchanges, .. } | AgentError::AugmentFormat { exchanges, .. } => exchanges,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<i64>,
}

impl ModelSettings {
    pub fn new(model_id: impl Into<String>) -> Self {
        ModelSettings { model_id: model_id.into(), temperature: 0.0, max_tokens: DEFAULT_MAX_TOKENS, seed: Some(0) }
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model_id: self.model_id.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }
}

/// External knowledge sources available to augmentation.
#[derive(Clone, Copy)]
pub struct AugmentDeps<'a> {
    pub index: Option<&'a SnippetIndex>,
    pub search: Option<&'a dyn SearchClient>,
    pub top_k: usize,
}

impl Default for AugmentDeps<'_> {
    fn default() -> Self {
        AugmentDeps { index: None, search: None, top_k: DEFAULT_TOP_K }
    }
}

struct Asked<T> {
    value: Option<T>,
    exchanges: Vec<Exchange>,
    last_content: String,
}

/// Everything an agent needs to talk to the model. Holds no mutable state.
#[derive(Clone, Copy)]
pub struct Agents<'a> {
    pub llm: &'a dyn Completion,
    pub prompts: &'a PromptSet,
    pub settings: &'a ModelSettings,
}

fn criterion_vars(criterion: &Criterion) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("criterion_id", criterion.id.to_string()),
        ("criterion_definition", criterion.definition.clone()),
    ])
}

impl<'a> Agents<'a> {
    pub fn new(llm: &'a dyn Completion, prompts: &'a PromptSet, settings: &'a ModelSettings) -> Self {
        Agents { llm, prompts, settings }
    }

    fn ask<T>(
        &self,
        template: TemplateName,
        vars: &BTreeMap<&str, String>,
        expected_format: &str,
        parse: impl Fn(&str) -> Option<T>,
        describe: impl Fn(&T) -> String,
    ) -> Result<Asked<T>, AgentError> {
        let (system, user) = self.prompts.render(template, vars);
        let mut messages = vec![ChatMessage::system(system), ChatMessage::user(user)];
        let mut exchanges = Vec::new();
        let mut last_content = String::new();
        for attempt in 0..=REASKS {
            let request = self.settings.request(messages.clone());
            let digest = cache_key(&request);
            let response = match self.llm.complete(&request) {
                Ok(r) => r,
                Err(source) => return Err(AgentError::Gateway { digest, exchanges, source }),
            };
            if let Some(value) = parse(&response.content) {
                exchanges.push(Exchange { request_digest: digest, outcome: describe(&value) });
                return Ok(Asked { value: Some(value), exchanges, last_content: response.content });
            }
            exchanges.push(Exchange { request_digest: digest, outcome: "unparseable response".into() });
            if attempt < REASKS {
                let reply = if response.content.is_empty() { "(empty reply)".to_string() } else { response.content.clone() };
                messages.push(ChatMessage::assistant(reply));
                let vars = BTreeMap::from([("expected_format", expected_format.to_string())]);
                let (_, reask) = self.prompts.render(TemplateName::Reask, &vars);
                messages.push(ChatMessage::user(reask));
            }
            last_content = response.content;
        }
        Ok(Asked { value: None, exchanges, last_content })
    }

    /// Asks whether the criterion can be applied as written. Falls back to
    /// `Sufficient` (no augmentation) when the reply cannot be read.
    pub fn probe(&self, criterion: &Criterion) -> Result<AgentOutcome<ProbeVerdict>, AgentError> {
        let asked = self.ask(
            TemplateName::Probe,
            &criterion_vars(criterion),
            "VERDICT: SUFFICIENT\nor\nVERDICT: AUGMENT\nREASON: <the gap>",
            |text| {
                parse_probe(text).map(|(decision, reason)| match decision {
                    ProbeDecision::Sufficient => ProbeVerdict { decision, rationale: String::new() },
                    ProbeDecision::NeedsAugmentation => ProbeVerdict {
                        decision,
                        rationale: if reason.is_empty() { NO_REASON.to_string() } else { reason },
                    },
                })
            },
            |v| match v.decision {
                ProbeDecision::Sufficient => "sufficient".to_string(),
                ProbeDecision::NeedsAugmentation => format!("needs augmentation: {}", v.rationale),
            },
        )?;
        Ok(finish(asked, "sufficient", ProbeVerdict { decision: ProbeDecision::Sufficient, rationale: String::new() }))
    }

    /// Picks an augmentation route. Falls back to `SelfAugment`.
    pub fn navigate(&self, criterion: &Criterion, rationale: &str) -> Result<AgentOutcome<AugmentationRoute>, AgentError> {
        let mut vars = criterion_vars(criterion);
        vars.insert("rationale", rationale.to_string());
        let asked = self.ask(
            TemplateName::Navigate,
            &vars,
            "ROUTE: SELF\nor\nROUTE: RETRIEVAL\nor\nROUTE: SEARCH",
            parse_route,
            |r| format!("route {}", route_name(*r)),
        )?;
        Ok(finish(asked, "route self_augment", AugmentationRoute::SelfAugment))
    }

    /// Produces an augmented criterion through `route`. `feedback` carries
    /// the supervisor's reasons from a rejected earlier revision.
    pub fn augment(
        &self,
        criterion: &Criterion,
        route: AugmentationRoute,
        rationale: &str,
        feedback: &[String],
        revision: u32,
        deps: &AugmentDeps<'_>,
    ) -> Result<AgentOutcome<AugmentedCriterion>, AgentError> {
        let mut vars = criterion_vars(criterion);
        vars.insert("rationale", rationale.to_string());
        let mut evidence = Vec::new();
        let template = match route {
            AugmentationRoute::SelfAugment => TemplateName::SelfAugment,
            AugmentationRoute::Retrieval => {
                let index = deps
                    .index
                    .ok_or_else(|| AgentError::Configuration("retrieval route needs a snippet store".into()))?;
                let hits = query_top_k(index, &criterion.definition, deps.top_k);
                let lines: Vec<String> = hits
                    .iter()
                    .map(|h| format!("[{}] ({}) {}", h.snippet.id, h.snippet.source, h.snippet.text))
                    .collect();
                evidence = hits.into_iter().map(|h| h.snippet.id).collect();
                vars.insert("snippets", or_none(lines.join("\n")));
                TemplateName::RetrievalAugment
            }
            AugmentationRoute::OnlineSearch => {
                let search = deps
                    .search
                    .ok_or_else(|| AgentError::Configuration("online search route needs a search client".into()))?;
                let hits = search.search(&criterion.definition, deps.top_k).map_err(AgentError::Search)?;
                let lines: Vec<String> = hits.iter().map(|h| format!("[{}] {}: {}", h.id, h.title, h.summary)).collect();
                evidence = hits.into_iter().map(|h| h.id).collect();
                vars.insert("snippets", or_none(lines.join("\n")));
                TemplateName::SearchAugment
            }
        };
        if !feedback.is_empty() {
            let list: Vec<String> = feedback.iter().map(|r| format!("- {r}")).collect();
            let (_, text) = self.prompts.render(TemplateName::Revision, &BTreeMap::from([("feedback", list.join("\n"))]));
            vars.insert("feedback", text);
        }
        let asked = self.ask(
            template,
            &vars,
            "CRITERIA: <the criterion restated, keeping its original wording>\nEXPLANATION: <clarifications>",
            parse_sections,
            |_| format!("revision {revision}: sections parsed"),
        )?;
        match asked.value {
            Some((criteria_line, explanation)) => Ok(AgentOutcome {
                value: AugmentedCriterion {
                    criterion_id: criterion.id.clone(),
                    criteria_line,
                    explanation,
                    route,
                    revision,
                    evidence,
                },
                parse_ok: true,
                exchanges: asked.exchanges,
            }),
            None => Err(AgentError::AugmentFormat { criterion: criterion.id.clone(), exchanges: asked.exchanges }),
        }
    }

    /// Approves only when the wording is retained verbatim and the model
    /// judges the augmentation faithful. A verbatim failure rejects without
    /// consulting the model.
    pub fn supervise(
        &self,
        original: &Criterion,
        augmented: &AugmentedCriterion,
    ) -> Result<AgentOutcome<SupervisionVerdict>, AgentError> {
        if !verbatim_retained(original, augmented) {
            return Ok(AgentOutcome { value: SupervisionVerdict::rejected(VERBATIM_FAILED), parse_ok: true, exchanges: vec![] });
        }
        let mut vars = criterion_vars(original);
        vars.insert("criteria_line", augmented.criteria_line.clone());
        vars.insert("explanation", augmented.explanation.clone());
        let asked = self.ask(
            TemplateName::Supervise,
            &vars,
            "JUDGMENT: PASS\nor\nJUDGMENT: FAIL\nREASON: <problem>",
            |text| {
                parse_judgment(text).map(|(decision, mut reasons)| {
                    if decision == SupervisionDecision::Rejected && reasons.is_empty() {
                        reasons.push("supervisor judged the augmentation unfaithful".into());
                    }
                    SupervisionVerdict { decision, reasons }
                })
            },
            |v| match v.decision {
                SupervisionDecision::Approved => "approved".to_string(),
                SupervisionDecision::Rejected => format!("rejected: {}", v.reasons.join("; ")),
            },
        )?;
        Ok(finish(asked, "rejected", SupervisionVerdict::rejected(UNPARSEABLE_SUPERVISION)))
    }

    /// Decides one patient-criterion pair. Oldest notes are dropped until the
    /// prompt fits `token_budget`; the criterion and instructions are never cut.
    pub fn match_patient(
        &self,
        criterion_id: &CriterionId,
        criterion_text: &str,
        patient: &PatientRecord,
        strategy: PromptStrategy,
        token_budget: usize,
    ) -> Result<MatchOutcome, AgentError> {
        let template = match strategy {
            PromptStrategy::CoT => TemplateName::MatchCot,
            PromptStrategy::ZeroShot | PromptStrategy::Maka => TemplateName::MatchZeroShot,
        };
        let mut vars = BTreeMap::from([
            ("criterion_id", criterion_id.to_string()),
            ("criterion_definition", criterion_text.to_string()),
        ]);
        let notes = &patient.notes;
        let mut first = 0;
        loop {
            let text: Vec<&str> = notes[first..].iter().map(|n| n.text.trim()).collect();
            vars.insert("notes", text.join("\n\n"));
            let (system, user) = self.prompts.render(template, &vars);
            let needed = system.split_whitespace().count() + user.split_whitespace().count();
            if needed <= token_budget {
                break;
            }
            if first + 1 >= notes.len() {
                return Err(AgentError::TokenBudget { patient_id: patient.patient_id.clone(), needed, budget: token_budget });
            }
            first += 1;
        }

        let asked = self.ask(
            template,
            &vars,
            "DECISION: MET\nor\nDECISION: NOT MET",
            |t| parse_decision(t).ok(),
            |l| format!("decision {}", l.as_str()),
        )?;
        let transcript_digest = asked.exchanges.last().expect("at least one exchange").request_digest.clone();
        let (label, parse_ok, rationale) = match asked.value {
            Some(label) => (label, true, asked.last_content.trim().to_string()),
            None => (FALLBACK_LABEL, false, format!("unparseable matching response; defaulted to {}", FALLBACK_LABEL.as_str())),
        };
        let mut exchanges = asked.exchanges;
        if !parse_ok {
            if let Some(last) = exchanges.last_mut() {
                last.outcome = format!("unparseable response; fallback decision {}", FALLBACK_LABEL.as_str());
            }
        }
        Ok(MatchOutcome {
            decision: MatchDecision {
                patient_id: patient.patient_id.clone(),
                criterion_id: criterion_id.clone(),
                label,
                rationale,
                parse_ok,
                transcript_digest,
            },
            exchanges,
            dropped_notes: first,
        })
    }
}

fn or_none(s: String) -> String {
    if s.is_empty() {
        "(none found)".to_string()
    } else {
        s
    }
}

pub fn route_name(route: AugmentationRoute) -> &'static str {
    match route {
        AugmentationRoute::SelfAugment => "self_augment",
        AugmentationRoute::Retrieval => "retrieval",
        AugmentationRoute::OnlineSearch => "online_search",
    }
}

fn finish<T>(asked: Asked<T>, fallback_label: &str, fallback: T) -> AgentOutcome<T> {
    match asked.value {
        Some(value) => AgentOutcome { value, parse_ok: true, exchanges: asked.exchanges },
        None => {
            let mut exchanges = asked.exchanges;
            if let Some(last) = exchanges.last_mut() {
                last.outcome = format!("unparseable response; fallback {fallback_label}");
            }
            AgentOutcome { value: fallback, parse_ok: false, exchanges }
        }
    }
}

/// Deterministic half of supervision: see [`retains_verbatim`].
pub fn verbatim_retained(original: &Criterion, augmented: &AugmentedCriterion) -> bool {
    retains_verbatim(&original.definition, &augmented.criteria_line)
}
