//! Prompt templates. Each agent template is a text file with a `[system]`
//! and a `[user]` section; `{name}` slots are filled at render time.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::{AgentError, Stage};
use crate::gateway::{ChatRequest, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateName {
    Probe,
    Navigate,
    SelfAugment,
    RetrievalAugment,
    SearchAugment,
    Supervise,
    MatchZeroShot,
    MatchCot,
    Reask,
    Revision,
}

impl TemplateName {
    pub const ALL: [TemplateName; 10] = [
        TemplateName::Probe,
        TemplateName::Navigate,
        TemplateName::SelfAugment,
        TemplateName::RetrievalAugment,
        TemplateName::SearchAugment,
        TemplateName::Supervise,
        TemplateName::MatchZeroShot,
        TemplateName::MatchCot,
        TemplateName::Reask,
        TemplateName::Revision,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::Probe => "probe.txt",
            TemplateName::Navigate => "navigate.txt",
            TemplateName::SelfAugment => "self_augment.txt",
            TemplateName::RetrievalAugment => "retrieval_augment.txt",
            TemplateName::SearchAugment => "search_augment.txt",
            TemplateName::Supervise => "supervise.txt",
            TemplateName::MatchZeroShot => "match_zeroshot.txt",
            TemplateName::MatchCot => "match_cot.txt",
            TemplateName::Reask => "reask.txt",
            TemplateName::Revision => "revision.txt",
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateName::Probe => include_str!("../../prompts/probe.txt"),
            TemplateName::Navigate => include_str!("../../prompts/navigate.txt"),
            TemplateName::SelfAugment => include_str!("../../prompts/self_augment.txt"),
            TemplateName::RetrievalAugment => include_str!("../../prompts/retrieval_augment.txt"),
            TemplateName::SearchAugment => include_str!("../../prompts/search_augment.txt"),
            TemplateName::Supervise => include_str!("../../prompts/supervise.txt"),
            TemplateName::MatchZeroShot => include_str!("../../prompts/match_zeroshot.txt"),
            TemplateName::MatchCot => include_str!("../../prompts/match_cot.txt"),
            TemplateName::Reask => include_str!("../../prompts/reask.txt"),
            TemplateName::Revision => include_str!("../../prompts/revision.txt"),
        }
    }

    /// Fragments have no system part and are spliced into other messages.
    fn is_fragment(self) -> bool {
        matches!(self, TemplateName::Reask | TemplateName::Revision)
    }

    fn allowed_slots(self) -> &'static [&'static str] {
        match self {
            TemplateName::Probe => &["criterion_id", "criterion_definition"],
            TemplateName::Navigate => &["criterion_id", "criterion_definition", "rationale"],
            TemplateName::SelfAugment => &["criterion_id", "criterion_definition", "rationale", "feedback"],
            TemplateName::RetrievalAugment | TemplateName::SearchAugment => {
                &["criterion_id", "criterion_definition", "rationale", "snippets", "feedback"]
            }
            TemplateName::Supervise => &["criterion_id", "criterion_definition", "criteria_line", "explanation"],
            TemplateName::MatchZeroShot | TemplateName::MatchCot => &["criterion_id", "criterion_definition", "notes"],
            TemplateName::Reask => &["expected_format"],
            TemplateName::Revision => &["feedback"],
        }
    }

    fn stage(self) -> Option<Stage> {
        match self {
            TemplateName::Probe => Some(Stage::Probe),
            TemplateName::Navigate => Some(Stage::Navigate),
            TemplateName::SelfAugment | TemplateName::RetrievalAugment | TemplateName::SearchAugment => {
                Some(Stage::Augment)
            }
            TemplateName::Supervise => Some(Stage::Supervise),
            TemplateName::MatchZeroShot | TemplateName::MatchCot => Some(Stage::Match),
            TemplateName::Reask | TemplateName::Revision => None,
        }
    }
}

fn slot_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("static pattern"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

impl Template {
    fn parse(name: TemplateName, text: &str) -> Result<Self, AgentError> {
        let bad = |m: String| AgentError::Configuration(format!("template {}: {m}", name.file_name()));
        let template = if name.is_fragment() {
            Template { system: String::new(), user: text.to_string() }
        } else {
            let body = text
                .strip_prefix("[system]\n")
                .ok_or_else(|| bad("must start with a [system] line".into()))?;
            let (system, user) = body
                .split_once("\n[user]\n")
                .ok_or_else(|| bad("missing [user] section".into()))?;
            Template { system: system.trim_end().to_string(), user: user.trim_end().to_string() }
        };
        for part in [&template.system, &template.user] {
            for cap in slot_pattern().captures_iter(part) {
                let slot = &cap[1];
                if !name.allowed_slots().contains(&slot) {
                    return Err(bad(format!("unknown placeholder {{{slot}}}")));
                }
            }
        }
        Ok(template)
    }
}

/// Substitutes `{name}` slots in one pass; missing values render empty.
pub fn fill(text: &str, vars: &BTreeMap<&str, String>) -> String {
    slot_pattern()
        .replace_all(text, |cap: &regex::Captures<'_>| vars.get(&cap[1]).cloned().unwrap_or_default())
        .into_owned()
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, Template>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = TemplateName::ALL
            .iter()
            .map(|&n| (n, Template::parse(n, n.default_text()).expect("shipped templates are valid")))
            .collect();
        PromptSet { templates }
    }
}

impl PromptSet {
    /// Shipped templates, with any same-named file in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, AgentError> {
        let mut set = PromptSet::default();
        for name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| AgentError::Configuration(format!("{}: {e}", path.display())))?;
                set.templates.insert(name, Template::parse(name, &text.replace("\r\n", "\n"))?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &Template {
        &self.templates[&name]
    }

    pub fn render(&self, name: TemplateName, vars: &BTreeMap<&str, String>) -> (String, String) {
        let t = self.get(name);
        (fill(&t.system, vars), fill(&t.user, vars))
    }

    /// Identifies the agent that issued a request from its system message.
    pub fn stage_of(&self, request: &ChatRequest) -> Option<Stage> {
        let system = request.messages.first().filter(|m| m.role == Role::System)?;
        self.templates
            .iter()
            .find(|(n, t)| !n.is_fragment() && t.system == system.content)
            .and_then(|(n, _)| n.stage())
    }
}
