//! Script rules keyed on the agent named in each system prompt.

use maka_core::gateway::ScriptRule;

pub const PROBE: &str = "Knowledge Probing Agent";
pub const NAVIGATE: &str = "Navigation Agent";
pub const SELF_AUGMENT: &str = "Self-Augment Agent";
pub const RETRIEVAL: &str = "Retrieval Agent";
pub const SEARCH: &str = "Online Search Agent";
pub const SUPERVISE: &str = "Supervision Agent";
pub const MATCH: &str = "Matching Agent";

/// Unlimited rule for every request whose transcript matches all patterns.
pub fn always(patterns: &[&str], response: &str) -> ScriptRule {
    ScriptRule::when(patterns, response).always()
}

/// Restatement that keeps the wording of `definition` and adds an explanation.
pub fn faithful_augmentation(definition: &str) -> String {
    format!("CRITERIA: {definition}\nEXPLANATION: Apply the criterion using standard clinical definitions.")
}

/// Rules that answer each catalog criterion's matcher call with the gold
/// label of each patient, so the run reproduces the gold standard.
pub fn gold_match_rules<'a>(gold: impl IntoIterator<Item = (&'a str, &'a str, bool)>) -> Vec<ScriptRule> {
    gold.into_iter()
        .map(|(patient_marker, criterion, met)| {
            let decision = if met { "DECISION: MET" } else { "DECISION: NOT MET" };
            let id_line = format!("Criterion ID: {}\\n", regex::escape(criterion));
            always(&[MATCH, &id_line, &regex::escape(patient_marker)], decision)
        })
        .collect()
}
