//! Line-oriented parsers for agent replies. Tag lines are matched
//! case-insensitively with surrounding whitespace ignored; when a tag line
//! occurs more than once, the last occurrence wins.

use std::sync::OnceLock;

use regex::Regex;

use super::{AugmentationRoute, ProbeDecision, SupervisionDecision};
use crate::corpus::EligibilityLabel;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no decision line in response")]
pub struct ParseError;

macro_rules! pattern {
    ($name:ident, $re:expr) => {
        fn $name() -> &'static Regex {
            static RE: OnceLock<Regex> = OnceLock::new();
            RE.get_or_init(|| Regex::new($re).expect("static pattern"))
        }
    };
}

pattern!(decision_re, r"(?i)^\s*decision:\s*(met|not\s+met)\s*$");
pattern!(verdict_re, r"(?i)^\s*verdict:\s*(sufficient|augment)\s*$");
pattern!(route_re, r"(?i)^\s*route:\s*(self|retrieval|search)\s*$");
pattern!(judgment_re, r"(?i)^\s*judgment:\s*(pass|fail)\s*$");
pattern!(reason_re, r"(?i)^\s*reason:\s*(.*?)\s*$");
pattern!(criteria_re, r"(?i)^[\s*#]*criteria\s*:\**\s*(.*)$");
pattern!(explanation_re, r"(?i)^[\s*#]*explanation\s*:\**\s*(.*)$");

fn last_capture(text: &str, re: &Regex) -> Option<String> {
    text.lines().rev().find_map(|l| re.captures(l).map(|c| c[1].to_ascii_lowercase()))
}

fn reasons(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| reason_re().captures(l).map(|c| c[1].to_string()))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Reads the last `DECISION: MET` / `DECISION: NOT MET` line.
pub fn parse_decision(text: &str) -> Result<EligibilityLabel, ParseError> {
    match last_capture(text, decision_re()).as_deref() {
        Some("met") => Ok(EligibilityLabel::Met),
        Some(_) => Ok(EligibilityLabel::NotMet),
        None => Err(ParseError),
    }
}

/// `VERDICT:` line plus any `REASON:` lines joined with "; ".
pub fn parse_probe(text: &str) -> Option<(ProbeDecision, String)> {
    let decision = match last_capture(text, verdict_re())?.as_str() {
        "sufficient" => ProbeDecision::Sufficient,
        _ => ProbeDecision::NeedsAugmentation,
    };
    Some((decision, reasons(text).join("; ")))
}

pub fn parse_route(text: &str) -> Option<AugmentationRoute> {
    Some(match last_capture(text, route_re())?.as_str() {
        "self" => AugmentationRoute::SelfAugment,
        "retrieval" => AugmentationRoute::Retrieval,
        _ => AugmentationRoute::OnlineSearch,
    })
}

pub fn parse_judgment(text: &str) -> Option<(SupervisionDecision, Vec<String>)> {
    let decision = match last_capture(text, judgment_re())?.as_str() {
        "pass" => SupervisionDecision::Approved,
        _ => SupervisionDecision::Rejected,
    };
    Some((decision, reasons(text)))
}

/// Extracts the `CRITERIA:` and `EXPLANATION:` sections. The criteria
/// section runs up to the explanation line; the explanation runs to the end.
pub fn parse_sections(text: &str) -> Option<(String, String)> {
    let lines: Vec<&str> = text.lines().collect();
    let e = lines.iter().rposition(|l| explanation_re().is_match(l))?;
    let c = lines[..e].iter().rposition(|l| criteria_re().is_match(l))?;
    let head = |i: usize, re: &Regex| re.captures(lines[i]).map(|cap| cap[1].to_string()).unwrap_or_default();
    let join = |first: String, rest: &[&str]| {
        std::iter::once(first.as_str())
            .chain(rest.iter().copied())
            .collect::<Vec<_>>()
            .join("\n")
            .trim()
            .to_string()
    };
    let criteria = join(head(c, criteria_re()), &lines[c + 1..e]);
    let explanation = join(head(e, explanation_re()), &lines[e + 1..]);
    (!criteria.is_empty() && !explanation.is_empty()).then_some((criteria, explanation))
}
