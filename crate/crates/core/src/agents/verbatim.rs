//! Deterministic check that an augmented restatement keeps the original
//! wording: the content tokens of the original's first sentence must occur
//! in the restatement as an ordered subsequence.

use crate::knowledge::tokenize;

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "from", "by", "with", "as", "or", "and", "nor", "is",
    "are", "was", "were", "be", "been", "such",
];

/// Case-folds and collapses whitespace runs.
fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Text up to the first `.`, `!` or `?` that is followed by whitespace or
/// ends the string. Decimal points never end a sentence.
pub fn first_sentence(text: &str) -> &str {
    let mut it = text.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        if matches!(c, '.' | '!' | '?') {
            match it.peek() {
                None => return &text[..i],
                Some((_, n)) if n.is_whitespace() => return &text[..i],
                _ => {}
            }
        }
    }
    text
}

pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// True when every content token of `original`'s first sentence appears in
/// `restatement`, in order.
pub fn retains_verbatim(original: &str, restatement: &str) -> bool {
    let required = content_tokens(first_sentence(&normalize(original)));
    let available = tokenize(&normalize(restatement));
    let mut pos = available.iter();
    required.iter().all(|t| pos.any(|a| a == t))
}
