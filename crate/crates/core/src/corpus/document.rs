//! n2c2-shaped patient documents: a `PatientMatching` root holding the note
//! text in `TEXT` and one `<CRITERION met="..."/>` element per criterion in
//! `TAGS`.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::{CorpusError, CriteriaCatalog, CriterionId, EligibilityLabel, GoldLabels, TextPosition};

const HEADER: &str = "Record date:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalNote {
    pub sequence_index: usize,
    /// `None` when the header is missing or its date does not parse.
    pub record_date: Option<NaiveDate>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub notes: Vec<ClinicalNote>,
    pub raw_text: String,
}

impl PatientRecord {
    pub fn token_count(&self) -> usize {
        self.raw_text.split_whitespace().count()
    }
}

#[derive(Debug, Clone)]
pub struct ParsedDocument {
    pub record: PatientRecord,
    pub gold: GoldLabels,
    pub warnings: Vec<String>,
}

impl ParsedDocument {
    pub fn into_parts(self) -> (PatientRecord, GoldLabels) {
        (self.record, self.gold)
    }
}

/// Splits a TEXT payload into notes. Every line starting with
/// `Record date:` opens a note; text before the first header becomes its own
/// undated note unless it is blank, in which case it is folded into the
/// first note so the note texts always concatenate back to `raw`.
pub fn split_notes(raw: &str) -> Vec<ClinicalNote> {
    let mut headers: Vec<(usize, Option<NaiveDate>)> = Vec::new();
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if let Some(rest) = line.trim_start().strip_prefix(HEADER) {
            headers.push((offset, parse_header_date(rest)));
        }
        offset += line.len();
    }

    if headers.is_empty() {
        return vec![ClinicalNote { sequence_index: 0, record_date: None, text: raw.to_string() }];
    }

    let mut segments: Vec<(usize, Option<NaiveDate>)> = Vec::with_capacity(headers.len() + 1);
    let first = headers[0].0;
    if raw[..first].trim().is_empty() {
        headers[0].0 = 0;
    } else {
        segments.push((0, None));
    }
    segments.extend(headers);

    segments
        .iter()
        .enumerate()
        .map(|(i, &(start, record_date))| {
            let end = segments.get(i + 1).map_or(raw.len(), |s| s.0);
            ClinicalNote { sequence_index: i, record_date, text: raw[start..end].to_string() }
        })
        .collect()
}

fn parse_header_date(rest: &str) -> Option<NaiveDate> {
    let token = rest.split_whitespace().next()?;
    let b = token.as_bytes();
    let shaped = b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit());
    if !shaped {
        return None;
    }
    NaiveDate::parse_from_str(token, "%Y-%m-%d").ok()
}

fn position_of(text: &str, byte_offset: usize) -> TextPosition {
    let prefix = &text.as_bytes()[..byte_offset];
    let line = prefix.iter().filter(|&&b| b == b'\n').count() as u32 + 1;
    let line_start = prefix.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    TextPosition { line, column: (byte_offset - line_start) as u32 + 1 }
}

/// Parses one patient document. `patient_id` normally comes from the file stem.
pub fn parse_patient_document(
    patient_id: &str,
    bytes: &[u8],
    catalog: &CriteriaCatalog,
) -> Result<ParsedDocument, CorpusError> {
    if patient_id.is_empty() || patient_id.contains(['/', '\\']) {
        return Err(CorpusError::Schema(format!("invalid patient id {patient_id:?}")));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let valid = std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap_or_default();
        CorpusError::Parse {
            position: position_of(valid, valid.len()),
            message: "invalid UTF-8".into(),
        }
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        CorpusError::Parse {
            position: TextPosition { line: pos.row, column: pos.col },
            message: e.to_string(),
        }
    })?;

    let root = doc.root_element();
    if root.tag_name().name() != "PatientMatching" {
        return Err(CorpusError::Schema(format!(
            "root element must be PatientMatching, found {}",
            root.tag_name().name()
        )));
    }
    let child = |name: &str| root.children().find(|n| n.is_element() && n.tag_name().name() == name);

    let text_node = child("TEXT").ok_or_else(|| CorpusError::Schema("missing TEXT element".into()))?;
    let tags_node = child("TAGS").ok_or_else(|| CorpusError::Schema("missing TAGS element".into()))?;

    let raw_text: String = text_node.descendants().filter(|n| n.is_text()).filter_map(|n| n.text()).collect();
    if raw_text.trim().is_empty() {
        return Err(CorpusError::Schema("TEXT element is empty".into()));
    }

    let mut warnings = Vec::new();
    let mut labels = BTreeMap::new();
    for tag in tags_node.children().filter(|n| n.is_element()) {
        let name = tag.tag_name().name();
        let id = match CriterionId::new(name) {
            Ok(id) if catalog.contains(&id) => id,
            _ => {
                warnings.push(format!("{patient_id}: ignoring unknown tag {name}"));
                continue;
            }
        };
        let label = match tag.attribute("met") {
            Some("met") => EligibilityLabel::Met,
            Some("not met") => EligibilityLabel::NotMet,
            other => {
                return Err(CorpusError::Label {
                    criterion: id.to_string(),
                    value: other.unwrap_or("<missing>").to_string(),
                })
            }
        };
        if labels.insert(id.clone(), label).is_some() {
            return Err(CorpusError::Schema(format!("duplicate tag {id}")));
        }
    }
    let missing: Vec<&str> = catalog.ids().filter(|id| !labels.contains_key(*id)).map(|id| id.as_str()).collect();
    if !missing.is_empty() {
        return Err(CorpusError::Schema(format!("TAGS is missing {}", missing.join(", "))));
    }

    let notes = split_notes(&raw_text);
    if !(2..=5).contains(&notes.len()) {
        warnings.push(format!("{patient_id}: {} notes (expected 2 to 5)", notes.len()));
    }

    Ok(ParsedDocument {
        record: PatientRecord { patient_id: patient_id.to_string(), notes, raw_text },
        gold: GoldLabels::from_map(labels),
        warnings,
    })
}
