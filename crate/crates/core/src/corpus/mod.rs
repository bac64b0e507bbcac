//! Patient corpora and criteria catalogs.

mod catalog;
mod document;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{CanonicalHasher, Digest};

pub use catalog::{load_criteria_catalog, CatalogVariant, CriteriaCatalog, Criterion, CriterionId};
pub use document::{parse_patient_document, split_notes, ClinicalNote, ParsedDocument, PatientRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextPosition {
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for TextPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed XML at {position}: {message}")]
    Parse { position: TextPosition, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("criterion {criterion}: invalid met attribute {value:?}")]
    Label { criterion: String, value: String },
    #[error("no patient documents in {0}")]
    EmptyCorpus(PathBuf),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("{file}: {source}")]
    File {
        file: String,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// Gold or predicted outcome for one patient-criterion pair. `Met` is the
/// positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EligibilityLabel {
    #[serde(rename = "MET")]
    Met,
    #[serde(rename = "NOT MET")]
    NotMet,
}

impl EligibilityLabel {
    pub fn is_met(self) -> bool {
        self == EligibilityLabel::Met
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EligibilityLabel::Met => "MET",
            EligibilityLabel::NotMet => "NOT MET",
        }
    }
}

/// One label per catalog criterion for a single patient.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoldLabels(BTreeMap<CriterionId, EligibilityLabel>);

impl GoldLabels {
    pub fn from_map(map: BTreeMap<CriterionId, EligibilityLabel>) -> Self {
        GoldLabels(map)
    }

    pub fn get(&self, id: &CriterionId) -> Option<EligibilityLabel> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CriterionId, EligibilityLabel)> {
        self.0.iter().map(|(k, v)| (k, *v))
    }

    pub fn as_map(&self) -> &BTreeMap<CriterionId, EligibilityLabel> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientEntry {
    pub record: PatientRecord,
    pub gold: GoldLabels,
}

/// Parsed patients in file-name order. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    patients: Vec<PatientEntry>,
}

impl Corpus {
    pub fn new(patients: Vec<PatientEntry>) -> Self {
        Corpus { patients }
    }

    pub fn patients(&self) -> &[PatientEntry] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.record.patient_id == patient_id)
    }

    /// Gold labels keyed by patient id.
    pub fn gold(&self) -> BTreeMap<String, GoldLabels> {
        self.patients.iter().map(|p| (p.record.patient_id.clone(), p.gold.clone())).collect()
    }

    /// Digest over patient ids, note text and gold labels, in corpus order.
    pub fn digest(&self) -> Digest {
        let mut h = CanonicalHasher::new("maka.corpus.v1");
        h.u64(self.patients.len() as u64);
        for p in &self.patients {
            h.str(&p.record.patient_id).str(&p.record.raw_text);
            h.u64(p.gold.len() as u64);
            for (id, label) in p.gold.iter() {
                h.str(id.as_str()).str(label.as_str());
            }
        }
        h.finish()
    }
}

/// Loads every `*.xml` file in `dir`, sorted by file name. The first failing
/// file (in that order) aborts the load and is named in the error.
pub fn load_corpus(dir: &Path, catalog: &CriteriaCatalog) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "xml"))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(CorpusError::EmptyCorpus(dir.to_path_buf()));
    }

    let parsed: Vec<Result<ParsedDocument, CorpusError>> = files
        .par_iter()
        .map(|path| {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let wrap = |source| CorpusError::File { file: file.clone(), source: Box::new(source) };
            let bytes = std::fs::read(path).map_err(|source| wrap(CorpusError::Io { path: path.clone(), source }))?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            parse_patient_document(&stem, &bytes, catalog).map_err(wrap)
        })
        .collect();

    let mut patients = Vec::with_capacity(parsed.len());
    for result in parsed {
        let doc = result?;
        for w in &doc.warnings {
            log::warn!("{w}");
        }
        let (record, gold) = doc.into_parts();
        patients.push(PatientEntry { record, gold });
    }
    Ok(Corpus { patients })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub patient_count: usize,
    pub pair_count: usize,
    /// Unicode-whitespace tokens over all note text.
    pub total_tokens: usize,
    pub mean_tokens_per_patient: f64,
}

pub fn corpus_stats(corpus: &Corpus, catalog: &CriteriaCatalog) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus(PathBuf::new()));
    }
    let total_tokens: usize = corpus.patients.iter().map(|p| p.record.token_count()).sum();
    Ok(CorpusStats {
        patient_count: corpus.len(),
        pair_count: corpus.len() * catalog.len(),
        total_tokens,
        mean_tokens_per_patient: total_tokens as f64 / corpus.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_serializes_as_display_strings() {
        assert_eq!(serde_json::to_string(&EligibilityLabel::NotMet).unwrap(), "\"NOT MET\"");
        assert_eq!(serde_json::from_str::<EligibilityLabel>("\"MET\"").unwrap(), EligibilityLabel::Met);
    }

    #[test]
    fn stats_count_whitespace_tokens() {
        let record = PatientRecord {
            patient_id: "1".into(),
            notes: split_notes("a b c"),
            raw_text: "a b c".into(),
        };
        let corpus = Corpus::new(vec![PatientEntry { record, gold: GoldLabels::default() }]);
        let cat = CriteriaCatalog::from_json(r#"[{"id":"A","definition":"x"},{"id":"B","definition":"y"}]"#, CatalogVariant::Original).unwrap();
        let stats = corpus_stats(&corpus, &cat).unwrap();
        assert_eq!(stats.total_tokens, 3);
        assert_eq!(stats.pair_count, 2);
        assert!(corpus_stats(&Corpus::new(vec![]), &cat).is_err());
    }
}
