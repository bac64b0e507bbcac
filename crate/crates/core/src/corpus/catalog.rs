use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Upper-case key of an eligibility criterion, e.g. `ABDOMINAL` or `MI-6MOS`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CriterionId(String);

impl CriterionId {
    pub fn new(id: impl Into<String>) -> Result<Self, CorpusError> {
        let id = id.into();
        let valid = id.starts_with(|c: char| c.is_ascii_uppercase() || c.is_ascii_digit())
            && id
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '-');
        if valid {
            Ok(CriterionId(id))
        } else {
            Err(CorpusError::Catalog(format!("invalid criterion id {id:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CriterionId {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        CriterionId::new(s)
    }
}

impl From<CriterionId> for String {
    fn from(id: CriterionId) -> String {
        id.0
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which wording of the criteria a catalog carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CatalogVariant {
    /// Definitions as released with the benchmark.
    Original,
    /// Hand-crafted clarifications used by the zero-shot baseline.
    Redefined,
    /// `Criteria:` / `Explanation:` texts produced by augmentation.
    Augmented,
}

impl CatalogVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CatalogVariant::Original => "original",
            CatalogVariant::Redefined => "redefined",
            CatalogVariant::Augmented => "augmented",
        }
    }
}

impl std::str::FromStr for CatalogVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(CatalogVariant::Original),
            "redefined" => Ok(CatalogVariant::Redefined),
            "augmented" => Ok(CatalogVariant::Augmented),
            other => Err(format!("unknown catalog variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: CriterionId,
    pub definition: String,
    pub variant: CatalogVariant,
}

/// Ordered set of criteria sharing one variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriteriaCatalog {
    variant: CatalogVariant,
    criteria: Vec<Criterion>,
}

#[derive(Deserialize)]
struct CatalogEntry {
    id: String,
    definition: String,
}

impl CriteriaCatalog {
    pub fn new(variant: CatalogVariant, criteria: Vec<Criterion>) -> Result<Self, CorpusError> {
        if criteria.is_empty() {
            return Err(CorpusError::Catalog("catalog is empty".into()));
        }
        let mut seen = HashSet::new();
        for c in &criteria {
            if !seen.insert(c.id.clone()) {
                return Err(CorpusError::Catalog(format!("duplicate criterion id {}", c.id)));
            }
            if c.definition.trim().is_empty() {
                return Err(CorpusError::Catalog(format!("criterion {} has an empty definition", c.id)));
            }
        }
        Ok(CriteriaCatalog { variant, criteria })
    }

    /// Parses a JSON array of `{id, definition}` objects.
    pub fn from_json(json: &str, variant: CatalogVariant) -> Result<Self, CorpusError> {
        let entries: Vec<CatalogEntry> = serde_json::from_str(json)
            .map_err(|e| CorpusError::Catalog(format!("invalid catalog JSON: {e}")))?;
        let criteria = entries
            .into_iter()
            .map(|e| {
                Ok(Criterion {
                    id: CriterionId::new(e.id)?,
                    definition: e.definition,
                    variant,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        CriteriaCatalog::new(variant, criteria)
    }

    pub fn variant(&self) -> CatalogVariant {
        self.variant
    }

    pub fn criteria(&self) -> &[Criterion] {
        &self.criteria
    }

    pub fn len(&self) -> usize {
        self.criteria.len()
    }

    pub fn is_empty(&self) -> bool {
        self.criteria.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &CriterionId> {
        self.criteria.iter().map(|c| &c.id)
    }

    pub fn get(&self, id: &CriterionId) -> Option<&Criterion> {
        self.criteria.iter().find(|c| &c.id == id)
    }

    pub fn contains(&self, id: &CriterionId) -> bool {
        self.get(id).is_some()
    }

    /// Keeps only the given ids, in catalog order.
    pub fn restrict(&self, ids: &[CriterionId]) -> Result<Self, CorpusError> {
        for id in ids {
            if !self.contains(id) {
                return Err(CorpusError::Catalog(format!("criterion {id} not in catalog")));
            }
        }
        let criteria = self.criteria.iter().filter(|c| ids.contains(&c.id)).cloned().collect();
        CriteriaCatalog::new(self.variant, criteria)
    }
}

pub fn load_criteria_catalog(path: &Path, variant: CatalogVariant) -> Result<CriteriaCatalog, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CriteriaCatalog::from_json(&text, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_id_rules() {
        assert!(CriterionId::new("MI-6MOS").is_ok());
        assert!(CriterionId::new("HBA1C").is_ok());
        assert!(CriterionId::new("hba1c").is_err());
        assert!(CriterionId::new("-X").is_err());
        assert!(CriterionId::new("").is_err());
        assert!(CriterionId::new("A B").is_err());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let json = r#"[{"id":"HBA1C","definition":"a"},{"id":"HBA1C","definition":"b"}]"#;
        let err = CriteriaCatalog::from_json(json, CatalogVariant::Original).unwrap_err();
        assert!(matches!(err, CorpusError::Catalog(ref m) if m.contains("HBA1C")), "{err}");
    }

    #[test]
    fn empty_array_is_rejected() {
        assert!(matches!(
            CriteriaCatalog::from_json("[]", CatalogVariant::Original),
            Err(CorpusError::Catalog(_))
        ));
    }

    #[test]
    fn order_is_preserved() {
        let json = r#"[{"id":"B","definition":"b"},{"id":"A","definition":"a"}]"#;
        let cat = CriteriaCatalog::from_json(json, CatalogVariant::Redefined).unwrap();
        let ids: Vec<_> = cat.ids().map(|i| i.as_str()).collect();
        assert_eq!(ids, ["B", "A"]);
        assert!(cat.criteria().iter().all(|c| c.variant == CatalogVariant::Redefined));
    }
}
