use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use maka_core::corpus::{CriterionId, EligibilityLabel};

/// Per-patient labels in the order of the table's columns.
pub struct LabelTable {
    pub criteria: Vec<CriterionId>,
    pub rows: Vec<(String, Vec<EligibilityLabel>)>,
}

impl LabelTable {
    pub fn met_counts(&self) -> BTreeMap<CriterionId, usize> {
        self.criteria
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), self.rows.iter().filter(|(_, l)| l[i].is_met()).count()))
            .collect()
    }
}

/// Reads `patient_id,<criterion>...` rows of `met` / `not met`.
pub fn read_label_table(path: &Path) -> LabelTable {
    let text = std::fs::read_to_string(path).expect("label table readable");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let criteria = header[1..].iter().map(|c| CriterionId::new(*c).expect("valid id")).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let labels = cells[1..]
                .iter()
                .map(|v| match *v {
                    "met" => EligibilityLabel::Met,
                    "not met" => EligibilityLabel::NotMet,
                    other => panic!("bad label {other:?}"),
                })
                .collect();
            (cells[0].to_string(), labels)
        })
        .collect();
    LabelTable { criteria, rows }
}

/// Writes one n2c2-shaped XML document per row into `dir`, each with two
/// short dated notes.
pub fn materialize_corpus(table: &LabelTable, dir: &Path) {
    std::fs::create_dir_all(dir).expect("create corpus dir");
    for (i, (patient, labels)) in table.rows.iter().enumerate() {
        let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\" ?>\n<PatientMatching>\n<TEXT><![CDATA[\n");
        let _ = write!(
            xml,
            "Record date: 2090-{:02}-01\nPatient {patient} seen in clinic.\n\nRecord date: 2091-{:02}-15\nFollow-up visit, stable.\n",
            1 + i % 12,
            1 + (i + 5) % 12
        );
        xml.push_str("]]></TEXT>\n<TAGS>\n");
        for (c, l) in table.criteria.iter().zip(labels) {
            let value = if l.is_met() { "met" } else { "not met" };
            let _ = writeln!(xml, "<{c} met=\"{value}\" />");
        }
        xml.push_str("</TAGS>\n</PatientMatching>\n");
        std::fs::write(dir.join(format!("{patient}.xml")), xml).expect("write document");
    }
}
