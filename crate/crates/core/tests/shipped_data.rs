use std::collections::BTreeMap;
use std::path::PathBuf;

use maka_core::corpus::{
    corpus_stats, load_corpus, load_criteria_catalog, CatalogVariant, CriterionId, EligibilityLabel, GoldLabels,
};
use maka_core::evaluation::{gold_counts, synthesize_trial, trial_eligibility, EvaluationError, GoldSet};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn catalog(variant: CatalogVariant) -> maka_core::CriteriaCatalog {
    load_criteria_catalog(&root().join(format!("data/criteria_{}.json", variant.as_str())), variant).unwrap()
}

/// Reads the per-patient label table: `patient_id` followed by one column
/// per criterion holding `met` or `not met`.
fn cohort_gold() -> GoldSet {
    let text = std::fs::read_to_string(root().join("fixtures/cohort_labels.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let labels = header[1..]
                .iter()
                .zip(&cells[1..])
                .map(|(id, v)| {
                    let label = match *v {
                        "met" => EligibilityLabel::Met,
                        "not met" => EligibilityLabel::NotMet,
                        other => panic!("bad label {other}"),
                    };
                    (CriterionId::new(*id).unwrap(), label)
                })
                .collect();
            (cells[0].to_string(), GoldLabels::from_map(labels))
        })
        .collect()
}

const TABLE3: [(&str, usize, usize); 13] = [
    ("ABDOMINAL", 107, 181),
    ("ADVANCED-CAD", 170, 118),
    ("ALCOHOL-ABUSE", 10, 278),
    ("ASP-FOR-MI", 230, 58),
    ("CREATININE", 106, 182),
    ("DIETSUPP-2MOS", 149, 139),
    ("DRUG-ABUSE", 15, 273),
    ("ENGLISH", 265, 23),
    ("HBA1C", 102, 186),
    ("KETO-1YR", 1, 287),
    ("MAJOR-DIABETES", 156, 132),
    ("MAKES-DECISIONS", 277, 11),
    ("MI-6MOS", 26, 262),
];

#[test]
fn every_catalog_has_thirteen_criteria_in_the_same_order() {
    let original = catalog(CatalogVariant::Original);
    for variant in [CatalogVariant::Original, CatalogVariant::Redefined, CatalogVariant::Augmented] {
        let c = catalog(variant);
        assert_eq!(c.len(), 13);
        assert!(c.ids().eq(original.ids()));
        assert!(c.criteria().iter().all(|x| x.variant == variant));
    }
    assert_eq!(original.criteria()[0].id.as_str(), "ABDOMINAL");
}

#[test]
fn augmented_entries_have_both_sections() {
    for c in catalog(CatalogVariant::Augmented).criteria() {
        assert!(c.definition.contains("Criteria:"), "{}", c.id);
        assert!(c.definition.contains("Explanation:"), "{}", c.id);
    }
}

#[test]
fn known_definitions() {
    let english = CriterionId::new("ENGLISH").unwrap();
    assert_eq!(catalog(CatalogVariant::Original).get(&english).unwrap().definition, "Patient must speak English.");
    let creat = CriterionId::new("CREATININE").unwrap();
    assert!(catalog(CatalogVariant::Augmented)
        .get(&creat)
        .unwrap()
        .definition
        .contains("Normal levels vary by age and gender"));
}

#[test]
fn mini_corpus_loads() {
    let cat = catalog(CatalogVariant::Original);
    let corpus = load_corpus(&root().join("fixtures/mini"), &cat).unwrap();
    let ids: Vec<_> = corpus.patients().iter().map(|p| p.record.patient_id.as_str()).collect();
    assert_eq!(ids, ["100", "101", "102"]);
    let notes: Vec<_> = corpus.patients().iter().map(|p| p.record.notes.len()).collect();
    assert_eq!(notes, [2, 3, 2]);
    let stats = corpus_stats(&corpus, &cat).unwrap();
    assert_eq!(stats.patient_count, 3);
    assert_eq!(stats.pair_count, 39);

    let met = |p: &str| -> Vec<String> {
        corpus.get(p).unwrap().gold.iter().filter(|(_, l)| l.is_met()).map(|(c, _)| c.to_string()).collect()
    };
    assert_eq!(met("101"), ["ABDOMINAL", "DIETSUPP-2MOS", "ENGLISH", "MAKES-DECISIONS"]);
    assert_eq!(met("102"), ["ALCOHOL-ABUSE", "DRUG-ABUSE", "KETO-1YR", "MAKES-DECISIONS"]);
    for p in corpus.patients() {
        let joined: String = p.record.notes.iter().map(|n| n.text.as_str()).collect();
        assert_eq!(joined, p.record.raw_text);
        assert!(p.record.notes.iter().all(|n| n.record_date.is_some()));
    }
    assert_eq!(corpus.digest(), load_corpus(&root().join("fixtures/mini"), &cat).unwrap().digest());
}

#[test]
fn label_table_reproduces_published_counts() {
    let gold = cohort_gold();
    assert_eq!(gold.len(), 288);
    let counts = gold_counts(&gold, &catalog(CatalogVariant::Original)).unwrap();
    let got: Vec<_> = counts.iter().map(|(id, m, n)| (id.to_string(), *m, *n)).collect();
    let want: Vec<_> = TABLE3.iter().map(|(id, m, n)| (id.to_string(), *m, *n)).collect();
    assert_eq!(got, want);
}

#[test]
fn trial_synthesis_on_published_counts() {
    let gold = cohort_gold();
    let cat = catalog(CatalogVariant::Original);
    let names = |t: usize| -> Vec<String> {
        synthesize_trial(&gold, &cat, t).unwrap().selected.iter().map(|c| c.to_string()).collect()
    };
    assert_eq!(
        names(100),
        [
            "ABDOMINAL",
            "ADVANCED-CAD",
            "ASP-FOR-MI",
            "CREATININE",
            "DIETSUPP-2MOS",
            "ENGLISH",
            "HBA1C",
            "MAJOR-DIABETES",
            "MAKES-DECISIONS"
        ]
    );
    assert_eq!(names(200), ["ASP-FOR-MI", "ENGLISH", "MAKES-DECISIONS"]);
    assert_eq!(
        synthesize_trial(&gold, &cat, 300),
        Err(EvaluationError::EmptyTrial { threshold: 300, max_count: 277 })
    );

    let spec = synthesize_trial(&gold, &cat, 100).unwrap();
    let eligible = gold.iter().filter(|(p, l)| trial_eligibility(p, l.as_map(), &spec).unwrap()).count();
    // The fixture was laid out so the conjunction holds for 28 patients.
    assert_eq!(eligible, 28);
    let all: BTreeMap<_, _> = cat.ids().map(|c| (c.clone(), EligibilityLabel::Met)).collect();
    assert!(trial_eligibility("any", &all, &spec).unwrap());
}

#[test]
fn shipped_creatinine_augmentation_keeps_redefined_wording() {
    use maka_core::agents::{parse_sections, retains_verbatim};
    let id = CriterionId::new("CREATININE").unwrap();
    let augmented = catalog(CatalogVariant::Augmented).get(&id).unwrap().definition.clone();
    let (line, _) = parse_sections(&augmented).unwrap();
    let redefined = catalog(CatalogVariant::Redefined).get(&id).unwrap().definition.clone();
    assert!(retains_verbatim(&redefined, &line), "{redefined} / {line}");
    let original = catalog(CatalogVariant::Original).get(&id).unwrap().definition.clone();
    assert!(!retains_verbatim(&original, &line));
}
