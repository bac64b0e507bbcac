//! Criterion-level and trial-level scoring. Met is the positive class.
//! Precision, recall and F1 can be undefined; undefined entries are skipped
//! when averaging and rendered as `-`.

mod render;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::agents::MatchDecision;
use crate::corpus::{CriteriaCatalog, CriterionId, EligibilityLabel, GoldLabels};

pub use render::{render_comparison_markdown, render_csv, render_json, render_trial_markdown};

pub const DEFAULT_TRIAL_THRESHOLD: usize = 100;

/// Gold labels keyed by patient id.
pub type GoldSet = BTreeMap<String, GoldLabels>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvaluationError {
    #[error("no decision for patient {patient_id}, criterion {criterion_id}")]
    IncompleteDecisions { patient_id: String, criterion_id: CriterionId },
    #[error("no gold label for patient {patient_id}, criterion {criterion_id}")]
    IncompleteGold { patient_id: String, criterion_id: CriterionId },
    #[error("two decisions for patient {patient_id}, criterion {criterion_id}")]
    DuplicateDecision { patient_id: String, criterion_id: CriterionId },
    #[error("decision for unknown patient {0}")]
    UnknownPatient(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("nothing to average")]
    EmptyReport,
    #[error("no criterion has at least {threshold} met patients (largest count is {max_count})")]
    EmptyTrial { threshold: usize, max_count: usize },
    #[error("trial threshold must be positive")]
    InvalidThreshold,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub selected: Vec<CriterionId>,
    pub threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion_id: CriterionId,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub gold_met: usize,
    pub gold_not_met: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub spec: TrialSpec,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub gold_eligible: usize,
    pub predicted_eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Catalog order.
    pub per_criterion: Vec<CriterionReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<TrialReport>,
}

type DecisionIndex<'a> = HashMap<(&'a str, &'a CriterionId), EligibilityLabel>;

fn index_decisions<'a>(decisions: &'a [MatchDecision], gold: &GoldSet) -> Result<DecisionIndex<'a>, EvaluationError> {
    let mut index = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if !gold.contains_key(&d.patient_id) {
            return Err(EvaluationError::UnknownPatient(d.patient_id.clone()));
        }
        if index.insert((d.patient_id.as_str(), &d.criterion_id), d.label).is_some() {
            return Err(EvaluationError::DuplicateDecision {
                patient_id: d.patient_id.clone(),
                criterion_id: d.criterion_id.clone(),
            });
        }
    }
    Ok(index)
}

fn gold_label(gold: &GoldLabels, patient_id: &str, criterion: &CriterionId) -> Result<EligibilityLabel, EvaluationError> {
    gold.get(criterion).ok_or_else(|| EvaluationError::IncompleteGold {
        patient_id: patient_id.to_string(),
        criterion_id: criterion.clone(),
    })
}

fn confusion_indexed(index: &DecisionIndex<'_>, gold: &GoldSet, criterion: &CriterionId) -> Result<ConfusionMatrix, EvaluationError> {
    let mut cm = ConfusionMatrix::default();
    for (patient_id, labels) in gold {
        let predicted = index.get(&(patient_id.as_str(), criterion)).ok_or_else(|| {
            EvaluationError::IncompleteDecisions { patient_id: patient_id.clone(), criterion_id: criterion.clone() }
        })?;
        cm.record(predicted.is_met(), gold_label(labels, patient_id, criterion)?.is_met());
    }
    Ok(cm)
}

/// Confusion counts for one criterion over every patient in `gold`.
/// Decisions for other criteria are ignored.
pub fn confusion(decisions: &[MatchDecision], gold: &GoldSet, criterion: &CriterionId) -> Result<ConfusionMatrix, EvaluationError> {
    confusion_indexed(&index_decisions(decisions, gold)?, gold, criterion)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metric_set(cm: &ConfusionMatrix) -> Result<MetricSet, EvaluationError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvaluationError::EmptyMatrix);
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricSet { accuracy: (cm.tp + cm.tn) as f64 / total as f64, precision, recall, f1 })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-metric mean over the entries where that metric is defined.
pub fn macro_average(sets: &[MetricSet]) -> Result<MetricSet, EvaluationError> {
    if sets.is_empty() {
        return Err(EvaluationError::EmptyReport);
    }
    Ok(MetricSet {
        accuracy: sets.iter().map(|m| m.accuracy).sum::<f64>() / sets.len() as f64,
        precision: mean_defined(sets.iter().map(|m| m.precision)),
        recall: mean_defined(sets.iter().map(|m| m.recall)),
        f1: mean_defined(sets.iter().map(|m| m.f1)),
    })
}

/// Gold (met, not met) counts per criterion, in catalog order.
pub fn gold_counts(gold: &GoldSet, catalog: &CriteriaCatalog) -> Result<Vec<(CriterionId, usize, usize)>, EvaluationError> {
    catalog
        .ids()
        .map(|id| {
            let mut met = 0;
            for (patient_id, labels) in gold {
                if gold_label(labels, patient_id, id)?.is_met() {
                    met += 1;
                }
            }
            Ok((id.clone(), met, gold.len() - met))
        })
        .collect()
}

/// Selects, in catalog order, every criterion met by at least `threshold`
/// gold patients.
pub fn synthesize_trial(gold: &GoldSet, catalog: &CriteriaCatalog, threshold: usize) -> Result<TrialSpec, EvaluationError> {
    if threshold == 0 {
        return Err(EvaluationError::InvalidThreshold);
    }
    let counts = gold_counts(gold, catalog)?;
    let selected: Vec<CriterionId> =
        counts.iter().filter(|(_, met, _)| *met >= threshold).map(|(id, _, _)| id.clone()).collect();
    if selected.is_empty() {
        let max_count = counts.iter().map(|(_, met, _)| *met).max().unwrap_or(0);
        return Err(EvaluationError::EmptyTrial { threshold, max_count });
    }
    Ok(TrialSpec { selected, threshold })
}

/// True iff every selected criterion is met. `patient_id` only labels errors.
pub fn trial_eligibility(
    patient_id: &str,
    labels: &BTreeMap<CriterionId, EligibilityLabel>,
    spec: &TrialSpec,
) -> Result<bool, EvaluationError> {
    let mut eligible = true;
    for id in &spec.selected {
        let label = labels.get(id).ok_or_else(|| EvaluationError::IncompleteDecisions {
            patient_id: patient_id.to_string(),
            criterion_id: id.clone(),
        })?;
        eligible &= label.is_met();
    }
    Ok(eligible)
}

/// Predicted labels per patient, restricted to `ids`.
fn predicted_labels(
    index: &DecisionIndex<'_>,
    patient_id: &str,
    ids: &[CriterionId],
) -> BTreeMap<CriterionId, EligibilityLabel> {
    ids.iter().filter_map(|id| index.get(&(patient_id, id)).map(|l| (id.clone(), *l))).collect()
}

pub fn evaluate(
    decisions: &[MatchDecision],
    gold: &GoldSet,
    catalog: &CriteriaCatalog,
    trial_threshold: Option<usize>,
) -> Result<EvaluationReport, EvaluationError> {
    let index = index_decisions(decisions, gold)?;
    let counts = gold_counts(gold, catalog)?;
    let mut per_criterion = Vec::with_capacity(catalog.len());
    for (id, gold_met, gold_not_met) in counts {
        let confusion = confusion_indexed(&index, gold, &id)?;
        let metrics = metric_set(&confusion)?;
        per_criterion.push(CriterionReport { criterion_id: id, confusion, metrics, gold_met, gold_not_met });
    }
    let macro_avg = macro_average(&per_criterion.iter().map(|c| c.metrics).collect::<Vec<_>>())?;

    let trial = match trial_threshold {
        None => None,
        Some(threshold) => {
            let spec = synthesize_trial(gold, catalog, threshold)?;
            let mut confusion = ConfusionMatrix::default();
            for (patient_id, labels) in gold {
                let truth = trial_eligibility(patient_id, labels.as_map(), &spec)?;
                let predicted = trial_eligibility(patient_id, &predicted_labels(&index, patient_id, &spec.selected), &spec)?;
                confusion.record(predicted, truth);
            }
            let metrics = metric_set(&confusion)?;
            Some(TrialReport {
                gold_eligible: (confusion.tp + confusion.fn_) as usize,
                predicted_eligible: (confusion.tp + confusion.fp) as usize,
                spec,
                confusion,
                metrics,
            })
        }
    };
    Ok(EvaluationReport { per_criterion, macro_avg, trial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CatalogVariant, Criterion};
    use crate::digest::Digest;
    use proptest::prelude::*;

    fn cm(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    fn id(s: &str) -> CriterionId {
        CriterionId::new(s).unwrap()
    }

    fn catalog(ids: &[&str]) -> CriteriaCatalog {
        let criteria = ids
            .iter()
            .map(|i| Criterion { id: id(i), definition: format!("{i} definition"), variant: CatalogVariant::Original })
            .collect();
        CriteriaCatalog::new(CatalogVariant::Original, criteria).unwrap()
    }

    fn label(met: bool) -> EligibilityLabel {
        if met {
            EligibilityLabel::Met
        } else {
            EligibilityLabel::NotMet
        }
    }

    fn gold_from(rows: &[(&str, &[(&str, bool)])]) -> GoldSet {
        rows.iter()
            .map(|(p, labels)| {
                let map = labels.iter().map(|(c, m)| (id(c), label(*m))).collect();
                (p.to_string(), GoldLabels::from_map(map))
            })
            .collect()
    }

    fn decision(patient: &str, criterion: &str, met: bool) -> MatchDecision {
        MatchDecision {
            patient_id: patient.into(),
            criterion_id: id(criterion),
            label: label(met),
            rationale: String::new(),
            parse_ok: true,
            transcript_digest: Digest::of_bytes(b"x"),
        }
    }

    fn ten_patients() -> (GoldSet, Vec<bool>) {
        let truth: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let gold = truth
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("p{i}"), GoldLabels::from_map(BTreeMap::from([(id("ENGLISH"), label(*m))]))))
            .collect();
        (gold, truth)
    }

    #[test]
    fn perfect_and_inverted() {
        let (gold, truth) = ten_patients();
        let same: Vec<_> = truth.iter().enumerate().map(|(i, m)| decision(&format!("p{i}"), "ENGLISH", *m)).collect();
        assert_eq!(confusion(&same, &gold, &id("ENGLISH")).unwrap(), cm(4, 0, 0, 6));
        let inv: Vec<_> = truth.iter().enumerate().map(|(i, m)| decision(&format!("p{i}"), "ENGLISH", !*m)).collect();
        assert_eq!(confusion(&inv, &gold, &id("ENGLISH")).unwrap(), cm(0, 6, 4, 0));
    }

    #[test]
    fn missing_decision_is_an_error() {
        let (gold, truth) = ten_patients();
        let partial: Vec<_> =
            truth.iter().enumerate().skip(1).map(|(i, m)| decision(&format!("p{i}"), "ENGLISH", *m)).collect();
        assert_eq!(
            confusion(&partial, &gold, &id("ENGLISH")),
            Err(EvaluationError::IncompleteDecisions { patient_id: "p0".into(), criterion_id: id("ENGLISH") })
        );
    }

    #[test]
    fn duplicate_and_unknown_decisions_rejected() {
        let (gold, _) = ten_patients();
        let dup = vec![decision("p0", "ENGLISH", true), decision("p0", "ENGLISH", false)];
        assert!(matches!(confusion(&dup, &gold, &id("ENGLISH")), Err(EvaluationError::DuplicateDecision { .. })));
        let unknown = vec![decision("zz", "ENGLISH", true)];
        assert_eq!(confusion(&unknown, &gold, &id("ENGLISH")), Err(EvaluationError::UnknownPatient("zz".into())));
    }

    #[test]
    fn formula_values() {
        let m = metric_set(&cm(3, 1, 2, 4)).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-9);
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-9);
        assert!((m.recall.unwrap() - 0.6).abs() < 1e-9);
        assert!((m.f1.unwrap() - 0.6666666666666666).abs() < 1e-9);
    }

    #[test]
    fn undefined_precision_and_f1() {
        let m = metric_set(&cm(0, 0, 1, 287)).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
        assert!((m.accuracy - 287.0 / 288.0).abs() < 1e-12);
    }

    #[test]
    fn zero_precision_and_recall_leaves_f1_undefined() {
        let m = metric_set(&cm(0, 3, 2, 5)).unwrap();
        assert_eq!(m.precision, Some(0.0));
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
    }

    #[test]
    fn all_correct_is_one() {
        let m = metric_set(&cm(5, 0, 0, 7)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(metric_set(&cm(0, 0, 0, 0)), Err(EvaluationError::EmptyMatrix));
    }

    #[test]
    fn macro_skips_undefined() {
        let ms = |a, p| MetricSet { accuracy: a, precision: p, recall: None, f1: None };
        let avg = macro_average(&[ms(0.8, Some(0.5)), ms(1.0, None), ms(0.9, Some(1.0))]).unwrap();
        assert!((avg.accuracy - 0.9).abs() < 1e-12);
        assert!((avg.precision.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(avg.f1, None);
        let two = macro_average(&[ms(0.8, None), ms(1.0, None)]).unwrap();
        assert!((two.accuracy - 0.9).abs() < 1e-12);
        assert_eq!(macro_average(&[]), Err(EvaluationError::EmptyReport));
    }

    #[test]
    fn trial_selection_and_conjunction() {
        let cat = catalog(&["ABDOMINAL", "ENGLISH", "HBA1C"]);
        let gold = gold_from(&[
            ("a", &[("ABDOMINAL", true), ("ENGLISH", true), ("HBA1C", false)]),
            ("b", &[("ABDOMINAL", false), ("ENGLISH", true), ("HBA1C", false)]),
            ("c", &[("ABDOMINAL", true), ("ENGLISH", true), ("HBA1C", true)]),
        ]);
        let spec = synthesize_trial(&gold, &cat, 2).unwrap();
        assert_eq!(spec.selected, vec![id("ABDOMINAL"), id("ENGLISH")]);
        assert_eq!(synthesize_trial(&gold, &cat, 3).unwrap().selected, vec![id("ENGLISH")]);
        assert_eq!(synthesize_trial(&gold, &cat, 4), Err(EvaluationError::EmptyTrial { threshold: 4, max_count: 3 }));
        assert_eq!(synthesize_trial(&gold, &cat, 0), Err(EvaluationError::InvalidThreshold));
        assert!(trial_eligibility("a", gold["a"].as_map(), &spec).unwrap());
        assert!(!trial_eligibility("b", gold["b"].as_map(), &spec).unwrap());
        let empty = BTreeMap::new();
        assert!(matches!(trial_eligibility("x", &empty, &spec), Err(EvaluationError::IncompleteDecisions { .. })));
    }

    #[test]
    fn perfect_predictor_report() {
        let cat = catalog(&["ABDOMINAL", "ENGLISH"]);
        let gold = gold_from(&[
            ("a", &[("ABDOMINAL", true), ("ENGLISH", true)]),
            ("b", &[("ABDOMINAL", false), ("ENGLISH", true)]),
            ("c", &[("ABDOMINAL", true), ("ENGLISH", false)]),
        ]);
        let decisions: Vec<_> = gold
            .iter()
            .flat_map(|(p, l)| l.iter().map(|(c, lab)| decision(p, c.as_str(), lab.is_met())).collect::<Vec<_>>())
            .collect();
        let report = evaluate(&decisions, &gold, &cat, Some(2)).unwrap();
        for c in &report.per_criterion {
            assert_eq!(c.metrics, MetricSet { accuracy: 1.0, precision: Some(1.0), recall: Some(1.0), f1: Some(1.0) });
        }
        let trial = report.trial.unwrap();
        assert_eq!(trial.metrics.accuracy, 1.0);
        assert_eq!(trial.metrics.f1, Some(1.0));
        assert_eq!(trial.gold_eligible, 1);
    }

    #[test]
    fn single_criterion_report_is_the_composition() {
        let (gold, truth) = ten_patients();
        let cat = catalog(&["ENGLISH"]);
        let decisions: Vec<_> =
            truth.iter().enumerate().map(|(i, m)| decision(&format!("p{i}"), "ENGLISH", i % 3 == 0 || *m && i != 1)).collect();
        let report = evaluate(&decisions, &gold, &cat, None).unwrap();
        let expected = metric_set(&confusion(&decisions, &gold, &id("ENGLISH")).unwrap()).unwrap();
        assert_eq!(report.per_criterion[0].metrics, expected);
        assert_eq!(report.macro_avg, expected);
        assert!(report.trial.is_none());
    }

    proptest! {
        #[test]
        fn shuffling_decisions_changes_nothing(seed in any::<u64>(), bits in proptest::collection::vec(any::<(bool, bool)>(), 12)) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cat = catalog(&["ABDOMINAL", "ENGLISH"]);
            let gold: GoldSet = (0..6).map(|p| {
                let (a, e) = bits[p];
                (format!("p{p}"), GoldLabels::from_map(BTreeMap::from([(id("ABDOMINAL"), label(a)), (id("ENGLISH"), label(e))])))
            }).collect();
            let mut decisions: Vec<_> = (0..6).flat_map(|p| {
                let (a, e) = bits[6 + p];
                [decision(&format!("p{p}"), "ABDOMINAL", a), decision(&format!("p{p}"), "ENGLISH", e)]
            }).collect();
            let before = evaluate(&decisions, &gold, &cat, Some(1));
            decisions.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, evaluate(&decisions, &gold, &cat, Some(1)));
        }

        #[test]
        fn raising_threshold_never_adds(met in proptest::collection::vec(0usize..20, 4), t in 1usize..20) {
            let ids = ["ABDOMINAL", "ENGLISH", "HBA1C", "KETO-1YR"];
            let cat = catalog(&ids);
            let gold: GoldSet = (0..20).map(|p| {
                let map = ids.iter().zip(&met).map(|(c, m)| (id(c), label(p < *m))).collect();
                (format!("p{p:02}"), GoldLabels::from_map(map))
            }).collect();
            let low = synthesize_trial(&gold, &cat, t).map(|s| s.selected).unwrap_or_default();
            let high = synthesize_trial(&gold, &cat, t + 1).map(|s| s.selected).unwrap_or_default();
            prop_assert!(high.iter().all(|c| low.contains(c)));
        }

        #[test]
        fn flipping_a_selected_criterion_breaks_eligibility(n in 1usize..6, flip in 0usize..6) {
            let ids: Vec<CriterionId> = ["ABDOMINAL", "ENGLISH", "HBA1C", "KETO-1YR", "CREATININE", "DRUG-ABUSE"][..n]
                .iter().map(|s| id(s)).collect();
            let spec = TrialSpec { selected: ids.clone(), threshold: 1 };
            let mut labels: BTreeMap<_, _> = ids.iter().map(|c| (c.clone(), EligibilityLabel::Met)).collect();
            prop_assert!(trial_eligibility("p", &labels, &spec).unwrap());
            labels.insert(ids[flip % n].clone(), EligibilityLabel::NotMet);
            prop_assert!(!trial_eligibility("p", &labels, &spec).unwrap());
        }
    }
}
