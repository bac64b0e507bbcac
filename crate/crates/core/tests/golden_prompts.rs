use std::collections::BTreeMap;
use std::path::PathBuf;

use maka_core::agents::{PromptSet, Stage, TemplateName};
use maka_core::gateway::{ChatMessage, ChatRequest};

fn vars() -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("criterion_id", "HBA1C".to_string()),
        ("criterion_definition", "Any hemoglobin A1c (HbA1c) value between 6.5% and 9.5%.".to_string()),
        ("rationale", "lacks normal ranges".to_string()),
        ("snippets", "[hba1c-01] (reference) HbA1c reflects average glucose over about three months.".to_string()),
        ("feedback", String::new()),
        ("criteria_line", "Any hemoglobin A1c (HbA1c) value between 6.5% and 9.5%.".to_string()),
        ("explanation", "Values are reported as a percentage of glycated hemoglobin.".to_string()),
        ("notes", "Record date: 2090-01-01\nHbA1c 7.1% today.".to_string()),
        ("expected_format", "DECISION: MET\nor\nDECISION: NOT MET".to_string()),
    ])
}

fn golden(name: TemplateName) -> String {
    let stem = name.file_name().trim_end_matches(".txt");
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts").join(format!("{stem}.txt"));
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn rendered_prompts_match_golden_files() {
    let prompts = PromptSet::default();
    for name in TemplateName::ALL {
        let (system, user) = prompts.render(name, &vars());
        assert_eq!(format!("{system}\n---\n{user}\n"), golden(name), "{}", name.file_name());
    }
}

#[test]
fn stage_is_recovered_from_system_prompt() {
    let prompts = PromptSet::default();
    let expected = [
        (TemplateName::Probe, Stage::Probe),
        (TemplateName::Navigate, Stage::Navigate),
        (TemplateName::SelfAugment, Stage::Augment),
        (TemplateName::RetrievalAugment, Stage::Augment),
        (TemplateName::SearchAugment, Stage::Augment),
        (TemplateName::Supervise, Stage::Supervise),
        (TemplateName::MatchZeroShot, Stage::Match),
        (TemplateName::MatchCot, Stage::Match),
    ];
    for (name, stage) in expected {
        let (system, user) = prompts.render(name, &vars());
        let req = ChatRequest::new("m", vec![ChatMessage::system(system), ChatMessage::user(user)]);
        assert_eq!(prompts.stage_of(&req), Some(stage), "{}", name.file_name());
    }
}

#[test]
fn directory_overrides_single_templates() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("probe.txt"), "[system]\nCustom probe.\n[user]\nCheck {criterion_id}.\n").unwrap();
    let prompts = PromptSet::load_dir(dir.path()).unwrap();
    assert_eq!(prompts.render(TemplateName::Probe, &vars()), ("Custom probe.".to_string(), "Check HBA1C.".to_string()));
    assert_eq!(prompts.get(TemplateName::Navigate), PromptSet::default().get(TemplateName::Navigate));

    std::fs::write(dir.path().join("navigate.txt"), "[system]\nx\n[user]\n{patient_name}\n").unwrap();
    assert!(PromptSet::load_dir(dir.path()).is_err());
}
