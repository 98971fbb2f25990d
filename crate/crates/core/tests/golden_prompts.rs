mod common;

use std::fs;

use common::{exemplar_prompt, fixture, golden_name};
use tabicl::prompt::{label_leaks, PromptFormat};

fn rendered(format: PromptFormat) -> String {
    serde_json::to_string_pretty(&exemplar_prompt(format)).unwrap() + "\n"
}

#[test]
fn twelve_exemplars_match_fixtures() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let formats = PromptFormat::all();
    assert_eq!(formats.len(), 12);
    for format in formats {
        let path = fixture(&golden_name(format));
        let text = rendered(format);
        if update {
            fs::write(&path, &text).unwrap();
            continue;
        }
        let golden = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, golden, "{format}");
    }
}

#[test]
fn exemplars_do_not_leak() {
    for format in PromptFormat::all() {
        let p = exemplar_prompt(format);
        assert!(!label_leaks(&p.messages), "{format}");
    }
}

#[test]
fn tabular_few_exemplar_layout() {
    let p = exemplar_prompt("tabular-few-standard".parse().unwrap());
    let user = &p.messages[1].content;
    let grid: Vec<&str> = user.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(
        grid,
        [
            "| age | sex | education | apoe4 | abeta | tau | ptau | hippocampus | mmse | diagnosis |",
            "| 78.1 | M | 12 | 2 | 612.9 | 371 | 36.2 | 5820.5 | 22 | 1 |",
            "| 69.3 | F | 13 | 0 | 1210.8 | 205 | 18.9 | 7620.4 | 29 | 0 |",
            "| 77.4 | F | 12 | 1 | 720.6 | 330.4 | 31 | 6120.8 | 23 | 1 |",
            "| 68.8 | M | 15 | 0 | 1150 | 215.9 | NaN | 7505.1 | 30 | ? |",
        ]
    );
    assert!(user.ends_with("Answer with a single digit: 0 for CN or 1 for AD."));
}

#[test]
fn serialized_few_exemplar_layout() {
    let p = exemplar_prompt("serialized-few-standard".parse().unwrap());
    let user = &p.messages[1].content;
    let target = user.lines().find(|l| l.starts_with("Target patient: ")).unwrap();
    assert!(target.contains("He is 68.8 years old."), "{target}");
    assert!(target.contains("CSF phosphorylated tau is NaN"), "{target}");
    assert_eq!(user.lines().filter(|l| l.starts_with("Example ")).count(), 3);
    assert!(user.contains("Example 1: ") && user.contains("Diagnosis: AD"));
}
