mod common;

use std::collections::HashMap;
use std::fs;

use serde::Deserialize;
use tabicl::inference::constrained_binary_decode;
use tabicl::metrics::{confusion, metrics};
use tabicl::record::PredictionRecord;

#[derive(Deserialize)]
struct Case {
    text: String,
    expected: Option<u8>,
}

fn corpus() -> Vec<Case> {
    serde_json::from_str(&fs::read_to_string(common::fixture("decode_corpus.json")).unwrap()).unwrap()
}

#[test]
fn corpus_resolves_in_rule_order() {
    let cases = corpus();
    assert_eq!(cases.len(), 50);
    for c in &cases {
        assert_eq!(constrained_binary_decode(&common::raw(&c.text)).ok(), c.expected, "{:?}", c.text);
    }
}

#[test]
fn undecodable_scored_wrong_and_counted() {
    let cases = corpus();
    let fmt = "tabular-zero-standard".parse().unwrap();
    let mut truth = HashMap::new();
    let records: Vec<PredictionRecord> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let id = format!("t{i}");
            truth.insert(id.clone(), (i % 2) as u8);
            PredictionRecord {
                target_id: id,
                label: constrained_binary_decode(&common::raw(&c.text)).ok(),
                confidence: None,
                reasoning: None,
                raw_text: c.text.clone(),
                seed: 0,
                format: fmt,
                endpoint: "corpus".into(),
                round: 1,
            }
        })
        .collect();
    let cm = confusion(&records, &truth).unwrap();
    let undecodable = cases.iter().filter(|c| c.expected.is_none()).count();
    assert_eq!(cm.undecodable(), undecodable);
    assert_eq!(cm.total(), 50);
    let correct = records
        .iter()
        .filter(|r| r.label.is_some_and(|l| l == truth[&r.target_id]))
        .count();
    assert_eq!(cm.tp + cm.tn, correct);
    let positives = truth.values().filter(|y| **y == 1).count();
    let report = metrics(&cm);
    assert_eq!(report.undecodable, undecodable);
    assert!((report.recall.unwrap() - cm.tp as f64 / positives as f64).abs() < 1e-12);
}
