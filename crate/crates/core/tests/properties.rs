mod common;

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use tabicl::baseline::{logreg_gradient, logreg_objective, LogRegModel};
use tabicl::export::validate_jsonl;
use tabicl::inference::{constrained_binary_decode, extract_target_value};
use tabicl::interpret::parse_interpretable;
use statrs::statistics::Statistics;
use tabicl::metrics::{aggregate_seeds, metrics, ConfusionMatrix, METRIC_NAMES};
use tabicl::missing::{mask_count, mask_mcar, MaskPlan};
use tabicl::prompt::{label_leaks, LabelPosition, Message, PromptFormat, RenderedPrompt, Role};
use tabicl::runner::ExperimentManifest;
use tabicl::select::import_external_ranking;
use tabicl::split::{largest_remainder, make_splits, sample_context, ContextExample, Partition, SplitAssignment, SplitFractions};
use tabicl::synth::biomarker_cohort;
use tabicl::table::{load_table, Schema};

fn toy_schema() -> Schema {
    common::toy_table().schema()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn load_table_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = load_table(&bytes[..], &toy_schema());
    }

    #[test]
    fn load_table_csvish_never_panics(text in "[a-zA-Z0-9_,.\"\n -]{0,300}") {
        let header = "subject_id,age,sex,education,apoe4,abeta,tau,ptau,hippocampus,mmse,diagnosis\n";
        let _ = load_table(format!("{header}{text}").as_bytes(), &toy_schema());
    }

    #[test]
    fn schema_json_never_panics(text in "\\PC{0,200}") {
        let _ = Schema::from_json(&text);
    }

    #[test]
    fn ranking_import_never_panics(text in "[a-z_,0-9.\\-eE\n]{0,200}") {
        let _ = import_external_ranking(format!("feature,score\n{text}").as_bytes(), &common::toy_table());
    }

    #[test]
    fn jsonl_validation_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let r = validate_jsonl(&bytes[..]);
        prop_assert!(r.lines <= bytes.len() + 1);
    }

    #[test]
    fn decoders_never_panic(text in "\\PC{0,120}") {
        let raw = common::raw(&text);
        let _ = constrained_binary_decode(&raw);
        let _ = parse_interpretable(&raw);
    }

    #[test]
    fn structured_text_never_panics(text in "[{}\":,a-z0-9 .\\[\\]-]{0,120}") {
        let _ = parse_interpretable(&common::raw(&text));
        let _ = SplitAssignment::from_json(&text);
        let _ = MaskPlan::from_json(&text);
        let _ = ExperimentManifest::from_json(&text);
        let _ = ExperimentManifest::from_toml(&text);
        let _ = text.parse::<PromptFormat>();
    }

    #[test]
    fn mock_extraction_never_panics(body in "[|?a-z0-9 .=,:\n]{0,200}", feature in "[a-z]{1,6}") {
        let prompt = RenderedPrompt {
            messages: vec![Message::new(Role::User, body)],
            target_id: "t".into(),
            format: "tabular-zero-standard".parse().unwrap(),
            expected_label_position: LabelPosition::GridFinalCell,
        };
        let _ = extract_target_value(&prompt, &feature);
        let _ = label_leaks(&prompt.messages);
    }

    #[test]
    fn decoded_label_is_binary(text in "\\PC{0,80}") {
        if let Ok(l) = constrained_binary_decode(&common::raw(&text)) {
            prop_assert!(l <= 1);
        }
    }

    #[test]
    fn splits_partition_every_subject(n in 30usize..150, pos_share in 0.2f64..0.6, seed in any::<u64>()) {
        let n_pos = ((n as f64) * pos_share) as usize;
        let t = biomarker_cohort(n, n_pos, 1);
        let s = make_splits(&t, SplitFractions::default(), seed, true).unwrap();
        let mut seen = HashSet::new();
        for p in Partition::ALL {
            for id in s.ids(p) {
                prop_assert!(seen.insert(id.clone()), "duplicate {id}");
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes: Vec<usize> = Partition::ALL.iter().map(|p| s.ids(*p).len()).collect();
        prop_assert_eq!(sizes, largest_remainder(n, &SplitFractions::default().as_array()));
    }

    #[test]
    fn context_never_contains_target(seed in any::<u64>(), k in 0usize..10) {
        let pool: Vec<ContextExample> = (0..12)
            .map(|i| ContextExample { subject_id: format!("s{i}"), label: (i % 2) as u8 })
            .collect();
        let a = sample_context(&pool, k, seed, "t7", "pool_test").unwrap();
        let b = sample_context(&pool, k, seed, "t7", "pool_test").unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.examples.len(), k);
        let ids: HashSet<&str> = a.examples.iter().map(|e| e.subject_id.as_str()).collect();
        prop_assert_eq!(ids.len(), k);
        prop_assert!(sample_context(&pool, k, seed, "s3", "pool_test").is_err());
    }

    #[test]
    fn mcar_masks_exact_count(rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let t = biomarker_cohort(20, 8, 2);
        let (masked, plan) = mask_mcar(&t, rate, seed).unwrap();
        let eligible = t.len() * t.feature_indices().len();
        prop_assert_eq!(plan.cells.len(), mask_count(rate, eligible));
        let missing: usize = masked
            .rows()
            .iter()
            .map(|r| r.cells[masked.feature_indices()].iter().filter(|c| c.is_missing()).count())
            .sum();
        prop_assert_eq!(missing, plan.cells.len());
    }

    #[test]
    fn metrics_match_definitions(pairs in proptest::collection::vec((proptest::option::of(0u8..2), 0u8..2), 0..60)) {
        let cm = ConfusionMatrix::from_pairs(pairs.clone());
        let r = metrics(&cm);
        let count = |f: &dyn Fn(Option<u8>, u8) -> bool| pairs.iter().filter(|(p, y)| f(*p, *y)).count() as f64;
        let tp = count(&|p, y| p == Some(1) && y == 1);
        let pred_pos = count(&|p, _| p == Some(1));
        let pos = count(&|_, y| y == 1);
        let tn = count(&|p, y| p == Some(0) && y == 0);
        let neg = count(&|_, y| y == 0);
        let div = |a: f64, b: f64| (b > 0.0).then(|| a / b);
        prop_assert_eq!(r.precision, div(tp, pred_pos));
        prop_assert_eq!(r.recall, div(tp, pos));
        let ba = div(tp, pos).zip(div(tn, neg)).map(|(a, b)| (a + b) / 2.0);
        prop_assert_eq!(r.balanced_accuracy, ba);
        match (r.precision, r.recall) {
            (Some(p), Some(q)) => {
                let f1 = if p + q == 0.0 { 0.0 } else { 2.0 * p * q / (p + q) };
                prop_assert!((r.f1.unwrap() - f1).abs() < 1e-12);
            }
            _ => prop_assert_eq!(r.f1, None),
        }
    }

    #[test]
    fn gradient_matches_finite_differences(
        w in proptest::collection::vec(-2.0f64..2.0, 4),
        rows in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 3), 0u8..2), 2..20),
        l2 in 0.0f64..2.0,
    ) {
        let mut model = LogRegModel::zeros(3, l2);
        model.weights = w;
        let x: Vec<Vec<f64>> = rows.iter().map(|(r, _)| r.clone()).collect();
        let y: Vec<u8> = rows.iter().map(|(_, l)| *l).collect();
        let g = logreg_gradient(&model, &x, &y).unwrap();
        let h = 1e-5;
        for (j, &gj) in g.iter().enumerate().take(4) {
            let mut plus = model.clone();
            plus.weights[j] += h;
            let mut minus = model.clone();
            minus.weights[j] -= h;
            let fd = (logreg_objective(&plus, &x, &y).unwrap() - logreg_objective(&minus, &x, &y).unwrap()) / (2.0 * h);
            prop_assert!((gj - fd).abs() <= 1e-6 * fd.abs().max(1.0), "j={j} g={gj} fd={fd}");
        }
    }
}

#[test]
fn stratified_splits_keep_prevalence() {
    let t = biomarker_cohort(200, 60, 4);
    let labels: HashMap<String, u8> = t.rows().iter().map(|r| (r.subject_id.clone(), t.label(r).unwrap())).collect();
    for seed in 0..20 {
        let s = make_splits(&t, SplitFractions::default(), seed, true).unwrap();
        for p in Partition::ALL {
            let ids = s.ids(p);
            let pos = ids.iter().filter(|id| labels[*id] == 1).count() as f64;
            let expected = ids.len() as f64 * 0.3;
            assert!((pos - expected).abs() <= 1.0 + 1e-9, "{p:?}: {pos} vs {expected}");
        }
    }
}

proptest! {
    #[test]
    fn seed_summary_matches_statrs(
        cms in prop::collection::vec((0usize..40, 0usize..40, 0usize..40, 0usize..40, 0usize..3, 0usize..3), 1..12)
    ) {
        let reports: Vec<_> = cms
            .iter()
            .enumerate()
            .map(|(i, &(tp, fp, tn, fn_, undecodable_pos, undecodable_neg))| {
                let mut r = metrics(&ConfusionMatrix { tp, fp, tn, fn_, undecodable_pos, undecodable_neg });
                r.seed = Some(i as u64);
                r
            })
            .collect();
        let s = aggregate_seeds(&reports).unwrap();
        let mut reversed = reports.clone();
        reversed.reverse();
        prop_assert_eq!(&aggregate_seeds(&reversed).unwrap(), &s);
        for name in METRIC_NAMES {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
            let m = &s.metrics[name];
            prop_assert_eq!(m.n_defined, vals.len());
            if vals.is_empty() {
                prop_assert!(m.mean.is_none() && m.sd.is_none());
                continue;
            }
            let mean = vals.iter().mean();
            prop_assert!((m.mean.unwrap() - mean).abs() < 1e-12, "{name}: {:?} vs {mean}", m.mean);
            let sd = if vals.len() < 2 { 0.0 } else { vals.iter().std_dev() };
            prop_assert!((m.sd.unwrap() - sd).abs() < 1e-12, "{name}: {:?} vs {sd}", m.sd);
        }
    }
}
