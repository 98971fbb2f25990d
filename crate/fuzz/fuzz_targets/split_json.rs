#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::missing::MaskPlan;
use tabicl::split::SplitAssignment;
use tabicl::table::{load_table, Schema};

const SCHEMA: &str = include_str!("../../crates/core/tests/fixtures/toy_schema.json");
const TABLE: &str = include_str!("../../crates/core/tests/fixtures/toy.csv");

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let schema = Schema::from_json(SCHEMA).expect("fixture schema");
    let table = load_table(TABLE.as_bytes(), &schema).expect("fixture table");
    if let Ok(s) = SplitAssignment::from_json(text) {
        let _ = s.verify(&table);
    }
    if let Ok(plan) = MaskPlan::from_json(text) {
        let _ = tabicl::missing::apply_plan(&table, &plan);
    }
});
