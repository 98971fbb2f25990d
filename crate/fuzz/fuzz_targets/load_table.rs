#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::table::{load_table, Schema};

const SCHEMA: &str = include_str!("../../crates/core/tests/fixtures/toy_schema.json");

fuzz_target!(|data: &[u8]| {
    let schema = Schema::from_json(SCHEMA).expect("fixture schema");
    if let Ok(t) = load_table(data, &schema) {
        for r in t.rows() {
            let _ = tabicl::table::missing_fraction(r, &t);
        }
    }
});
