#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::select::import_external_ranking;
use tabicl::table::{load_table, Schema};

const SCHEMA: &str = include_str!("../../crates/core/tests/fixtures/toy_schema.json");
const TABLE: &str = include_str!("../../crates/core/tests/fixtures/toy.csv");

fuzz_target!(|data: &[u8]| {
    let schema = Schema::from_json(SCHEMA).expect("fixture schema");
    let table = load_table(TABLE.as_bytes(), &schema).expect("fixture table");
    if let Ok(r) = import_external_ranking(data, &table) {
        let _ = r.to_csv();
    }
});
