#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::export::validate_jsonl;

fuzz_target!(|data: &[u8]| {
    let report = validate_jsonl(data);
    let _ = report.passed();
    let _ = report.positive_rate();
});
