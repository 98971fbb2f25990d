#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::table::Schema;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = Schema::from_json(text) {
            let _ = Schema::from_json(&s.to_json()).expect("round trip");
        }
    }
});
