#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::inference::{constrained_binary_decode, RawResponse};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(label) = constrained_binary_decode(&RawResponse::text(text)) {
        assert!(label <= 1);
    }
});
