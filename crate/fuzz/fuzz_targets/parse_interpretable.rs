#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::inference::RawResponse;
use tabicl::interpret::{decode_response, parse_interpretable};

fuzz_target!(|data: &[u8]| {
    let raw = RawResponse::text(String::from_utf8_lossy(data));
    if let Ok(out) = parse_interpretable(&raw) {
        assert!(out.prediction <= 1);
        assert!((0.0..=1.0).contains(&out.confidence));
    }
    let _ = decode_response(&raw);
});
