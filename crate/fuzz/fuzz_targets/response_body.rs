#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::inference::parse_response_body;

fuzz_target!(|data: &[u8]| {
    let _ = parse_response_body(data, 0);
});
