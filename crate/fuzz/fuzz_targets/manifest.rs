#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::prompt::PromptFormat;
use tabicl::runner::ExperimentManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for m in [ExperimentManifest::from_toml(text), ExperimentManifest::from_json(text)].into_iter().flatten() {
        let _ = m.validate();
        let _ = m.hash();
    }
    let _ = text.parse::<PromptFormat>();
});
