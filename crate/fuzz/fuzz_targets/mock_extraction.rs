#![no_main]

use libfuzzer_sys::fuzz_target;
use tabicl::inference::extract_target_value;
use tabicl::prompt::{label_leaks, LabelPosition, Message, RenderedPrompt, Role};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let (feature, body) = text.split_once('\n').unwrap_or(("age", &text));
    let prompt = RenderedPrompt {
        messages: vec![Message::new(Role::User, body)],
        target_id: "t".into(),
        format: "tabular-few-standard".parse().expect("format"),
        expected_label_position: LabelPosition::GridFinalCell,
    };
    let _ = extract_target_value(&prompt, feature);
    let _ = label_leaks(&prompt.messages);
});
