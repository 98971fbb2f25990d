//! Structured (JSON) answers and the two-round self-reflection protocol.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::inference::{constrained_binary_decode, ChatBackend, InferenceError, RawResponse};
use crate::prompt::{reflection_prompt, InstructionSet, PriorAnswer, PromptError, RenderedPrompt};
use crate::record::PredictionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum InterpretError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("JSON answer is missing `{0}`")]
    MissingKey(&'static str),
    #[error("prediction {0} is not 0 or 1")]
    BadPrediction(String),
    #[error("confidence {0} is not a number")]
    BadConfidence(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretableOutput {
    pub prediction: u8,
    pub reasoning: String,
    /// Clamped into [0, 1].
    pub confidence: f64,
    pub confidence_clamped: bool,
}

/// Byte ranges of balanced `{...}` spans, scanning from each `{` in order.
/// Braces inside JSON strings are ignored.
fn balanced_spans(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'{')
        .filter_map(move |(start, _)| {
            let mut depth = 0usize;
            let mut in_string = false;
            let mut escaped = false;
            for (i, &b) in bytes.iter().enumerate().skip(start) {
                if in_string {
                    match b {
                        _ if escaped => escaped = false,
                        b'\\' => escaped = true,
                        b'"' => in_string = false,
                        _ => {}
                    }
                    continue;
                }
                match b {
                    b'"' => in_string = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&text[start..=i]);
                        }
                    }
                    _ => {}
                }
            }
            None
        })
}

/// First balanced span that parses as a JSON object.
pub fn first_json_object(text: &str) -> Option<Map<String, Json>> {
    balanced_spans(text).find_map(|span| match serde_json::from_str::<Json>(span) {
        Ok(Json::Object(map)) => Some(map),
        _ => None,
    })
}

fn as_number(v: &Json) -> Option<f64> {
    match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()),
        _ => None,
    }
}

/// Parses `{"prediction", "reasoning", "confidence"}` out of a response that
/// may wrap it in prose or code fences.
pub fn parse_interpretable(raw: &RawResponse) -> Result<InterpretableOutput, InterpretError> {
    let obj = first_json_object(&raw.text).ok_or(InterpretError::NoJsonFound)?;
    let pred = obj.get("prediction").ok_or(InterpretError::MissingKey("prediction"))?;
    let reasoning = obj.get("reasoning").ok_or(InterpretError::MissingKey("reasoning"))?;
    let confidence = obj.get("confidence").ok_or(InterpretError::MissingKey("confidence"))?;

    let prediction = match as_number(pred) {
        Some(0.0) => 0,
        Some(1.0) => 1,
        _ => return Err(InterpretError::BadPrediction(pred.to_string())),
    };
    let reasoning = match reasoning {
        Json::String(s) => s.clone(),
        Json::Null => String::new(),
        other => other.to_string(),
    };
    let c = as_number(confidence).ok_or_else(|| InterpretError::BadConfidence(confidence.to_string()))?;
    let clamped = c.clamp(0.0, 1.0);
    Ok(InterpretableOutput {
        prediction,
        reasoning,
        confidence: clamped,
        confidence_clamped: clamped != c,
    })
}

/// Result of decoding any response: structured answer if one parses, else
/// the constrained binary decode of the raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub label: Option<u8>,
    pub confidence: Option<f64>,
    pub reasoning: Option<String>,
}

pub fn decode_response(raw: &RawResponse) -> Decoded {
    if let Ok(out) = parse_interpretable(raw) {
        return Decoded {
            label: Some(out.prediction),
            confidence: Some(out.confidence),
            reasoning: Some(out.reasoning),
        };
    }
    Decoded {
        label: constrained_binary_decode(raw).ok(),
        confidence: None,
        reasoning: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub initial: PredictionRecord,
    pub revised: PredictionRecord,
    pub changed: bool,
    pub rounds: u8,
    /// Raw round-two text, kept even when it could not be decoded.
    pub round_two_text: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReflectionError {
    #[error("initial prediction for `{0}` was not decoded")]
    InitialUndecodable(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// One review round. An undecodable round-two answer keeps the initial
/// prediction.
pub fn run_self_reflection(
    backend: &dyn ChatBackend,
    prompt: &RenderedPrompt,
    initial: &PredictionRecord,
    instructions: &InstructionSet,
) -> Result<ReflectionOutcome, ReflectionError> {
    let label = initial
        .label
        .ok_or_else(|| ReflectionError::InitialUndecodable(initial.target_id.clone()))?;
    let prior = PriorAnswer {
        text: initial.raw_text.clone(),
        label,
        reasoning: initial.reasoning.clone(),
        base_variant: prompt.format.variant,
    };
    let second = reflection_prompt(prompt, &prior, instructions)?;
    let raw = backend.complete(&second)?;
    let decoded = decode_response(&raw);
    let revised = match decoded.label {
        Some(l) => PredictionRecord {
            label: Some(l),
            confidence: decoded.confidence,
            reasoning: decoded.reasoning,
            raw_text: raw.text.clone(),
            format: second.format,
            round: 2,
            ..initial.clone()
        },
        None => initial.clone(),
    };
    Ok(ReflectionOutcome {
        changed: revised.label != initial.label,
        initial: initial.clone(),
        revised,
        rounds: 2,
        round_two_text: raw.text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{LabelPosition, Message, PromptFormat, Role, Shots, Structure, Variant};
    use std::sync::Mutex;

    fn parse(s: &str) -> Result<InterpretableOutput, InterpretError> {
        parse_interpretable(&RawResponse::text(s))
    }

    #[test]
    fn direct_json() {
        let o = parse(r#"{"prediction":1,"reasoning":"low hippocampal volume","confidence":0.82}"#).unwrap();
        assert_eq!(o.prediction, 1);
        assert_eq!(o.reasoning, "low hippocampal volume");
        assert_eq!(o.confidence, 0.82);
        assert!(!o.confidence_clamped);
    }

    #[test]
    fn fenced_string_prediction_clamped() {
        let o = parse("Sure! ```{\"prediction\":\"0\",\"reasoning\":\"…\",\"confidence\":1.4}```").unwrap();
        assert_eq!(o.prediction, 0);
        assert_eq!(o.confidence, 1.0);
        assert!(o.confidence_clamped);
        let o = parse(r#"{"prediction":1,"reasoning":"","confidence":-0.2}"#).unwrap();
        assert_eq!(o.confidence, 0.0);
        assert!(o.confidence_clamped);
    }

    #[test]
    fn bad_answers() {
        assert!(matches!(
            parse(r#"{"prediction":2,"reasoning":"x","confidence":0.5}"#),
            Err(InterpretError::BadPrediction(_))
        ));
        assert_eq!(parse("no json here"), Err(InterpretError::NoJsonFound));
        assert_eq!(
            parse(r#"{"prediction":1,"confidence":0.5}"#),
            Err(InterpretError::MissingKey("reasoning"))
        );
        assert!(matches!(
            parse(r#"{"prediction":1,"reasoning":"x","confidence":"high"}"#),
            Err(InterpretError::BadConfidence(_))
        ));
    }

    #[test]
    fn skips_unparsable_spans_and_braces_in_strings() {
        let o = parse(r#"Template {prediction} then {"prediction":"1","reasoning":"has } brace","confidence":"0.5"}"#)
            .unwrap();
        assert_eq!(o.prediction, 1);
        assert_eq!(o.reasoning, "has } brace");
        assert_eq!(o.confidence, 0.5);
    }

    struct Scripted(Mutex<Vec<&'static str>>);

    impl ChatBackend for Scripted {
        fn name(&self) -> String {
            "scripted".into()
        }
        fn complete(&self, _: &RenderedPrompt) -> Result<RawResponse, InferenceError> {
            Ok(RawResponse::text(self.0.lock().unwrap().remove(0)))
        }
    }

    fn setup(label: u8) -> (RenderedPrompt, PredictionRecord) {
        let fmt = PromptFormat::new(Structure::Tabular, Shots::Few, Variant::Standard);
        let prompt = RenderedPrompt {
            messages: vec![Message::new(Role::System, "s"), Message::new(Role::User, "u")],
            target_id: "t1".into(),
            format: fmt,
            expected_label_position: LabelPosition::GridFinalCell,
        };
        let rec = PredictionRecord {
            target_id: "t1".into(),
            label: Some(label),
            confidence: None,
            reasoning: None,
            raw_text: label.to_string(),
            seed: 36,
            format: fmt,
            endpoint: "scripted".into(),
            round: 1,
        };
        (prompt, rec)
    }

    #[test]
    fn reflection_outcomes() {
        let i = InstructionSet::builtin();
        let (p, r) = setup(1);
        let b = Scripted(Mutex::new(vec![
            "1",
            r#"{"prediction":0,"reasoning":"revised","confidence":0.6}"#,
            "the weather is nice",
        ]));
        let same = run_self_reflection(&b, &p, &r, &i).unwrap();
        assert!(!same.changed);
        assert_eq!(same.revised.round, 2);
        let flipped = run_self_reflection(&b, &p, &r, &i).unwrap();
        assert!(flipped.changed);
        assert_eq!(flipped.revised.label, Some(0));
        assert_eq!(flipped.revised.reasoning.as_deref(), Some("revised"));
        let kept = run_self_reflection(&b, &p, &r, &i).unwrap();
        assert!(!kept.changed);
        assert_eq!(kept.revised, r);
        assert_eq!(kept.round_two_text, "the weather is nice");
    }

    #[test]
    fn reflection_needs_decoded_initial() {
        let i = InstructionSet::builtin();
        let (p, mut r) = setup(1);
        r.label = None;
        let b = Scripted(Mutex::new(vec!["1"]));
        assert!(matches!(
            run_self_reflection(&b, &p, &r, &i),
            Err(ReflectionError::InitialUndecodable(_))
        ));
    }
}
