//! Chat-format JSONL corpora for supervised fine-tuning.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{label_leaks, Message, PromptFormat, RenderedPrompt, Role, Variant};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("record for `{target}`: {reason}")]
    InvariantViolation { target: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub seed: u64,
    pub format: PromptFormat,
    pub dataset: String,
    pub target_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub messages: Vec<Message>,
    pub label: u8,
    pub meta: FinetuneMeta,
}

/// Assistant target text: the bare digit, or for the interpretable variant a
/// JSON answer with empty reasoning.
pub fn answer_text(variant: Variant, label: u8) -> String {
    match variant {
        Variant::Interpretable => format!(r#"{{"prediction":{label},"reasoning":"","confidence":1.0}}"#),
        _ => label.to_string(),
    }
}

/// Appends the answer to a first-round prompt.
pub fn finetune_record(prompt: &RenderedPrompt, label: u8, seed: u64, dataset: &str) -> Result<FinetuneRecord, ExportError> {
    let record = FinetuneRecord {
        messages: prompt
            .messages
            .iter()
            .cloned()
            .chain([Message::new(Role::Assistant, answer_text(prompt.format.variant, label))])
            .collect(),
        label,
        meta: FinetuneMeta {
            seed,
            format: prompt.format,
            dataset: dataset.to_string(),
            target_id: prompt.target_id.clone(),
        },
    };
    check_record(&record)?;
    Ok(record)
}

fn violation(r: &FinetuneRecord, reason: impl Into<String>) -> ExportError {
    ExportError::InvariantViolation {
        target: r.meta.target_id.clone(),
        reason: reason.into(),
    }
}

/// Checks the final-answer and leakage invariants.
pub fn check_record(r: &FinetuneRecord) -> Result<(), ExportError> {
    if r.label > 1 {
        return Err(violation(r, format!("label {} is not 0 or 1", r.label)));
    }
    if r.meta.format.variant == Variant::ReflectionRound {
        return Err(violation(r, "reflection rounds are not exported"));
    }
    let Some((last, prompt)) = r.messages.split_last() else {
        return Err(violation(r, "no messages"));
    };
    if last.role != Role::Assistant {
        return Err(violation(r, "final message is not from the assistant"));
    }
    if prompt.iter().any(|m| m.role == Role::Assistant) {
        return Err(violation(r, "assistant message before the answer"));
    }
    let answered = match r.meta.format.variant {
        Variant::Interpretable => serde_json::from_str::<serde_json::Value>(&last.content)
            .ok()
            .and_then(|v| v.get("prediction").and_then(|p| p.as_u64())),
        _ => match last.content.as_str() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
    };
    match answered {
        Some(a) if a == r.label as u64 => {}
        _ => return Err(violation(r, format!("answer {:?} does not encode label {}", last.content, r.label))),
    }
    if label_leaks(prompt) {
        return Err(violation(r, "prompt exposes the target label"));
    }
    Ok(())
}

/// Writes one JSON object per line. Nothing is written unless every record
/// passes [`check_record`].
pub fn export_chat_jsonl<I, W>(records: I, mut sink: W) -> Result<usize, ExportError>
where
    I: IntoIterator<Item = FinetuneRecord>,
    W: Write,
{
    let records: Vec<FinetuneRecord> = records.into_iter().collect();
    for r in &records {
        check_record(r)?;
    }
    for r in &records {
        serde_json::to_writer(&mut sink, r).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFailure {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub parse_failures: Vec<LineFailure>,
    pub invariant_failures: Vec<LineFailure>,
    /// Lines whose prompt exposes the record's own label.
    pub leaks: Vec<usize>,
    pub label_counts: [usize; 2],
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.parse_failures.is_empty() && self.invariant_failures.is_empty() && self.leaks.is_empty()
    }

    pub fn positive_rate(&self) -> Option<f64> {
        let n = self.label_counts[0] + self.label_counts[1];
        (n > 0).then(|| self.label_counts[1] as f64 / n as f64)
    }
}

/// Parses and re-checks every line. Never fails; problems land in the report.
pub fn validate_jsonl<R: BufRead>(source: R) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, line) in source.split(b'\n').enumerate() {
        let n = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.lines = n;
                report.parse_failures.push(LineFailure {
                    line: n,
                    reason: e.to_string(),
                });
                break;
            }
        };
        let line = line.strip_suffix(b"\r").unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        report.lines = n;
        let record: FinetuneRecord = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => {
                report.parse_failures.push(LineFailure {
                    line: n,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if record.label <= 1 {
            report.label_counts[record.label as usize] += 1;
        }
        let prompt_end = record.messages.len().saturating_sub(1);
        if label_leaks(&record.messages[..prompt_end]) {
            report.leaks.push(n);
        }
        if let Err(e) = check_record(&record) {
            report.invariant_failures.push(LineFailure {
                line: n,
                reason: e.to_string(),
            });
        }
    }
    report
}

/// Sidecar written next to an export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub dataset: String,
    pub dataset_sha256: String,
    pub seed: u64,
    pub formats: Vec<PromptFormat>,
    pub instruction_version: String,
    pub template_version: Option<String>,
    pub records: usize,
    pub jsonl_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
