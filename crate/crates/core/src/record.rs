use serde::{Deserialize, Serialize};

use crate::prompt::PromptFormat;

/// One decoded prediction with its provenance. `label` is `None` when the
/// response could not be decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub target_id: String,
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub raw_text: String,
    pub seed: u64,
    pub format: PromptFormat,
    pub endpoint: String,
    pub round: u8,
}

impl PredictionRecord {
    pub fn is_decoded(&self) -> bool {
        self.label.is_some()
    }
}
