//! Chat-completion inference: the HTTP client, constrained binary decoding,
//! and a deterministic rule-based mock model for offline runs.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::prompt::{grid_cells, Message, RenderedPrompt, Role, Variant, MISSING_TOKEN, TARGET_PREFIX};

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("feature `{0}` not found in the prompt's target")]
    FeatureNotFound(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("undecodable response: {0:?}")]
pub struct Undecodable(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, failed_attempts: u32) -> Duration {
        let factor = 1u64 << failed_attempts.saturating_sub(1).min(20);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Tokenizer ids of the single-character outputs `0` and `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTokenIds {
    pub zero: u32,
    pub one: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token. Never the token itself.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub supports_logit_bias: bool,
    #[serde(default)]
    pub label_token_ids: Option<LabelTokenIds>,
    #[serde(default = "default_bias")]
    pub logit_bias_value: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Maximum in-flight requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_max_tokens() -> u32 {
    256
}
fn default_bias() -> f64 {
    100.0
}
fn default_timeout() -> u64 {
    60
}
fn default_concurrency() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        EndpointConfig {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            auth_env: None,
            max_output_tokens: default_max_tokens(),
            temperature: 0.0,
            supports_logit_bias: false,
            label_token_ids: None,
            logit_bias_value: default_bias(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_output_tokens < 1 {
            return Err(InferenceError::Config("max_output_tokens must be at least 1".into()));
        }
        if self.supports_logit_bias && self.label_token_ids.is_none() {
            return Err(InferenceError::Config(
                "supports_logit_bias requires label_token_ids".into(),
            ));
        }
        if self.retry.max_attempts < 1 {
            return Err(InferenceError::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.concurrency < 1 {
            return Err(InferenceError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub finish_reason: Option<String>,
    pub latency_ms: u64,
    pub usage: Option<TokenUsage>,
}

impl RawResponse {
    pub fn text(text: impl Into<String>) -> Self {
        RawResponse {
            text: text.into(),
            finish_reason: None,
            latency_ms: 0,
            usage: None,
        }
    }
}

/// Anything that can answer a rendered prompt.
pub trait ChatBackend: Send + Sync {
    /// Short provenance label recorded with each prediction.
    fn name(&self) -> String;
    fn complete(&self, prompt: &RenderedPrompt) -> Result<RawResponse, InferenceError>;
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    logit_bias: Option<BTreeMap<String, f64>>,
}

/// JSON request body for `prompt`. Standard-variant prompts on endpoints with
/// logit-bias support get a bias toward the `0`/`1` tokens and a one-token cap.
pub fn request_body(cfg: &EndpointConfig, prompt: &RenderedPrompt) -> Vec<u8> {
    let constrain = cfg.supports_logit_bias && prompt.format.variant == Variant::Standard;
    let logit_bias = match (constrain, cfg.label_token_ids) {
        (true, Some(ids)) => Some(BTreeMap::from([
            (ids.zero.to_string(), cfg.logit_bias_value),
            (ids.one.to_string(), cfg.logit_bias_value),
        ])),
        _ => None,
    };
    let body = ChatRequest {
        model: &cfg.model_name,
        messages: &prompt.messages,
        temperature: cfg.temperature,
        max_tokens: if logit_bias.is_some() { 1 } else { cfg.max_output_tokens },
        logit_bias,
    };
    serde_json::to_vec(&body).expect("request serializes")
}

/// Reads `choices[0].message.content` and friends from a response body.
pub fn parse_response_body(body: &[u8], latency_ms: u64) -> Result<RawResponse, InferenceError> {
    let v: Json = serde_json::from_slice(body)
        .map_err(|e| InferenceError::MalformedResponse(format!("not JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| InferenceError::MalformedResponse("missing choices[0]".into()))?;
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Json::as_str)
        .ok_or_else(|| InferenceError::MalformedResponse("missing message content".into()))?;
    let usage = v.get("usage").map(|u| TokenUsage {
        prompt_tokens: u.get("prompt_tokens").and_then(Json::as_u64),
        completion_tokens: u.get("completion_tokens").and_then(Json::as_u64),
    });
    Ok(RawResponse {
        text: text.to_string(),
        finish_reason: choice
            .get("finish_reason")
            .and_then(Json::as_str)
            .map(str::to_string),
        latency_ms,
        usage,
    })
}

/// Blocking HTTP client for the chat-completions protocol.
pub struct HttpChatClient {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, InferenceError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| InferenceError::Transport(e.to_string()))?;
        Ok(HttpChatClient { cfg, client })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn token(&self) -> Result<Option<String>, InferenceError> {
        match &self.cfg.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| InferenceError::AuthFailure(format!("environment variable {var} is not set"))),
        }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }
}

impl ChatBackend for HttpChatClient {
    fn name(&self) -> String {
        self.cfg.model_name.clone()
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<RawResponse, InferenceError> {
        if prompt.messages.is_empty() {
            return Err(InferenceError::Config("prompt has no messages".into()));
        }
        let token = self.token()?;
        let body = request_body(&self.cfg, prompt);
        let policy = &self.cfg.retry;
        let mut last = InferenceError::Transport("no attempt made".into());
        for attempt in 1..=policy.max_attempts {
            if attempt > 1 {
                std::thread::sleep(policy.delay(attempt - 1));
            }
            let mut req = self
                .client
                .post(self.url())
                .header("content-type", "application/json")
                .body(body.clone());
            if let Some(t) = &token {
                req = req.header("authorization", format!("Bearer {t}"));
            }
            let started = Instant::now();
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last = InferenceError::Transport(e.to_string());
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let bytes = match resp.bytes() {
                Ok(b) => b,
                Err(e) => {
                    last = InferenceError::Transport(e.to_string());
                    continue;
                }
            };
            let latency = started.elapsed().as_millis() as u64;
            match status {
                200..=299 => return parse_response_body(&bytes, latency),
                401 | 403 => {
                    return Err(InferenceError::AuthFailure(format!("HTTP {status}")));
                }
                429 => last = InferenceError::RateLimited { attempts: attempt },
                500..=599 => {
                    last = InferenceError::HttpStatus {
                        status,
                        body: String::from_utf8_lossy(&bytes).into_owned(),
                    }
                }
                _ => {
                    return Err(InferenceError::HttpStatus {
                        status,
                        body: String::from_utf8_lossy(&bytes).into_owned(),
                    })
                }
            }
        }
        Err(last)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// First `0`/`1` that stands alone: not part of a longer number, word,
/// decimal, or signed value.
fn first_standalone_digit(text: &str) -> Option<u8> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c != '0' && c != '1' {
            continue;
        }
        let prev = i.checked_sub(1).map(|p| chars[p]);
        if prev.is_some_and(|p| is_word_char(p) || p == '.' || p == '-' || p == '+') {
            continue;
        }
        let next = chars.get(i + 1).copied();
        if next.is_some_and(is_word_char) {
            continue;
        }
        if matches!(next, Some('.') | Some(','))
            && chars.get(i + 2).is_some_and(|d| d.is_ascii_digit())
        {
            continue;
        }
        return Some((c == '1') as u8);
    }
    None
}

fn word_at(lower: &[char], i: usize, word: &str, right_boundary: bool) -> bool {
    let w: Vec<char> = word.chars().collect();
    if i + w.len() > lower.len() || lower[i..i + w.len()] != w[..] {
        return false;
    }
    if i > 0 && is_word_char(lower[i - 1]) {
        return false;
    }
    !(right_boundary && lower.get(i + w.len()).is_some_and(|c| is_word_char(*c)))
}

/// Earliest class word: `CN` / `cognitively normal` for 0, `AD` /
/// `Alzheimer...` for 1, case-insensitive.
fn first_class_word(text: &str) -> Option<u8> {
    let lower: Vec<char> = text.to_lowercase().chars().collect();
    for i in 0..lower.len() {
        if word_at(&lower, i, "cognitively normal", true) || word_at(&lower, i, "cn", true) {
            return Some(0);
        }
        if word_at(&lower, i, "alzheimer", false) || word_at(&lower, i, "ad", true) {
            return Some(1);
        }
    }
    None
}

/// Maps free text to a label: exact `0`/`1` after trimming, else the first
/// standalone `0`/`1`, else the earliest class word.
pub fn constrained_binary_decode(raw: &RawResponse) -> Result<u8, Undecodable> {
    let trimmed = raw.text.trim();
    match trimmed {
        "0" => return Ok(0),
        "1" => return Ok(1),
        _ => {}
    }
    first_standalone_digit(trimmed)
        .or_else(|| first_class_word(trimmed))
        .ok_or_else(|| Undecodable(raw.text.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    GreaterIsPositive,
    LessIsPositive,
}

/// Threshold rule on one feature of the target. Strict inequality; a missing
/// value predicts 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub feature: String,
    pub threshold: f64,
    pub direction: Direction,
}

impl MockRule {
    pub fn evaluate(&self, value: Option<f64>) -> u8 {
        match value {
            None => 0,
            Some(v) => match self.direction {
                Direction::GreaterIsPositive => (v > self.threshold) as u8,
                Direction::LessIsPositive => (v < self.threshold) as u8,
            },
        }
    }
}

enum Extracted {
    Value(Option<f64>),
    Absent,
}

fn parse_value(feature: &str, text: &str) -> Result<Option<f64>, InferenceError> {
    if text == MISSING_TOKEN {
        return Ok(None);
    }
    text.parse::<f64>()
        .map(Some)
        .map_err(|_| InferenceError::FeatureNotFound(format!("{feature} (non-numeric value {text:?})")))
}

fn from_grid(content: &str, feature: &str) -> Result<Extracted, InferenceError> {
    let rows: Vec<Vec<&str>> = content.lines().filter_map(grid_cells).collect();
    if rows.len() < 2 {
        return Ok(Extracted::Absent);
    }
    let Some(col) = rows[0].iter().position(|h| *h == feature) else {
        return Ok(Extracted::Absent);
    };
    let target = rows.last().expect("at least two rows");
    let cell = target
        .get(col)
        .ok_or_else(|| InferenceError::FeatureNotFound(feature.to_string()))?;
    Ok(Extracted::Value(parse_value(feature, cell)?))
}

fn from_target_line(content: &str, feature: &str) -> Result<Extracted, InferenceError> {
    let Some(line) = content.lines().find(|l| l.starts_with(TARGET_PREFIX)) else {
        return Ok(Extracted::Absent);
    };
    let key = format!("{feature}=");
    let mut search = 0;
    while let Some(pos) = line[search..].find(&key) {
        let at = search + pos;
        let boundary = at == 0 || line[..at].ends_with(' ');
        if boundary {
            let rest = &line[at + key.len()..];
            let end = rest.find([',', ' ']).unwrap_or(rest.len());
            return Ok(Extracted::Value(parse_value(feature, &rest[..end])?));
        }
        search = at + key.len();
    }
    Ok(Extracted::Absent)
}

/// Reads the rule's feature from the target row (last grid row, or the
/// key-value pairs on the target description line) of the first user message
/// that has one.
pub fn extract_target_value(prompt: &RenderedPrompt, feature: &str) -> Result<Option<f64>, InferenceError> {
    for m in prompt.messages.iter().filter(|m| m.role == Role::User) {
        if let Extracted::Value(v) = from_grid(&m.content, feature)? {
            return Ok(v);
        }
        if let Extracted::Value(v) = from_target_line(&m.content, feature)? {
            return Ok(v);
        }
    }
    Err(InferenceError::FeatureNotFound(feature.to_string()))
}

/// Applies `rule` to the prompt's target. Interpretable prompts get a JSON
/// answer, everything else a bare digit.
pub fn mock_oracle_predict(prompt: &RenderedPrompt, rule: &MockRule) -> Result<RawResponse, InferenceError> {
    let value = extract_target_value(prompt, &rule.feature)?;
    let label = rule.evaluate(value);
    let text = if prompt.format.variant == Variant::Interpretable {
        let reasoning = match value {
            None => format!("{} is missing", rule.feature),
            Some(v) => format!("{} is {v}", rule.feature),
        };
        serde_json::json!({"prediction": label, "reasoning": reasoning, "confidence": 1.0}).to_string()
    } else {
        label.to_string()
    };
    Ok(RawResponse {
        text,
        finish_reason: Some("stop".into()),
        latency_ms: 0,
        usage: None,
    })
}

/// [`mock_oracle_predict`] as a backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub rule: MockRule,
}

impl ChatBackend for MockBackend {
    fn name(&self) -> String {
        let op = match self.rule.direction {
            Direction::GreaterIsPositive => ">",
            Direction::LessIsPositive => "<",
        };
        format!("mock:{}{op}{}", self.rule.feature, self.rule.threshold)
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<RawResponse, InferenceError> {
        mock_oracle_predict(prompt, &self.rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{LabelPosition, PromptFormat, Shots, Structure};

    fn decode(s: &str) -> Result<u8, Undecodable> {
        constrained_binary_decode(&RawResponse::text(s))
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(" 1\n"), Ok(1));
        assert_eq!(decode("The diagnosis is 0 (cognitively normal)."), Ok(0));
        assert!(decode("I cannot determine this.").is_err());
    }

    #[test]
    fn decode_rule_order() {
        assert_eq!(decode("Label: 1."), Ok(1));
        assert_eq!(decode("confidence 0.93, answer 1"), Ok(1));
        assert_eq!(decode("AD, so 0"), Ok(0));
        assert_eq!(decode("likely Alzheimer's disease"), Ok(1));
        assert_eq!(decode("patient is CN not AD"), Ok(0));
        assert!(decode("ADRC subject, bad data").is_err());
        assert_eq!(decode("ADRC subject: AD"), Ok(1));
        assert!(decode("10 or 11").is_err());
    }

    fn prompt(content: &str, variant: Variant) -> RenderedPrompt {
        RenderedPrompt {
            messages: vec![Message::new(Role::System, "s"), Message::new(Role::User, content)],
            target_id: "t".into(),
            format: PromptFormat::new(Structure::Tabular, Shots::Few, variant),
            expected_label_position: LabelPosition::GridFinalCell,
        }
    }

    fn age_rule() -> MockRule {
        MockRule {
            feature: "age".into(),
            threshold: 75.0,
            direction: Direction::GreaterIsPositive,
        }
    }

    #[test]
    fn mock_reads_target_row() {
        let grid = |age: &str| format!("task\n\n| age | x | dx |\n| 90 | 1 | 1 |\n| {age} | 2 | ? |\n\nanswer");
        let r = age_rule();
        assert_eq!(mock_oracle_predict(&prompt(&grid("80"), Variant::Standard), &r).unwrap().text, "1");
        assert_eq!(mock_oracle_predict(&prompt(&grid("75"), Variant::Standard), &r).unwrap().text, "0");
        assert_eq!(mock_oracle_predict(&prompt(&grid("NaN"), Variant::Standard), &r).unwrap().text, "0");
        let json = mock_oracle_predict(&prompt(&grid("80"), Variant::Interpretable), &r).unwrap();
        assert!(json.text.starts_with("{\"prediction\":1"));
    }

    #[test]
    fn mock_reads_keyvalue_target() {
        let text = "task\n\nExample 1: He is 70 years old. hv=3.5, age2=1 Diagnosis: CN\n\n\
                    Target patient: She is 80 years old. xhv=9, hv=2.25, other=1\n\nanswer";
        let rule = MockRule {
            feature: "hv".into(),
            threshold: 3.0,
            direction: Direction::LessIsPositive,
        };
        assert_eq!(extract_target_value(&prompt(text, Variant::Standard), "hv").unwrap(), Some(2.25));
        assert_eq!(mock_oracle_predict(&prompt(text, Variant::Standard), &rule).unwrap().text, "1");
        assert_eq!(
            mock_oracle_predict(&prompt(text, Variant::Standard), &age_rule()).unwrap_err(),
            InferenceError::FeatureNotFound("age".into())
        );
    }

    #[test]
    fn logit_bias_body() {
        let mut cfg = EndpointConfig::new("http://localhost:1/v1", "tiny");
        cfg.supports_logit_bias = true;
        cfg.label_token_ids = Some(LabelTokenIds { zero: 15, one: 16 });
        let p = prompt("hi", Variant::Standard);
        let body = String::from_utf8(request_body(&cfg, &p)).unwrap();
        assert_eq!(
            body,
            r#"{"model":"tiny","messages":[{"role":"system","content":"s"},{"role":"user","content":"hi"}],"temperature":0.0,"max_tokens":1,"logit_bias":{"15":100.0,"16":100.0}}"#
        );
        let p = prompt("hi", Variant::Interpretable);
        let body = String::from_utf8(request_body(&cfg, &p)).unwrap();
        assert!(!body.contains("logit_bias"));
        assert!(body.contains("\"max_tokens\":256"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::new("http://x", "m");
        assert!(cfg.validate().is_ok());
        cfg.supports_logit_bias = true;
        assert!(cfg.validate().is_err());
        cfg.supports_logit_bias = false;
        cfg.max_output_tokens = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn response_parsing() {
        let body = br#"{"choices":[{"message":{"role":"assistant","content":"1"},"finish_reason":"length"}],"usage":{"prompt_tokens":12,"completion_tokens":1}}"#;
        let r = parse_response_body(body, 5).unwrap();
        assert_eq!(r.text, "1");
        assert_eq!(r.finish_reason.as_deref(), Some("length"));
        assert_eq!(r.usage.unwrap().completion_tokens, Some(1));
        assert!(matches!(
            parse_response_body(b"{\"choices\":[]}", 0),
            Err(InferenceError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_response_body(b"<html>", 0),
            Err(InferenceError::MalformedResponse(_))
        ));
    }
}
