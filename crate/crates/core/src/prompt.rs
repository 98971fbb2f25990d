//! Deterministic prompt rendering.
//!
//! A prompt is a short chat transcript. Tabular prompts embed a pipe grid
//! whose final row is the target with its label cell masked as `?`;
//! serialized prompts describe each subject in text, labeled examples first
//! and the unlabeled target last. The interpretable variant asks for a JSON
//! answer and the reflection round replays the first exchange and asks the
//! model to review it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::split::ContextSet;
use crate::table::{format_number_with, ColumnRole, FeatureTable, SubjectRow};

/// Rendering of a masked label cell.
pub const MASK_TOKEN: &str = "?";
/// Rendering of a missing cell inside prompts.
pub const MISSING_TOKEN: &str = "NaN";
/// Line prefix of the unlabeled subject in serialized prompts.
pub const TARGET_PREFIX: &str = "Target patient: ";
/// Label phrase prefix in serialized examples.
pub const DIAGNOSIS_PREFIX: &str = "Diagnosis: ";

pub const BUILTIN_INSTRUCTIONS: &str = include_str!("../fixtures/instructions_v1.json");
pub const BUILTIN_KEYVALUE_TEMPLATE: &str = include_str!("../fixtures/template_keyvalue_v1.json");
pub const BUILTIN_NARRATIVE_TEMPLATE: &str = include_str!("../fixtures/template_narrative_v1.json");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("target `{0}` is not in the table")]
    UnknownSubject(String),
    #[error("row for `{subject}` has {found} cells but the table has {expected} columns")]
    SchemaDrift {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("no serialization rule for `{0}`")]
    MissingTemplateRule(String),
    #[error("format contract violated: {0}")]
    FormatContract(String),
    #[error("chars-per-token estimate must be positive, got {0}")]
    BadEstimate(f64),
    #[error("unknown prompt format `{0}`")]
    UnknownFormat(String),
    #[error("fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Tabular,
    Serialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    Zero,
    Few,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Interpretable,
    ReflectionRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptFormat {
    pub structure: Structure,
    pub shots: Shots,
    pub variant: Variant,
}

impl PromptFormat {
    pub const fn new(structure: Structure, shots: Shots, variant: Variant) -> Self {
        PromptFormat {
            structure,
            shots,
            variant,
        }
    }

    /// All twelve structure x shots x variant combinations.
    pub fn all() -> Vec<PromptFormat> {
        let mut out = Vec::with_capacity(12);
        for structure in [Structure::Tabular, Structure::Serialized] {
            for shots in [Shots::Zero, Shots::Few] {
                for variant in [Variant::Standard, Variant::Interpretable, Variant::ReflectionRound] {
                    out.push(PromptFormat::new(structure, shots, variant));
                }
            }
        }
        out
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        PromptFormat { variant, ..self }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.structure {
            Structure::Tabular => "tabular",
            Structure::Serialized => "serialized",
        };
        let k = match self.shots {
            Shots::Zero => "zero",
            Shots::Few => "few",
        };
        let v = match self.variant {
            Variant::Standard => "standard",
            Variant::Interpretable => "interpretable",
            Variant::ReflectionRound => "reflection",
        };
        write!(f, "{s}-{k}-{v}")
    }
}

impl FromStr for PromptFormat {
    type Err = PromptError;

    /// Parses `structure-shots[-variant]`, e.g. `tabular-few` or
    /// `serialized-zero-interpretable`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::UnknownFormat(s.to_string());
        let parts: Vec<&str> = s.split('-').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let structure = match parts[0] {
            "tabular" => Structure::Tabular,
            "serialized" => Structure::Serialized,
            _ => return Err(bad()),
        };
        let shots = match parts[1] {
            "zero" => Shots::Zero,
            "few" => Shots::Few,
            _ => return Err(bad()),
        };
        let variant = match parts.get(2).copied().unwrap_or("standard") {
            "standard" => Variant::Standard,
            "interpretable" => Variant::Interpretable,
            "reflection" => Variant::ReflectionRound,
            _ => return Err(bad()),
        };
        Ok(PromptFormat::new(structure, shots, variant))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// Where the masked target label sits in the first user message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPosition {
    /// Last cell of the last grid line.
    GridFinalCell,
    /// End of the line starting with [`TARGET_PREFIX`].
    TargetDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<Message>,
    pub target_id: String,
    pub format: PromptFormat,
    pub expected_label_position: LabelPosition,
}

impl RenderedPrompt {
    pub fn total_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

/// Versioned instruction texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub version: String,
    pub system: String,
    pub task_tabular_zero: String,
    pub task_tabular_few: String,
    pub task_serialized_zero: String,
    pub task_serialized_few: String,
    pub answer_standard: String,
    pub answer_interpretable: String,
    /// May use `{previous_prediction}` and `{previous_reasoning}`.
    pub reflection: String,
}

impl InstructionSet {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_INSTRUCTIONS).expect("builtin instructions parse")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        serde_json::from_str(text).map_err(|e| PromptError::Fixture(e.to_string()))
    }

    fn task(&self, structure: Structure, shots: Shots) -> &str {
        match (structure, shots) {
            (Structure::Tabular, Shots::Zero) => &self.task_tabular_zero,
            (Structure::Tabular, Shots::Few) => &self.task_tabular_few,
            (Structure::Serialized, Shots::Zero) => &self.task_serialized_zero,
            (Structure::Serialized, Shots::Few) => &self.task_serialized_few,
        }
    }

    fn answer(&self, variant: Variant) -> &str {
        match variant {
            Variant::Interpretable => &self.answer_interpretable,
            _ => &self.answer_standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerializationStyle {
    Narrative,
    Keyvalue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pronouns {
    pub subject: String,
    pub possessive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializationTemplate {
    pub version: String,
    pub style: SerializationStyle,
    #[serde(default)]
    pub sex_column: Option<String>,
    /// Source sex value to pronoun set.
    #[serde(default)]
    pub pronouns: BTreeMap<String, Pronouns>,
    pub default_pronouns: Pronouns,
    /// Sentence per column. Placeholders: `{Subject}`, `{subject}`,
    /// `{Possessive}`, `{possessive}`, `{value}`, `{unit}`, `{name}`.
    #[serde(default)]
    pub sentences: BTreeMap<String, String>,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
    #[serde(default = "default_precision")]
    pub numeric_precision: usize,
}

fn default_precision() -> usize {
    4
}

impl SerializationTemplate {
    pub fn builtin_keyvalue() -> Self {
        Self::from_json(BUILTIN_KEYVALUE_TEMPLATE).expect("builtin template parses")
    }

    pub fn builtin_narrative() -> Self {
        Self::from_json(BUILTIN_NARRATIVE_TEMPLATE).expect("builtin template parses")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        serde_json::from_str(text).map_err(|e| PromptError::Fixture(e.to_string()))
    }

    /// Columns that need a sentence rule under this style.
    fn needs_rule(&self, role: ColumnRole) -> bool {
        match self.style {
            SerializationStyle::Narrative => matches!(role, ColumnRole::Covariate | ColumnRole::Feature),
            SerializationStyle::Keyvalue => role == ColumnRole::Covariate,
        }
    }

    /// Errors on the first in-scope column without a rendering rule.
    pub fn check_coverage(&self, table: &FeatureTable) -> Result<(), PromptError> {
        for col in table.columns() {
            if self.needs_rule(col.role()) && !self.sentences.contains_key(&col.name) {
                return Err(PromptError::MissingTemplateRule(col.name.clone()));
            }
        }
        Ok(())
    }
}

/// The model's first-round answer, replayed in a reflection prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAnswer {
    /// Raw assistant text from round one.
    pub text: String,
    pub label: u8,
    pub reasoning: Option<String>,
    /// Variant the first round used; decides the answer instruction in round two.
    pub base_variant: Variant,
}

fn check_width(table: &FeatureTable, row: &SubjectRow) -> Result<(), PromptError> {
    if row.cells.len() != table.columns().len() {
        return Err(PromptError::SchemaDrift {
            subject: row.subject_id.clone(),
            expected: table.columns().len(),
            found: row.cells.len(),
        });
    }
    Ok(())
}

fn grid_line<I: IntoIterator<Item = String>>(cells: I) -> String {
    let cells: Vec<String> = cells.into_iter().collect();
    format!("| {} |", cells.join(" | "))
}

fn row_cells(table: &FeatureTable, row: &SubjectRow) -> Vec<String> {
    table
        .feature_indices()
        .map(|j| {
            table
                .render_cell(j, &row.cells[j])
                .unwrap_or_else(|| MISSING_TOKEN.to_string())
        })
        .collect()
}

fn lookup<'t>(table: &'t FeatureTable, id: &str) -> Result<&'t SubjectRow, PromptError> {
    table
        .row(id)
        .ok_or_else(|| PromptError::UnknownSubject(id.to_string()))
}

/// Pipe grid: header, one row per context example with its label, then the
/// target with the label masked. The subject id column is not shown.
pub fn render_table_block(
    table: &FeatureTable,
    context: &ContextSet,
    target: &SubjectRow,
) -> Result<String, PromptError> {
    check_width(table, target)?;
    let mut lines = Vec::with_capacity(context.examples.len() + 2);
    lines.push(grid_line(
        (1..table.columns().len()).map(|j| table.columns()[j].name.clone()),
    ));
    for ex in &context.examples {
        let row = lookup(table, &ex.subject_id)?;
        let mut cells = row_cells(table, row);
        cells.push(ex.label.to_string());
        lines.push(grid_line(cells));
    }
    let mut cells = row_cells(table, target);
    cells.push(MASK_TOKEN.to_string());
    lines.push(grid_line(cells));
    Ok(lines.join("\n"))
}

fn fill(sentence: &str, pronouns: &Pronouns, name: &str, value: &str, unit: &str) -> String {
    let lower = |s: &str| {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
            None => String::new(),
        }
    };
    sentence
        .replace("{Subject}", &pronouns.subject)
        .replace("{subject}", &lower(&pronouns.subject))
        .replace("{Possessive}", &pronouns.possessive)
        .replace("{possessive}", &lower(&pronouns.possessive))
        .replace("{name}", name)
        .replace("{unit}", unit)
        .replace("{value}", value)
}

pub fn label_phrase(label: u8) -> String {
    format!("{DIAGNOSIS_PREFIX}{}", if label == 1 { "AD" } else { "CN" })
}

/// Text description of one subject. The label phrase is appended only when
/// `include_label` is set.
pub fn serialize_subject(
    table: &FeatureTable,
    row: &SubjectRow,
    template: &SerializationTemplate,
    include_label: bool,
) -> Result<String, PromptError> {
    check_width(table, row)?;
    template.check_coverage(table)?;
    let pronouns = template
        .sex_column
        .as_ref()
        .and_then(|c| table.column_index(c))
        .and_then(|j| match &row.cells[j] {
            crate::table::Cell::Present(v) => template.pronouns.get(&v.raw),
            crate::table::Cell::Missing => None,
        })
        .unwrap_or(&template.default_pronouns);

    let value_of = |j: usize| -> String {
        let col = &table.columns()[j];
        match &row.cells[j] {
            crate::table::Cell::Missing => MISSING_TOKEN.to_string(),
            crate::table::Cell::Present(v) => match (col.kind.is_numeric(), v.number) {
                (true, Some(x)) => format_number_with(x, template.numeric_precision),
                _ => v.raw.clone(),
            },
        }
    };

    let mut sentences = Vec::new();
    let mut pairs = Vec::new();
    for j in table.feature_indices() {
        let col = &table.columns()[j];
        let value = value_of(j);
        if template.needs_rule(col.role()) {
            let rule = &template.sentences[&col.name];
            let unit = template.units.get(&col.name).map(String::as_str).unwrap_or("");
            sentences.push(fill(rule, pronouns, &col.name, &value, unit));
        } else {
            pairs.push(format!("{}={}", col.name, value));
        }
    }
    let mut text = sentences.join(" ");
    if !pairs.is_empty() {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&pairs.join(", "));
    }
    if include_label {
        let label = table
            .label(row)
            .ok_or_else(|| PromptError::FormatContract(format!("`{}` has no label", row.subject_id)))?;
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&label_phrase(label));
    }
    Ok(text)
}

/// Everything a prompt depends on except the format.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    pub table: &'a FeatureTable,
    pub target_id: &'a str,
    pub context: &'a ContextSet,
    pub instructions: &'a InstructionSet,
    /// Required for serialized formats.
    pub template: Option<&'a SerializationTemplate>,
}

fn first_round_user(
    inputs: &PromptInputs<'_>,
    structure: Structure,
    shots: Shots,
    answer_variant: Variant,
) -> Result<String, PromptError> {
    let target = lookup(inputs.table, inputs.target_id)?;
    let task = inputs.instructions.task(structure, shots);
    let answer = inputs.instructions.answer(answer_variant);
    let body = match structure {
        Structure::Tabular => render_table_block(inputs.table, inputs.context, target)?,
        Structure::Serialized => {
            let template = inputs.template.ok_or_else(|| {
                PromptError::FormatContract("serialized prompts need a serialization template".into())
            })?;
            let mut lines = Vec::with_capacity(inputs.context.examples.len() + 1);
            for (i, ex) in inputs.context.examples.iter().enumerate() {
                let row = lookup(inputs.table, &ex.subject_id)?;
                let desc = serialize_subject(inputs.table, row, template, false)?;
                let sep = if desc.is_empty() { "" } else { " " };
                lines.push(format!("Example {}: {desc}{sep}{}", i + 1, label_phrase(ex.label)));
            }
            let desc = serialize_subject(inputs.table, target, template, false)?;
            let mut out = String::new();
            if !lines.is_empty() {
                out.push_str(&lines.join("\n"));
                out.push_str("\n\n");
            }
            out.push_str(TARGET_PREFIX);
            out.push_str(&desc);
            out
        }
    };
    Ok(format!("{task}\n\n{body}\n\n{answer}"))
}

/// Renders the chat prompt for one target. Reflection rounds need the first
/// round's answer in `prior`.
pub fn build_prompt(
    inputs: &PromptInputs<'_>,
    format: PromptFormat,
    prior: Option<&PriorAnswer>,
) -> Result<RenderedPrompt, PromptError> {
    let k = inputs.context.examples.len();
    match format.shots {
        Shots::Zero if k > 0 => {
            return Err(PromptError::FormatContract(format!(
                "zero-shot prompt given {k} context examples"
            )))
        }
        Shots::Few if k == 0 => {
            return Err(PromptError::FormatContract(
                "few-shot prompt needs at least one context example".into(),
            ))
        }
        _ => {}
    }
    if inputs.context.examples.iter().any(|e| e.subject_id == inputs.target_id) {
        return Err(PromptError::FormatContract(format!(
            "target `{}` appears in its own context",
            inputs.target_id
        )));
    }

    let answer_variant = match format.variant {
        Variant::ReflectionRound => prior
            .ok_or_else(|| PromptError::FormatContract("reflection round needs a prior answer".into()))?
            .base_variant,
        v => v,
    };
    if answer_variant == Variant::ReflectionRound {
        return Err(PromptError::FormatContract(
            "prior answer cannot itself come from a reflection round".into(),
        ));
    }

    let first = RenderedPrompt {
        messages: vec![
            Message::new(Role::System, inputs.instructions.system.clone()),
            Message::new(
                Role::User,
                first_round_user(inputs, format.structure, format.shots, answer_variant)?,
            ),
        ],
        target_id: inputs.target_id.to_string(),
        format: format.with_variant(answer_variant),
        expected_label_position: match format.structure {
            Structure::Tabular => LabelPosition::GridFinalCell,
            Structure::Serialized => LabelPosition::TargetDescription,
        },
    };
    match (format.variant, prior) {
        (Variant::ReflectionRound, Some(prior)) => reflection_prompt(&first, prior, inputs.instructions),
        _ => Ok(first),
    }
}

/// Round-two prompt: the first-round messages, the model's answer, and a
/// request to review it in the same answer format.
pub fn reflection_prompt(
    first: &RenderedPrompt,
    prior: &PriorAnswer,
    instructions: &InstructionSet,
) -> Result<RenderedPrompt, PromptError> {
    if first.format.variant == Variant::ReflectionRound {
        return Err(PromptError::FormatContract(
            "cannot reflect on a reflection-round prompt".into(),
        ));
    }
    let review = instructions
        .reflection
        .replace("{previous_prediction}", &prior.label.to_string())
        .replace(
            "{previous_reasoning}",
            prior.reasoning.as_deref().filter(|r| !r.is_empty()).unwrap_or("none given"),
        );
    let answer = instructions.answer(first.format.variant);
    let mut messages = first.messages.clone();
    messages.push(Message::new(Role::Assistant, prior.text.clone()));
    messages.push(Message::new(Role::User, format!("{review}\n\n{answer}")));
    Ok(RenderedPrompt {
        messages,
        target_id: first.target_id.clone(),
        format: first.format.with_variant(Variant::ReflectionRound),
        expected_label_position: first.expected_label_position,
    })
}

/// Rough prompt size: total characters over `chars_per_token`, rounded up.
pub fn token_budget(prompt: &RenderedPrompt, chars_per_token: f64) -> Result<usize, PromptError> {
    if !(chars_per_token > 0.0 && chars_per_token.is_finite()) {
        return Err(PromptError::BadEstimate(chars_per_token));
    }
    Ok((prompt.total_chars() as f64 / chars_per_token).ceil() as usize)
}

/// Splits a grid line into trimmed cells. Returns `None` for non-grid lines.
pub fn grid_cells(line: &str) -> Option<Vec<&str>> {
    let inner = line.strip_prefix("| ")?.strip_suffix(" |")?;
    Some(inner.split(" | ").collect())
}

/// True if any user message exposes the target's label where the masked
/// label belongs: a non-`?` final grid cell, or a label phrase on the target
/// description line.
pub fn label_leaks(messages: &[Message]) -> bool {
    messages.iter().filter(|m| m.role == Role::User).any(|m| {
        let grid_leak = m
            .content
            .lines()
            .rev()
            .find_map(grid_cells)
            .is_some_and(|cells| cells.last() != Some(&MASK_TOKEN));
        let text_leak = m
            .content
            .lines()
            .filter(|l| l.starts_with(TARGET_PREFIX))
            .any(|l| l.contains(DIAGNOSIS_PREFIX));
        grid_leak || text_leak
    })
}
