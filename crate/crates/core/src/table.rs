//! Labeled subject-by-feature tables with explicit missing cells.
//!
//! A [`FeatureTable`] always stores its columns in canonical order: the
//! subject id first, then covariates, then features, then the label. Every
//! slicing operation preserves that order so prompts rendered for any split
//! see identical headers.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cell sentinels that load as [`Cell::Missing`] (compared case-insensitively).
pub const MISSING_SENTINELS: [&str; 3] = ["", "NA", "NaN"];

/// Text written for a missing cell by [`write_table`].
pub const MISSING_OUTPUT: &str = "NA";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("header does not match schema: expected {expected:?}, found {found:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("row {row}, column `{column}`: cannot parse {value:?}: {reason}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row for `{subject}` has {found} cells, table has {expected} columns")]
    RowWidth {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnKind {
    Identifier,
    Numeric {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Categorical {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        levels: Vec<String>,
    },
    Binary,
    Count,
}

impl ColumnKind {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ColumnKind::Numeric { .. } | ColumnKind::Binary | ColumnKind::Count
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub is_covariate: bool,
    #[serde(default)]
    pub is_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColumnRole {
    Id,
    Covariate,
    Feature,
    Label,
}

impl ColumnSpec {
    pub fn numeric(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Numeric { unit: None },
            is_covariate: false,
            is_label: false,
        }
    }

    pub fn covariate(name: &str, kind: ColumnKind) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind,
            is_covariate: true,
            is_label: false,
        }
    }

    pub fn label(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Binary,
            is_covariate: false,
            is_label: true,
        }
    }

    pub fn identifier(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Identifier,
            is_covariate: false,
            is_label: false,
        }
    }

    pub fn role(&self) -> ColumnRole {
        if self.is_label {
            ColumnRole::Label
        } else if self.kind == ColumnKind::Identifier {
            ColumnRole::Id
        } else if self.is_covariate {
            ColumnRole::Covariate
        } else {
            ColumnRole::Feature
        }
    }
}

/// Column list in source-file order, as read from a schema JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, TableError> {
        let schema = Schema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json(text: &str) -> Result<Self, TableError> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), TableError> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(TableError::InvalidSchema(format!(
                    "duplicate column `{}`",
                    col.name
                )));
            }
            if col.is_label && col.is_covariate {
                return Err(TableError::InvalidSchema(format!(
                    "label column `{}` cannot be a covariate",
                    col.name
                )));
            }
            if col.is_label && col.kind != ColumnKind::Binary {
                return Err(TableError::InvalidSchema(format!(
                    "label column `{}` must be binary",
                    col.name
                )));
            }
            if col.kind == ColumnKind::Identifier && col.is_covariate {
                return Err(TableError::InvalidSchema(format!(
                    "identifier column `{}` cannot be a covariate",
                    col.name
                )));
            }
        }
        let labels = self.columns.iter().filter(|c| c.is_label).count();
        if labels != 1 {
            return Err(TableError::InvalidSchema(format!(
                "expected exactly one label column, found {labels}"
            )));
        }
        let ids = self
            .columns
            .iter()
            .filter(|c| c.role() == ColumnRole::Id)
            .count();
        if ids != 1 {
            return Err(TableError::InvalidSchema(format!(
                "expected exactly one identifier column, found {ids}"
            )));
        }
        Ok(())
    }

    /// Source indices listed in canonical order (id, covariates, features, label).
    fn canonical_permutation(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.columns.len()).collect();
        idx.sort_by_key(|&i| (self.columns[i].role(), i));
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Value {
    /// Trimmed source text.
    pub raw: String,
    /// Parsed value for numeric, binary and count columns.
    pub number: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Present(Value),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn number(&self) -> Option<f64> {
        match self {
            Cell::Present(v) => v.number,
            Cell::Missing => None,
        }
    }

    pub fn number_cell(x: f64) -> Cell {
        Cell::Present(Value {
            raw: format_number(x),
            number: Some(x),
        })
    }

    pub fn text_cell(s: &str) -> Cell {
        Cell::Present(Value {
            raw: s.to_string(),
            number: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRow {
    pub subject_id: String,
    pub cells: Vec<Cell>,
}

/// Canonical rendering of a numeric value: at most four fractional digits,
/// trailing zeros and a bare trailing point removed, negative zero as `0`.
pub fn format_number(x: f64) -> String {
    format_number_with(x, 4)
}

/// [`format_number`] with a configurable number of fractional digits.
pub fn format_number_with(x: f64, digits: usize) -> String {
    let mut s = format!("{x:.digits$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

pub fn is_missing_sentinel(text: &str) -> bool {
    MISSING_SENTINELS
        .iter()
        .any(|s| s.eq_ignore_ascii_case(text.trim()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<ColumnSpec>,
    rows: Vec<SubjectRow>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    /// Builds a table from columns in any order; columns and cells are moved
    /// into canonical order.
    pub fn new(columns: Vec<ColumnSpec>, rows: Vec<SubjectRow>) -> Result<Self, TableError> {
        let schema = Schema::new(columns)?;
        let perm = schema.canonical_permutation();
        let columns: Vec<ColumnSpec> = perm.iter().map(|&i| schema.columns[i].clone()).collect();
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            if row.cells.len() != columns.len() {
                return Err(TableError::RowWidth {
                    subject: row.subject_id,
                    expected: columns.len(),
                    found: row.cells.len(),
                });
            }
            let cells = perm.iter().map(|&i| row.cells[i].clone()).collect();
            out.push(SubjectRow {
                subject_id: row.subject_id,
                cells,
            });
        }
        Self::from_canonical(columns, out)
    }

    fn from_canonical(columns: Vec<ColumnSpec>, rows: Vec<SubjectRow>) -> Result<Self, TableError> {
        let mut index = HashMap::with_capacity(rows.len());
        let label_idx = columns.len() - 1;
        for (i, row) in rows.iter().enumerate() {
            if index.insert(row.subject_id.clone(), i).is_some() {
                return Err(TableError::DuplicateSubject(row.subject_id.clone()));
            }
            if let Cell::Present(v) = &row.cells[label_idx] {
                if !matches!(v.number, Some(x) if x == 0.0 || x == 1.0) {
                    return Err(TableError::BadCell {
                        row: i + 1,
                        column: columns[label_idx].name.clone(),
                        value: v.raw.clone(),
                        reason: "label must be 0 or 1".into(),
                    });
                }
            }
        }
        Ok(FeatureTable {
            columns,
            rows,
            index,
        })
    }

    /// Same columns, a different row list. Rows must come from this table.
    fn with_rows(&self, rows: Vec<SubjectRow>) -> FeatureTable {
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.subject_id.clone(), i))
            .collect();
        FeatureTable {
            columns: self.columns.clone(),
            rows,
            index,
        }
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn rows(&self) -> &[SubjectRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subject_id_column(&self) -> &str {
        &self.columns[0].name
    }

    pub fn label_column(&self) -> &str {
        &self.columns[self.label_index()].name
    }

    pub fn label_index(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn row(&self, subject_id: &str) -> Option<&SubjectRow> {
        self.index.get(subject_id).map(|&i| &self.rows[i])
    }

    pub fn label(&self, row: &SubjectRow) -> Option<u8> {
        row.cells[self.label_index()].number().map(|x| x as u8)
    }

    pub fn label_of(&self, subject_id: &str) -> Option<u8> {
        self.row(subject_id).and_then(|r| self.label(r))
    }

    /// Column indices of covariates and features (everything except id and label).
    pub fn feature_indices(&self) -> std::ops::Range<usize> {
        1..self.label_index()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.names_with_role(ColumnRole::Covariate)
    }

    /// Non-covariate feature names in canonical order.
    pub fn feature_names(&self) -> Vec<String> {
        self.names_with_role(ColumnRole::Feature)
    }

    fn names_with_role(&self, role: ColumnRole) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.role() == role)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            columns: self.columns.clone(),
        }
    }

    /// Rows for the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<FeatureTable, TableError> {
        let rows = ids
            .iter()
            .map(|id| {
                self.row(id)
                    .cloned()
                    .ok_or_else(|| TableError::UnknownColumn(format!("subject `{id}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.with_rows(rows))
    }

    /// Replaces the rows while keeping the schema; used by maskers that edit cells.
    pub fn replace_rows(&self, rows: Vec<SubjectRow>) -> Result<FeatureTable, TableError> {
        Self::from_canonical(self.columns.clone(), rows)
    }

    /// Text used for a present cell in prompts and written tables.
    pub fn render_cell(&self, col: usize, cell: &Cell) -> Option<String> {
        match cell {
            Cell::Missing => None,
            Cell::Present(v) => Some(match (self.columns[col].kind.is_numeric(), v.number) {
                (true, Some(x)) => format_number(x),
                _ => v.raw.clone(),
            }),
        }
    }
}

fn parse_cell(spec: &ColumnSpec, text: &str, row: usize) -> Result<Cell, TableError> {
    let text = text.trim();
    let bad = |reason: &str| TableError::BadCell {
        row,
        column: spec.name.clone(),
        value: text.to_string(),
        reason: reason.to_string(),
    };
    if is_missing_sentinel(text) {
        if spec.kind == ColumnKind::Identifier {
            return Err(bad("subject id cannot be missing"));
        }
        return Ok(Cell::Missing);
    }
    let number = match &spec.kind {
        ColumnKind::Identifier => None,
        ColumnKind::Categorical { levels } => {
            if !levels.is_empty() && !levels.iter().any(|l| l == text) {
                return Err(bad("value is not a declared level"));
            }
            None
        }
        ColumnKind::Numeric { .. } => {
            let x: f64 = text.parse().map_err(|_| bad("not a number"))?;
            if !x.is_finite() {
                return Err(bad("not a finite number"));
            }
            Some(x)
        }
        ColumnKind::Count => {
            let x: f64 = text.parse().map_err(|_| bad("not a count"))?;
            if !(x.is_finite() && x >= 0.0 && x.fract() == 0.0) {
                return Err(bad("count must be a nonnegative integer"));
            }
            Some(x)
        }
        ColumnKind::Binary => {
            let x: f64 = text.parse().map_err(|_| bad("binary value must be 0 or 1"))?;
            if x != 0.0 && x != 1.0 {
                return Err(bad("binary value must be 0 or 1"));
            }
            Some(x)
        }
    };
    Ok(Cell::Present(Value {
        raw: text.to_string(),
        number,
    }))
}

/// Reads a CSV table whose header must list the schema's columns in order.
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_table<R: Read>(source: R, schema: &Schema) -> Result<FeatureTable, TableError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let expected: Vec<String> = schema.columns.iter().map(|c| c.name.clone()).collect();
    let found: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if found != expected {
        return Err(TableError::SchemaMismatch { expected, found });
    }
    let id_col = schema
        .columns
        .iter()
        .position(|c| c.role() == ColumnRole::Id)
        .expect("validated schema has an id column");
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let cells = schema
            .columns
            .iter()
            .zip(record.iter())
            .map(|(spec, text)| parse_cell(spec, text, row_no))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(SubjectRow {
            subject_id: record[id_col].trim().to_string(),
            cells,
        });
    }
    FeatureTable::new(schema.columns.clone(), rows)
}

/// Writes the table in canonical column order; numerics use [`format_number`]
/// and missing cells become [`MISSING_OUTPUT`].
pub fn write_table<W: Write>(table: &FeatureTable, sink: W) -> Result<(), TableError> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    writer.write_record(table.columns.iter().map(|c| c.name.as_str()))?;
    for row in &table.rows {
        let record: Vec<String> = row
            .cells
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                table
                    .render_cell(j, cell)
                    .unwrap_or_else(|| MISSING_OUTPUT.to_string())
            })
            .collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Rows with no missing cell, in input order.
pub fn filter_complete(table: &FeatureTable) -> FeatureTable {
    let rows = table
        .rows
        .iter()
        .filter(|r| r.cells.iter().all(|c| !c.is_missing()))
        .cloned()
        .collect();
    table.with_rows(rows)
}

/// Rows that have at least one missing feature or covariate cell.
pub fn filter_incomplete(table: &FeatureTable) -> FeatureTable {
    let rows = table
        .rows
        .iter()
        .filter(|r| r.cells[table.feature_indices()].iter().any(Cell::is_missing))
        .cloned()
        .collect();
    table.with_rows(rows)
}

/// Projects the table onto the named features. The id, every covariate and the
/// label are always kept; output columns stay in canonical order.
pub fn select_columns(table: &FeatureTable, names: &[String]) -> Result<FeatureTable, TableError> {
    let mut keep = vec![false; table.columns.len()];
    for name in names {
        let j = table
            .column_index(name)
            .ok_or_else(|| TableError::UnknownColumn(name.clone()))?;
        keep[j] = true;
    }
    for (j, col) in table.columns.iter().enumerate() {
        if col.role() != ColumnRole::Feature {
            keep[j] = true;
        }
    }
    let cols: Vec<usize> = (0..keep.len()).filter(|&j| keep[j]).collect();
    let columns = cols.iter().map(|&j| table.columns[j].clone()).collect();
    let rows = table
        .rows
        .iter()
        .map(|r| SubjectRow {
            subject_id: r.subject_id.clone(),
            cells: cols.iter().map(|&j| r.cells[j].clone()).collect(),
        })
        .collect();
    FeatureTable::from_canonical(columns, rows)
}

/// Fraction of a subject's feature and covariate cells that are missing.
pub fn missing_fraction(row: &SubjectRow, table: &FeatureTable) -> f64 {
    let range = table.feature_indices();
    let total = range.len();
    if total == 0 {
        return 0.0;
    }
    let missing = row.cells[range].iter().filter(|c| c.is_missing()).count();
    missing as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(vec![
            ColumnSpec::identifier("id"),
            ColumnSpec::numeric("a"),
            ColumnSpec::numeric("b"),
            ColumnSpec::label("dx"),
        ])
        .unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let csv = "id,a,b,dx\ns1,1.5,2,0\ns2,3,4.25,1\ns3,0,0,0\n";
        let t = load_table(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.columns().len(), 4);
        assert_eq!(t.label_of("s2"), Some(1));
    }

    #[test]
    fn na_is_missing() {
        let csv = "id,a,b,dx\ns1,NA,2,0\ns2,nan,,1\n";
        let t = load_table(csv.as_bytes(), &schema()).unwrap();
        assert!(t.rows()[0].cells[1].is_missing());
        assert!(!t.rows()[0].cells[2].is_missing());
        assert!(t.rows()[1].cells[1].is_missing());
        assert!(t.rows()[1].cells[2].is_missing());
    }

    #[test]
    fn reordered_header_is_schema_mismatch() {
        let csv = "id,b,a,dx\ns1,1,2,0\n";
        let err = load_table(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, TableError::SchemaMismatch { .. }));
    }

    #[test]
    fn bad_cell_reports_position() {
        let csv = "id,a,b,dx\ns1,1,2,0\ns2,x,2,0\n";
        match load_table(csv.as_bytes(), &schema()).unwrap_err() {
            TableError::BadCell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            e => panic!("unexpected {e:?}"),
        }
        let csv = "id,a,b,dx\ns1,1,2,2\n";
        assert!(matches!(
            load_table(csv.as_bytes(), &schema()),
            Err(TableError::BadCell { .. })
        ));
    }

    #[test]
    fn duplicate_subject_rejected() {
        let csv = "id,a,b,dx\ns1,1,2,0\ns1,3,4,1\n";
        assert!(matches!(
            load_table(csv.as_bytes(), &schema()),
            Err(TableError::DuplicateSubject(id)) if id == "s1"
        ));
    }

    #[test]
    fn canonical_order_puts_covariates_first_label_last() {
        let schema = Schema::new(vec![
            ColumnSpec::label("dx"),
            ColumnSpec::numeric("roi"),
            ColumnSpec::covariate("age", ColumnKind::Numeric { unit: None }),
            ColumnSpec::identifier("id"),
        ])
        .unwrap();
        let t = load_table("dx,roi,age,id\n1,2.5,70,s1\n".as_bytes(), &schema).unwrap();
        let names: Vec<_> = t.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["id", "age", "roi", "dx"]);
        assert_eq!(t.rows()[0].cells[1].number(), Some(70.0));
    }

    #[test]
    fn schema_requires_single_label() {
        let err = Schema::new(vec![ColumnSpec::identifier("id"), ColumnSpec::numeric("a")]);
        assert!(matches!(err, Err(TableError::InvalidSchema(_))));
        let mut cov_label = ColumnSpec::label("dx");
        cov_label.is_covariate = true;
        let err = Schema::new(vec![ColumnSpec::identifier("id"), cov_label]);
        assert!(matches!(err, Err(TableError::InvalidSchema(_))));
    }

    #[test]
    fn filter_complete_cases() {
        let csv = "id,a,b,dx\ns1,1,2,0\ns2,NA,2,0\ns3,1,2,1\ns4,1,,1\ns5,1,2,0\n";
        let t = load_table(csv.as_bytes(), &schema()).unwrap();
        let c = filter_complete(&t);
        let ids: Vec<_> = c.rows().iter().map(|r| r.subject_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s3", "s5"]);
        assert_eq!(filter_complete(&c), c);

        let all_missing = "id,a,b,dx\ns1,NA,2,0\ns2,1,NA,1\n";
        let t = load_table(all_missing.as_bytes(), &schema()).unwrap();
        assert!(filter_complete(&t).is_empty());
    }

    #[test]
    fn select_columns_keeps_covariates_id_label() {
        let mut cols = vec![ColumnSpec::identifier("id")];
        for cov in ["apoe4", "age", "sex", "education"] {
            cols.push(ColumnSpec::covariate(cov, ColumnKind::Numeric { unit: None }));
        }
        let mut header = vec!["id".to_string(), "apoe4".into(), "age".into(), "sex".into(), "education".into()];
        for j in 0..73 {
            let name = format!("roi_{j}");
            cols.push(ColumnSpec::numeric(&name));
            header.push(name);
        }
        cols.push(ColumnSpec::numeric("hippocampus"));
        header.push("hippocampus".into());
        cols.push(ColumnSpec::label("dx"));
        header.push("dx".into());
        let schema = Schema::new(cols).unwrap();
        let mut row = vec!["s1".to_string()];
        row.extend((0..78).map(|j| j.to_string()));
        row.push("1".into());
        let csv = format!("{}\n{}\n", header.join(","), row.join(","));
        let t = load_table(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t.feature_names().len(), 74);

        let s = select_columns(&t, &["hippocampus".to_string()]).unwrap();
        assert_eq!(s.columns().len(), 1 + 4 + 1 + 1);
        assert_eq!(s.label_of("s1"), Some(1));
        assert_eq!(s.rows()[0].cells[5].number(), Some(77.0));

        let all = select_columns(&t, &t.feature_names()).unwrap();
        assert_eq!(all, t);

        assert!(matches!(
            select_columns(&t, &["no_such_roi".to_string()]),
            Err(TableError::UnknownColumn(_))
        ));
    }

    #[test]
    fn missing_fraction_counts_feature_cells_only() {
        let mut cols = vec![ColumnSpec::identifier("id")];
        let mut vals = vec!["s1".to_string()];
        for j in 0..20 {
            cols.push(ColumnSpec::numeric(&format!("f{j}")));
            vals.push(if j < 5 { "NA".into() } else { "1".into() });
        }
        cols.push(ColumnSpec::label("dx"));
        vals.push("NA".into());
        let header: Vec<_> = cols.iter().map(|c| c.name.clone()).collect();
        let schema = Schema::new(cols).unwrap();
        let csv = format!("{}\n{}\n", header.join(","), vals.join(","));
        let t = load_table(csv.as_bytes(), &schema).unwrap();
        assert_eq!(missing_fraction(&t.rows()[0], &t), 0.25);
    }

    #[test]
    fn missing_fraction_extremes() {
        let csv = "id,a,b,dx\ns1,1,2,0\ns2,NA,NA,1\n";
        let t = load_table(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(missing_fraction(&t.rows()[0], &t), 0.0);
        assert_eq!(missing_fraction(&t.rows()[1], &t), 1.0);
    }

    #[test]
    fn number_format() {
        assert_eq!(format_number(3541.2), "3541.2");
        assert_eq!(format_number(1201.0), "1201");
        assert_eq!(format_number(0.123456), "0.1235");
        assert_eq!(format_number(-0.00001), "0");
        assert_eq!(format_number(-2.5), "-2.5");
        assert_eq!(format_number(72.0), "72");
    }

    #[test]
    fn write_then_load_round_trips() {
        let csv = "id,a,b,dx\ns1,1.50000,2,0\ns2,NA,4.123456,1\n";
        let t = load_table(csv.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_table(&t, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "id,a,b,dx\ns1,1.5,2,0\ns2,NA,4.1235,1\n"
        );
        let again = load_table(buf.as_slice(), &schema()).unwrap();
        let mut buf2 = Vec::new();
        write_table(&again, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
