//! Feature ranking (LASSO path entry order or an imported ranking) and top-p
//! selection with covariates always kept.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lasso::{column_stats, lasso_path, LassoPath, PathConfig};
use crate::table::{ColumnRole, FeatureTable};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("training labels are degenerate ({zeros} negatives, {ones} positives); need at least 2 of each")]
    DegenerateLabels { zeros: usize, ones: usize },
    #[error("table has no rankable features")]
    EmptyFeatureSet,
    #[error("p = {p} exceeds the {available} ranked features")]
    PTooLarge { p: usize, available: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{feature}` has score {score} outside [0, 1]")]
    ScoreOutOfRange { feature: String, score: f64 },
    #[error("feature `{0}` is ranked more than once")]
    DuplicateFeature(String),
    #[error("ranking document: {0}")]
    BadDocument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    LassoPath,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub feature: String,
    pub score: f64,
    /// Canonical column index in the table the ranking was built from.
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedFeatures {
    pub entries: Vec<RankedEntry>,
    pub method: RankMethod,
    pub train_fingerprint: String,
}

impl RankedFeatures {
    fn sorted(mut entries: Vec<RankedEntry>, method: RankMethod, train_fingerprint: String) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are never NaN")
                .then(a.column.cmp(&b.column))
        });
        RankedFeatures {
            entries,
            method,
            train_fingerprint,
        }
    }

    /// `feature,score` CSV, the same layout [`import_external_ranking`] reads.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,score\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.feature, e.score));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub p: usize,
    pub selected: Vec<String>,
    pub always_included: Vec<String>,
    pub method: RankMethod,
    pub train_fingerprint: String,
}

impl FeatureSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature set serializes")
    }
}

/// SHA-256 over the newline-joined ids, hex encoded.
pub fn fingerprint_ids<S: AsRef<str>>(ids: &[S]) -> String {
    let mut h = Sha256::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(id.as_ref().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Ranks non-covariate features of `train` by the penalty at which they enter
/// the LASSO path fitted to the 0/1 label. Zero-variance features score
/// negative infinity; features that never enter score 0.
pub fn lasso_path_rank(train: &FeatureTable) -> Result<RankedFeatures, SelectError> {
    let (ranked, _) = lasso_path_rank_with(train, &PathConfig::default())?;
    Ok(ranked)
}

pub fn lasso_path_rank_with(
    train: &FeatureTable,
    cfg: &PathConfig,
) -> Result<(RankedFeatures, LassoPath), SelectError> {
    let feature_cols: Vec<usize> = train
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role() == ColumnRole::Feature)
        .map(|(j, _)| j)
        .collect();
    if feature_cols.is_empty() {
        return Err(SelectError::EmptyFeatureSet);
    }
    let rows: Vec<_> = train
        .rows()
        .iter()
        .filter_map(|r| train.label(r).map(|y| (r, y as f64)))
        .collect();
    let ones = rows.iter().filter(|(_, y)| *y == 1.0).count();
    let zeros = rows.len() - ones;
    if ones < 2 || zeros < 2 {
        return Err(SelectError::DegenerateLabels { zeros, ones });
    }
    let y: Vec<f64> = rows.iter().map(|(_, y)| *y).collect();

    // Standardize with statistics over present cells; missing cells sit at
    // the column mean (zero after scaling) and so drop out of every update.
    let mut z = Vec::with_capacity(feature_cols.len());
    let mut constant = Vec::with_capacity(feature_cols.len());
    for &j in &feature_cols {
        let raw: Vec<Option<f64>> = rows.iter().map(|(r, _)| r.cells[j].number()).collect();
        let present: Vec<f64> = raw.iter().flatten().copied().collect();
        let (mean, sd) = if present.is_empty() {
            (0.0, 0.0)
        } else {
            column_stats(&[present])[0]
        };
        constant.push(sd == 0.0);
        z.push(
            raw.iter()
                .map(|v| match v {
                    Some(x) if sd > 0.0 => (x - mean) / sd,
                    _ => 0.0,
                })
                .collect::<Vec<f64>>(),
        );
    }

    let path = lasso_path(&z, &y, cfg);
    let entries = path
        .entry_points()
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let score = if constant[i] {
                f64::NEG_INFINITY
            } else {
                entry.map_or(0.0, |e| path.lambdas[e])
            };
            RankedEntry {
                feature: train.columns()[feature_cols[i]].name.clone(),
                score,
                column: feature_cols[i],
            }
        })
        .collect();
    let ids: Vec<&str> = rows.iter().map(|(r, _)| r.subject_id.as_str()).collect();
    Ok((
        RankedFeatures::sorted(entries, RankMethod::LassoPath, fingerprint_ids(&ids)),
        path,
    ))
}

/// First `p` ranked features plus the covariates verbatim.
pub fn select_top_p(
    ranked: &RankedFeatures,
    p: usize,
    covariates: &[String],
) -> Result<FeatureSet, SelectError> {
    if p > ranked.entries.len() {
        return Err(SelectError::PTooLarge {
            p,
            available: ranked.entries.len(),
        });
    }
    Ok(FeatureSet {
        p,
        selected: ranked.entries[..p].iter().map(|e| e.feature.clone()).collect(),
        always_included: covariates.to_vec(),
        method: ranked.method,
        train_fingerprint: ranked.train_fingerprint.clone(),
    })
}

/// Reads a `feature,score` CSV with scores in [0, 1]. Names must be
/// non-covariate features of `table`.
pub fn import_external_ranking<R: Read>(
    document: R,
    table: &FeatureTable,
) -> Result<RankedFeatures, SelectError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(document);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["feature", "score"] {
        return Err(SelectError::BadDocument(format!(
            "expected header `feature,score`, found {header:?}"
        )));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let name = record[0].trim().to_string();
        let column = table
            .column_index(&name)
            .filter(|&j| table.columns()[j].role() == ColumnRole::Feature)
            .ok_or_else(|| SelectError::UnknownFeature(name.clone()))?;
        let score: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| SelectError::BadDocument(format!("bad score {:?}", &record[1])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(SelectError::ScoreOutOfRange {
                feature: name,
                score,
            });
        }
        if !seen.insert(name.clone()) {
            return Err(SelectError::DuplicateFeature(name));
        }
        entries.push(RankedEntry {
            feature: name,
            score,
            column,
        });
    }
    Ok(RankedFeatures::sorted(
        entries,
        RankMethod::External,
        String::new(),
    ))
}
