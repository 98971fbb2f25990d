//! MCAR masking and target-level missingness strata.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{missing_fraction, Cell, FeatureTable, SubjectRow, TableError};

#[derive(Debug, Error)]
pub enum MissingError {
    #[error("mask rate {0} is outside [0, 1]")]
    BadRate(f64),
    #[error("bin edges must start at 0, end at 1 and strictly increase: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("mask plan refers to unknown cell ({subject}, {column})")]
    BadPlan { subject: String, column: String },
    #[error("pool fraction {0} is outside (0, 1)")]
    BadPoolFraction(f64),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    WholeTable,
    /// Only the listed target rows; context examples keep their values.
    TargetsOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskedCell {
    pub subject_id: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub rate: f64,
    pub seed: u64,
    pub scope: MaskScope,
    pub eligible: usize,
    /// Sorted by table row, then column.
    pub cells: Vec<MaskedCell>,
}

impl MaskPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// `round(rate * eligible)`, half away from zero.
pub fn mask_count(rate: f64, eligible: usize) -> usize {
    (rate * eligible as f64).round() as usize
}

/// Masks exactly `round(rate * eligible)` covariate/feature cells chosen
/// uniformly with a seeded shuffle. Ids and labels are never touched.
pub fn mask_mcar(table: &FeatureTable, rate: f64, seed: u64) -> Result<(FeatureTable, MaskPlan), MissingError> {
    mask_rows(table, rate, seed, MaskScope::WholeTable, None)
}

/// As [`mask_mcar`], restricted to the given target rows.
pub fn mask_mcar_targets(
    table: &FeatureTable,
    rate: f64,
    seed: u64,
    targets: &[String],
) -> Result<(FeatureTable, MaskPlan), MissingError> {
    let set: HashSet<&str> = targets.iter().map(String::as_str).collect();
    mask_rows(table, rate, seed, MaskScope::TargetsOnly, Some(&set))
}

fn mask_rows(
    table: &FeatureTable,
    rate: f64,
    seed: u64,
    scope: MaskScope,
    only: Option<&HashSet<&str>>,
) -> Result<(FeatureTable, MaskPlan), MissingError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MissingError::BadRate(rate));
    }
    let cols = table.feature_indices();
    let mut coords: Vec<(usize, usize)> = table
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| only.is_none_or(|s| s.contains(r.subject_id.as_str())))
        .flat_map(|(i, _)| cols.clone().map(move |j| (i, j)))
        .collect();
    let eligible = coords.len();
    let m = mask_count(rate, eligible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let mut chosen = coords[..m].to_vec();
    chosen.sort_unstable();

    let mut rows: Vec<SubjectRow> = table.rows().to_vec();
    for &(i, j) in &chosen {
        rows[i].cells[j] = Cell::Missing;
    }
    let cells = chosen
        .iter()
        .map(|&(i, j)| MaskedCell {
            subject_id: rows[i].subject_id.clone(),
            column: table.columns()[j].name.clone(),
        })
        .collect();
    let plan = MaskPlan {
        rate,
        seed,
        scope,
        eligible,
        cells,
    };
    Ok((table.replace_rows(rows)?, plan))
}

/// Replays a persisted plan.
pub fn apply_plan(table: &FeatureTable, plan: &MaskPlan) -> Result<FeatureTable, MissingError> {
    let features = table.feature_indices();
    let mut rows: Vec<SubjectRow> = table.rows().to_vec();
    for c in &plan.cells {
        let bad = || MissingError::BadPlan {
            subject: c.subject_id.clone(),
            column: c.column.clone(),
        };
        let i = rows.iter().position(|r| r.subject_id == c.subject_id).ok_or_else(bad)?;
        let j = table
            .column_index(&c.column)
            .filter(|j| features.contains(j))
            .ok_or_else(bad)?;
        rows[i].cells[j] = Cell::Missing;
    }
    Ok(table.replace_rows(rows)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessStrata {
    pub edges: Vec<f64>,
    /// One list of target ids per bin, in input order.
    pub bins: Vec<Vec<String>>,
    pub pool_mean_missingness: Option<f64>,
}

fn check_edges(edges: &[f64]) -> Result<(), MissingError> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MissingError::BadEdges(edges.to_vec()))
    }
}

/// Index of the bin holding `fraction`: `[e_i, e_{i+1})`, last bin closed.
pub fn bin_index(edges: &[f64], fraction: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last)
        .find(|&i| fraction >= edges[i] && fraction < edges[i + 1])
        .unwrap_or(last)
}

/// Mean of per-row missing fractions; `None` for an empty pool.
pub fn mean_missingness(rows: &[SubjectRow], table: &FeatureTable) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    Some(rows.iter().map(|r| missing_fraction(r, table)).sum::<f64>() / rows.len() as f64)
}

/// Groups targets by their own missing fraction.
pub fn bin_by_target_missingness(
    targets: &[SubjectRow],
    pool: &[SubjectRow],
    table: &FeatureTable,
    edges: &[f64],
) -> Result<MissingnessStrata, MissingError> {
    check_edges(edges)?;
    let mut bins = vec![Vec::new(); edges.len() - 1];
    for t in targets {
        bins[bin_index(edges, missing_fraction(t, table))].push(t.subject_id.clone());
    }
    Ok(MissingnessStrata {
        edges: edges.to_vec(),
        bins,
        pool_mean_missingness: mean_missingness(pool, table),
    })
}

/// Natural-missingness protocol: a seeded `round(pool_fraction * n)` subset of
/// the incomplete cohort becomes the shared ICL pool, the rest are targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSplit {
    pub seed: u64,
    pub pool: Vec<String>,
    pub targets: Vec<String>,
}

pub fn natural_split(table: &FeatureTable, pool_fraction: f64, seed: u64) -> Result<NaturalSplit, MissingError> {
    if !(pool_fraction > 0.0 && pool_fraction < 1.0) {
        return Err(MissingError::BadPoolFraction(pool_fraction));
    }
    let mut ids: Vec<String> = table.rows().iter().map(|r| r.subject_id.clone()).collect();
    let n_pool = mask_count(pool_fraction, ids.len());
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool: HashSet<&String> = ids[..n_pool].iter().collect();
    let in_order = |want: bool| {
        table
            .rows()
            .iter()
            .filter(|r| pool.contains(&r.subject_id) == want)
            .map(|r| r.subject_id.clone())
            .collect::<Vec<_>>()
    };
    Ok(NaturalSplit {
        seed,
        pool: in_order(true),
        targets: in_order(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::ColumnSpec;

    fn grid(rows: usize, feats: usize) -> FeatureTable {
        let mut cols = vec![ColumnSpec::identifier("id")];
        cols.extend((0..feats).map(|j| ColumnSpec::numeric(&format!("f{j}"))));
        cols.push(ColumnSpec::label("dx"));
        let rows = (0..rows)
            .map(|i| {
                let mut cells = vec![Cell::text_cell(&format!("s{i}"))];
                cells.extend((0..feats).map(|j| Cell::number_cell((i * feats + j) as f64)));
                cells.push(Cell::number_cell((i % 2) as f64));
                SubjectRow {
                    subject_id: format!("s{i}"),
                    cells,
                }
            })
            .collect();
        FeatureTable::new(cols, rows).unwrap()
    }

    fn count_missing(t: &FeatureTable) -> usize {
        t.rows().iter().flat_map(|r| &r.cells).filter(|c| c.is_missing()).count()
    }

    #[test]
    fn exact_counts() {
        let t = grid(4, 5);
        let (same, plan) = mask_mcar(&t, 0.0, 1).unwrap();
        assert_eq!(same, t);
        assert!(plan.cells.is_empty());
        let (half, plan) = mask_mcar(&t, 0.5, 1).unwrap();
        assert_eq!(plan.cells.len(), 10);
        assert_eq!(count_missing(&half), 10);
        let (all, _) = mask_mcar(&t, 1.0, 1).unwrap();
        assert_eq!(count_missing(&all), 20);
        for r in all.rows() {
            assert!(!r.cells[0].is_missing());
            assert!(!r.cells[all.label_index()].is_missing());
        }
        assert!(matches!(mask_mcar(&t, 1.5, 1), Err(MissingError::BadRate(_))));
    }

    #[test]
    fn plan_replays() {
        let t = grid(6, 4);
        let (masked, plan) = mask_mcar(&t, 0.3, 9).unwrap();
        let back = MaskPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(apply_plan(&t, &back).unwrap(), masked);
    }

    #[test]
    fn targets_only_scope() {
        let t = grid(6, 4);
        let targets = vec!["s1".to_string(), "s4".to_string()];
        let (masked, plan) = mask_mcar_targets(&t, 1.0, 3, &targets).unwrap();
        assert_eq!(plan.eligible, 8);
        for r in masked.rows() {
            let n = r.cells.iter().filter(|c| c.is_missing()).count();
            assert_eq!(n, if targets.contains(&r.subject_id) { 4 } else { 0 });
        }
    }

    #[test]
    fn bin_boundaries() {
        let edges = [0.0, 0.25, 0.5, 1.0];
        assert_eq!(bin_index(&edges, 0.0), 0);
        assert_eq!(bin_index(&edges, 0.25), 1);
        assert_eq!(bin_index(&edges, 0.49), 1);
        assert_eq!(bin_index(&edges, 1.0), 2);
        let t = grid(2, 4);
        for bad in [&[0.0, 0.5][..], &[0.1, 1.0], &[0.0, 0.5, 0.5, 1.0], &[0.0]] {
            assert!(matches!(
                bin_by_target_missingness(t.rows(), &[], &t, bad),
                Err(MissingError::BadEdges(_))
            ));
        }
    }

    #[test]
    fn strata_and_pool_mean() {
        let t = grid(4, 4);
        let mut rows = t.rows().to_vec();
        rows[0].cells[1] = Cell::Missing;
        rows[1].cells[1] = Cell::Missing;
        rows[1].cells[2] = Cell::Missing;
        rows[2].cells[1..5].fill(Cell::Missing);
        let t = t.replace_rows(rows).unwrap();
        let s = bin_by_target_missingness(&t.rows()[..3], &t.rows()[1..], &t, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(s.bins, vec![vec![] as Vec<String>, vec!["s0".to_string()], vec!["s1".into(), "s2".into()]]);
        // (0.5 + 1.0 + 0.0) / 3
        assert_eq!(s.pool_mean_missingness, Some(0.5));
    }

    #[test]
    fn natural_split_sizes() {
        let t = grid(10, 2);
        let s = natural_split(&t, 0.2, 36).unwrap();
        assert_eq!(s.pool.len(), 2);
        assert_eq!(s.targets.len(), 8);
        assert_eq!(natural_split(&t, 0.2, 36).unwrap(), s);
    }
}
