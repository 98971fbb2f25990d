//! Seeded synthetic cohorts shaped like the imaging and biomarker tables the
//! harness targets. Every value carries at most two decimals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::table::{Cell, ColumnKind, ColumnSpec, FeatureTable, SubjectRow};

const CORTICAL: [&str; 34] = [
    "bankssts",
    "caudalanteriorcingulate",
    "caudalmiddlefrontal",
    "cuneus",
    "entorhinal",
    "fusiform",
    "inferiorparietal",
    "inferiortemporal",
    "isthmuscingulate",
    "lateraloccipital",
    "lateralorbitofrontal",
    "lingual",
    "medialorbitofrontal",
    "middletemporal",
    "parahippocampal",
    "paracentral",
    "parsopercularis",
    "parsorbitalis",
    "parstriangularis",
    "pericalcarine",
    "postcentral",
    "posteriorcingulate",
    "precentral",
    "precuneus",
    "rostralanteriorcingulate",
    "rostralmiddlefrontal",
    "superiorfrontal",
    "superiorparietal",
    "superiortemporal",
    "supramarginal",
    "frontalpole",
    "temporalpole",
    "transversetemporal",
    "insula",
];

const SUBCORTICAL: [&str; 3] = ["hippocampus", "amygdala", "lateralventricle"];

/// Regions that shrink (or, for ventricles, grow) with disease.
const AFFECTED: [&str; 8] = [
    "entorhinal",
    "hippocampus",
    "amygdala",
    "parahippocampal",
    "inferiortemporal",
    "middletemporal",
    "fusiform",
    "lateralventricle",
];

/// The 74 regional feature names, left hemisphere first.
pub fn roi_names() -> Vec<String> {
    ["lh", "rh"]
        .iter()
        .flat_map(|h| {
            CORTICAL
                .iter()
                .chain(SUBCORTICAL.iter())
                .map(move |r| format!("{h}_{r}"))
        })
        .collect()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

fn covariate_columns() -> Vec<ColumnSpec> {
    vec![
        ColumnSpec::covariate("age", ColumnKind::Numeric { unit: Some("years".into()) }),
        ColumnSpec::covariate(
            "sex",
            ColumnKind::Categorical {
                levels: vec!["M".into(), "F".into()],
            },
        ),
        ColumnSpec::covariate("education", ColumnKind::Count),
        ColumnSpec::covariate("apoe4", ColumnKind::Count),
    ]
}

fn labels(n: usize, n_pos: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|i| (i < n_pos) as u8).collect();
    y.shuffle(rng);
    y
}

fn covariate_cells(label: u8, rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let age: Normal<f64> = Normal::new(if label == 1 { 75.0 } else { 72.0 }, 6.5).expect("valid normal");
    let apoe_p = if label == 1 { 0.45 } else { 0.15 };
    let apoe4 = (0..2).filter(|_| rng.gen_bool(apoe_p)).count();
    vec![
        Cell::number_cell(round_to(age.sample(rng).clamp(55.0, 95.0), 1)),
        Cell::text_cell(if rng.gen_bool(0.5) { "M" } else { "F" }),
        Cell::number_cell(rng.gen_range(8..=20) as f64),
        Cell::number_cell(apoe4 as f64),
    ]
}

fn assemble(columns: Vec<ColumnSpec>, mut bodies: Vec<(u8, Vec<Cell>)>, prefix: &str) -> FeatureTable {
    let rows = bodies
        .drain(..)
        .enumerate()
        .map(|(i, (label, mut cells))| {
            let id = format!("{prefix}{:04}", i + 1);
            cells.insert(0, Cell::text_cell(&id));
            cells.push(Cell::number_cell(label as f64));
            SubjectRow { subject_id: id, cells }
        })
        .collect();
    FeatureTable::new(columns, rows).expect("synthetic table is valid")
}

/// Imaging-style cohort: id, 4 covariates, 74 regional volumes, label.
/// Exactly `n_pos` subjects are positive.
pub fn imaging_cohort(n: usize, n_pos: usize, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = roi_names();
    let mut columns = vec![ColumnSpec::identifier("subject_id")];
    columns.extend(covariate_columns());
    columns.extend(names.iter().map(|n| ColumnSpec {
        name: n.clone(),
        kind: ColumnKind::Numeric { unit: Some("mm3".into()) },
        is_covariate: false,
        is_label: false,
    }));
    columns.push(ColumnSpec::label("diagnosis"));

    let base: Vec<(f64, f64, f64)> = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let region = name.split_once('_').map(|(_, r)| r).unwrap_or(name);
            let mean = 1500.0 + 250.0 * (j % 17) as f64;
            let effect = match (AFFECTED.contains(&region), region) {
                (true, "lateralventricle") => 0.18,
                (true, _) => -0.12,
                _ => 0.0,
            };
            (mean, 0.08 * mean, effect * mean)
        })
        .collect();

    let bodies = labels(n, n_pos, &mut rng)
        .into_iter()
        .map(|label| {
            let mut cells = covariate_cells(label, &mut rng);
            for &(mean, sd, effect) in &base {
                let d = Normal::new(mean + effect * label as f64, sd).expect("valid normal");
                cells.push(Cell::number_cell(round_to(d.sample(&mut rng).max(1.0), 1)));
            }
            (label, cells)
        })
        .collect();
    assemble(columns, bodies, "S")
}

/// The 333-subject imaging cohort with 96 positives.
pub fn default_imaging_cohort(seed: u64) -> FeatureTable {
    imaging_cohort(333, 96, seed)
}

/// Biomarker-style cohort covered by the builtin narrative template:
/// covariates plus abeta, tau, ptau, hippocampus and mmse.
pub fn biomarker_cohort(n: usize, n_pos: usize, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![ColumnSpec::identifier("subject_id")];
    columns.extend(covariate_columns());
    for (name, unit) in [
        ("abeta", Some("pg/mL")),
        ("tau", Some("pg/mL")),
        ("ptau", Some("pg/mL")),
        ("hippocampus", Some("mm3")),
    ] {
        columns.push(ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Numeric { unit: unit.map(String::from) },
            is_covariate: false,
            is_label: false,
        });
    }
    columns.push(ColumnSpec {
        name: "mmse".into(),
        kind: ColumnKind::Count,
        is_covariate: false,
        is_label: false,
    });
    columns.push(ColumnSpec::label("diagnosis"));

    let bodies = labels(n, n_pos, &mut rng)
        .into_iter()
        .map(|label| {
            let ad = label == 1;
            let mut cells = covariate_cells(label, &mut rng);
            let draw = |rng: &mut ChaCha8Rng, m: f64, s: f64, lo: f64| {
                round_to(Normal::new(m, s).expect("valid normal").sample(rng).max(lo), 2)
            };
            cells.push(Cell::number_cell(draw(&mut rng, if ad { 650.0 } else { 1150.0 }, 220.0, 150.0)));
            cells.push(Cell::number_cell(draw(&mut rng, if ad { 340.0 } else { 230.0 }, 80.0, 50.0)));
            cells.push(Cell::number_cell(draw(&mut rng, if ad { 33.0 } else { 21.0 }, 8.0, 5.0)));
            cells.push(Cell::number_cell(draw(&mut rng, if ad { 5900.0 } else { 7300.0 }, 800.0, 2000.0)));
            let mmse = if ad { rng.gen_range(18..=26) } else { rng.gen_range(26..=30) };
            cells.push(Cell::number_cell(mmse as f64));
            (label, cells)
        })
        .collect();
    assemble(columns, bodies, "B")
}

/// Blanks a per-row random share (uniform in `[0, max_fraction]`) of each
/// row's covariate and feature cells, leaving at least one cell missing.
pub fn with_natural_missingness(table: &FeatureTable, max_fraction: f64, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<usize> = table.feature_indices().collect();
    let rows = table
        .rows()
        .iter()
        .map(|r| {
            let mut row = r.clone();
            let share = rng.gen_range(0.0..=max_fraction);
            let m = ((share * cols.len() as f64).round() as usize).clamp(1, cols.len());
            for &j in cols.choose_multiple(&mut rng, m) {
                row.cells[j] = Cell::Missing;
            }
            row
        })
        .collect();
    table.replace_rows(rows).expect("same schema")
}

/// Columns `x` (n × d, column-major) and response `y = Σ coef·x_j + σ·ε` with
/// `support` planted features.
pub struct PlantedRegression {
    pub columns: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub support: Vec<usize>,
}

pub fn planted_regression(n: usize, d: usize, k: usize, coef: f64, sigma: f64, seed: u64) -> PlantedRegression {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let columns: Vec<Vec<f64>> = (0..d).map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(&mut rng);
    let mut support = idx[..k].to_vec();
    support.sort_unstable();
    let signs: Vec<f64> = support.iter().map(|_| if rng.gen_bool(0.5) { coef } else { -coef }).collect();
    let y = (0..n)
        .map(|i| {
            support.iter().zip(&signs).map(|(&j, b)| b * columns[j][i]).sum::<f64>()
                + sigma * normal.sample(&mut rng)
        })
        .collect();
    PlantedRegression { columns, y, support }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imaging_shape() {
        let t = default_imaging_cohort(1);
        assert_eq!(t.len(), 333);
        assert_eq!(t.columns().len(), 1 + 4 + 74 + 1);
        assert_eq!(t.covariate_names().len(), 4);
        assert_eq!(t.feature_names().len(), 74);
        let pos = t.rows().iter().filter(|r| t.label(r) == Some(1)).count();
        assert_eq!(pos, 96);
        assert_eq!(default_imaging_cohort(1), t);
    }

    #[test]
    fn biomarker_covered_by_narrative() {
        let t = biomarker_cohort(40, 12, 3);
        crate::prompt::SerializationTemplate::builtin_narrative()
            .check_coverage(&t)
            .unwrap();
    }

    #[test]
    fn natural_missingness_every_row() {
        let t = with_natural_missingness(&biomarker_cohort(30, 10, 3), 0.5, 8);
        assert!(t
            .rows()
            .iter()
            .all(|r| r.cells[t.feature_indices()].iter().any(Cell::is_missing)));
    }
}
