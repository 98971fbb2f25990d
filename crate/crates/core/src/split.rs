//! Seeded cohort partitioning and per-target context sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::FeatureTable;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("cohort has {0} subjects, at least 6 are required")]
    TooFewSubjects(usize),
    #[error("split fractions must be nonnegative and sum to 1 (sum = {0})")]
    BadFractions(f64),
    #[error("subject `{0}` has no label")]
    MissingLabel(String),
    #[error("pool has {pool} subjects, cannot draw {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("target `{0}` is a member of its own context pool")]
    TargetInPool(String),
    #[error("split assignment is invalid: {0}")]
    InvalidAssignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
    PoolTrain,
    PoolVal,
    PoolTest,
}

impl Partition {
    /// Declared order; also the tie-break order for rounding.
    pub const ALL: [Partition; 6] = [
        Partition::Train,
        Partition::Val,
        Partition::Test,
        Partition::PoolTrain,
        Partition::PoolVal,
        Partition::PoolTest,
    ];

    /// The ICL pool serving targets of this partition. Pools have none.
    pub fn pool(self) -> Option<Partition> {
        match self {
            Partition::Train => Some(Partition::PoolTrain),
            Partition::Val => Some(Partition::PoolVal),
            Partition::Test => Some(Partition::PoolTest),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::PoolTrain => "pool_train",
            Partition::PoolVal => "pool_val",
            Partition::PoolTest => "pool_test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub pool_train: f64,
    pub pool_val: f64,
    pub pool_test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.40,
            val: 0.10,
            test: 0.20,
            pool_train: 0.10,
            pool_val: 0.10,
            pool_test: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.train,
            self.val,
            self.test,
            self.pool_train,
            self.pool_val,
            self.pool_test,
        ]
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let a = self.as_array();
        let sum: f64 = a.iter().sum();
        if a.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SplitError::BadFractions(sum));
        }
        Ok(())
    }

    /// Partition sizes for a cohort of `n` by largest-remainder rounding.
    pub fn sizes(&self, n: usize) -> [usize; 6] {
        let a = self.as_array();
        let total: f64 = a.iter().sum();
        let weights: Vec<f64> = a.iter().map(|f| f / total).collect();
        let v = largest_remainder(n, &weights);
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }
}

/// Hamilton apportionment of `seats` by `weights` (which sum to 1). Remainder
/// ties go to the earlier weight.
pub fn largest_remainder(seats: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * seats as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        if (ri - rj).abs() <= 1e-9 {
            i.cmp(&j)
        } else {
            rj.partial_cmp(&ri).expect("finite remainders")
        }
    });
    for &i in order.iter().take(seats.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: SplitFractions,
    #[serde(default = "stratified_default")]
    pub stratified: bool,
    pub partitions: BTreeMap<Partition, Vec<String>>,
}

fn stratified_default() -> bool {
    true
}

impl SplitAssignment {
    pub fn ids(&self, part: Partition) -> &[String] {
        self.partitions.get(&part).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        Partition::ALL
            .into_iter()
            .find(|p| self.ids(*p).iter().any(|x| x == id))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("assignment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Checks disjointness, exhaustiveness over `table`, and partition sizes.
    pub fn verify(&self, table: &FeatureTable) -> Result<(), SplitError> {
        let mut seen = std::collections::HashSet::new();
        for part in Partition::ALL {
            for id in self.ids(part) {
                if !seen.insert(id.as_str()) {
                    return Err(SplitError::InvalidAssignment(format!(
                        "`{id}` appears in more than one partition"
                    )));
                }
                if table.row(id).is_none() {
                    return Err(SplitError::InvalidAssignment(format!(
                        "`{id}` is not in the cohort"
                    )));
                }
            }
        }
        if seen.len() != table.len() {
            return Err(SplitError::InvalidAssignment(format!(
                "{} of {} subjects assigned",
                seen.len(),
                table.len()
            )));
        }
        let sizes = self.fractions.sizes(table.len());
        for (part, want) in Partition::ALL.into_iter().zip(sizes) {
            if self.ids(part).len() != want {
                return Err(SplitError::InvalidAssignment(format!(
                    "{} has {} subjects, expected {want}",
                    part.name(),
                    self.ids(part).len()
                )));
            }
        }
        Ok(())
    }
}

/// Partitions the cohort. With `stratified`, each class is apportioned across
/// partitions separately so per-partition class counts are within one subject
/// of proportional. Partition lists keep the table's row order.
pub fn make_splits(
    table: &FeatureTable,
    fractions: SplitFractions,
    seed: u64,
    stratified: bool,
) -> Result<SplitAssignment, SplitError> {
    fractions.validate()?;
    let n = table.len();
    if n < 6 {
        return Err(SplitError::TooFewSubjects(n));
    }
    let sizes = fractions.sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slot: Vec<Option<Partition>> = vec![None; n];

    if stratified {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, row) in table.rows().iter().enumerate() {
            let y = table
                .label(row)
                .ok_or_else(|| SplitError::MissingLabel(row.subject_id.clone()))?;
            by_class[y as usize].push(i);
        }
        let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
        let positive_quota = largest_remainder(by_class[1].len(), &weights);
        for (class, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng);
            let mut cursor = 0;
            for (p, part) in Partition::ALL.into_iter().enumerate() {
                let take = if class == 1 {
                    positive_quota[p]
                } else {
                    sizes[p] - positive_quota[p]
                };
                for &i in &members[cursor..cursor + take] {
                    slot[i] = Some(part);
                }
                cursor += take;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for (p, part) in Partition::ALL.into_iter().enumerate() {
            for &i in &order[cursor..cursor + sizes[p]] {
                slot[i] = Some(part);
            }
            cursor += sizes[p];
        }
    }

    let mut partitions: BTreeMap<Partition, Vec<String>> =
        Partition::ALL.into_iter().map(|p| (p, Vec::new())).collect();
    for (i, row) in table.rows().iter().enumerate() {
        let part = slot[i].expect("every subject is assigned");
        partitions.get_mut(&part).unwrap().push(row.subject_id.clone());
    }
    Ok(SplitAssignment {
        seed,
        fractions,
        stratified,
        partitions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextExample {
    pub subject_id: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub target_id: String,
    pub examples: Vec<ContextExample>,
    pub k: usize,
    pub source_pool: String,
}

impl ContextSet {
    pub fn empty(target_id: &str) -> Self {
        ContextSet {
            target_id: target_id.to_string(),
            examples: Vec::new(),
            k: 0,
            source_pool: String::new(),
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Per-target sampling seed: FNV-1a of the target id XOR the global seed.
pub fn derive_seed(global_seed: u64, target_id: &str) -> u64 {
    fnv1a64(target_id.as_bytes()) ^ global_seed
}

/// Draws `k` examples uniformly without replacement, in sampled order.
pub fn sample_context(
    pool: &[ContextExample],
    k: usize,
    global_seed: u64,
    target_id: &str,
    pool_name: &str,
) -> Result<ContextSet, SplitError> {
    if k > pool.len() {
        return Err(SplitError::PoolTooSmall { pool: pool.len(), k });
    }
    if pool.iter().any(|e| e.subject_id == target_id) {
        return Err(SplitError::TargetInPool(target_id.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(global_seed, target_id));
    let mut items = pool.to_vec();
    let (chosen, _) = items.partial_shuffle(&mut rng, k);
    Ok(ContextSet {
        target_id: target_id.to_string(),
        examples: chosen.to_vec(),
        k,
        source_pool: pool_name.to_string(),
    })
}

/// Labeled pool members for a partition's ICL pool.
pub fn pool_examples(
    table: &FeatureTable,
    assignment: &SplitAssignment,
    pool: Partition,
) -> Result<Vec<ContextExample>, SplitError> {
    assignment
        .ids(pool)
        .iter()
        .map(|id| {
            table
                .label_of(id)
                .map(|label| ContextExample {
                    subject_id: id.clone(),
                    label,
                })
                .ok_or_else(|| SplitError::MissingLabel(id.clone()))
        })
        .collect()
}
