//! Seeded train/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Split every fine class separately; coarse-only samples form one
    /// more group.
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.7, seed: 0, stratify: true }
    }
}

/// `ceil(fraction * n)`, tolerant of the rounding in products such as
/// `0.7 * 10`.
fn train_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Disjoint, exhaustive split; both halves keep the original sample order.
pub fn split_train_test(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    if data.is_empty() {
        return Err(DataError::Empty);
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples().iter().enumerate() {
        let key = if spec.stratify { s.fine } else { None };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (key, mut members) in groups {
        if spec.stratify && members.len() < 2 {
            let class = key.map_or("unlabelled".to_string(), |f| data.hierarchy().fine_name(f).to_string());
            return Err(DataError::ClassTooSmall { class, count: members.len() });
        }
        members.shuffle(&mut rng);
        // Any group of two or more keeps one sample on each side.
        let cut = match members.len() {
            n if n >= 2 => train_count(spec.train_fraction, n).clamp(1, n - 1),
            n => n,
        };
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}
