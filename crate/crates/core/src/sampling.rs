//! Label balancing, group averaging and batch assembly.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{PhonemeWindow, SignalMatrix};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_BALANCE, TAG_BATCH, TAG_GROUP};

/// Fixed seed for grouped evaluation partitions.
pub const EVAL_GROUPING_SEED: u64 = 0x4D45_4750_4556_414C;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub group_size: usize,
    pub repeats: usize,
    pub balance: bool,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            group_size: 100,
            repeats: 1,
            balance: false,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random oversampling: returns indices into `labels` where every present
/// class appears as often as the largest class. Originals come first, in
/// order, followed by the drawn duplicates.
pub fn balance_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for (k, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = stream(seed, &[TAG_BALANCE, k as u64]);
        out.extend((members.len()..target).map(|_| *members.choose(&mut rng).unwrap()));
    }
    out
}

/// Same-class members of one averaged sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub label: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedSample {
    pub data: SignalMatrix,
    pub label: usize,
    pub group_size: usize,
    pub member_indices: Vec<usize>,
}

/// One shuffled partition of each class into consecutive groups; leftovers
/// smaller than `group_size` are dropped. `pool` holds indices into `labels`
/// and may contain repeats (after balancing).
pub fn partition(labels: &[usize], pool: &[usize], group_size: usize, seed: u64, path: &[u64]) -> Vec<Group> {
    let n_classes = pool.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let mut groups = Vec::new();
    for (k, mut members) in by_class.into_iter().enumerate() {
        let mut p = path.to_vec();
        p.push(k as u64);
        members.shuffle(&mut stream(seed, &p));
        for chunk in members.chunks_exact(group_size) {
            groups.push(Group {
                label: k,
                members: chunk.to_vec(),
            });
        }
    }
    groups
}

/// All groups of one epoch: `repeats` independent partitions.
pub fn epoch_groups(labels: &[usize], pool: &[usize], plan: &SamplingPlan, epoch: u64) -> Vec<Group> {
    (0..plan.repeats as u64)
        .flat_map(|r| partition(labels, pool, plan.group_size, plan.seed, &[TAG_GROUP, epoch, r]))
        .collect()
}

/// Fixed partition used for grouped evaluation.
pub fn eval_groups(labels: &[usize], group_size: usize) -> Vec<Group> {
    let pool: Vec<usize> = (0..labels.len()).collect();
    partition(labels, &pool, group_size, EVAL_GROUPING_SEED, &[TAG_GROUP])
}

pub fn average_group(windows: &[&PhonemeWindow], group: &Group) -> GroupedSample {
    let first = &windows[group.members[0]].data;
    let mut acc = vec![0.0f64; first.data().len()];
    for &i in &group.members {
        for (a, &v) in acc.iter_mut().zip(windows[i].data.data()) {
            *a += v as f64;
        }
    }
    let n = group.members.len() as f64;
    let data = SignalMatrix::new(first.channels(), first.times(), acc.into_iter().map(|v| (v / n) as f32).collect())
        .expect("shape taken from a member");
    GroupedSample {
        data,
        label: group.label,
        group_size: group.members.len(),
        member_indices: group.members.clone(),
    }
}

/// Lazily averaged grouped stream for one epoch (balancing, when planned,
/// is applied to the pool first).
pub fn group_average<'a>(
    windows: &'a [&'a PhonemeWindow],
    plan: &SamplingPlan,
    epoch: u64,
) -> impl Iterator<Item = GroupedSample> + 'a {
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let pool = if plan.balance {
        balance_labels(&labels, plan.seed)
    } else {
        (0..labels.len()).collect()
    };
    epoch_groups(&labels, &pool, plan, epoch)
        .into_iter()
        .map(move |g| average_group(windows, &g))
}

/// Shuffles and chunks; the last batch may be short.
pub fn make_batches<T>(mut items: Vec<T>, batch_size: usize, seed: u64, path: &[u64]) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut p = vec![TAG_BATCH];
    p.extend_from_slice(path);
    items.shuffle(&mut stream(seed, &p));
    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        batches.push(it.by_ref().take(batch_size).collect());
    }
    Ok(batches)
}
