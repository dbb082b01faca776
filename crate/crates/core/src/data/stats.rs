use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, PhonemeWindow, Split};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel population mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source_split: Split,
    pub n_samples: usize,
}

impl ChannelStats {
    pub fn unit(channels: usize, source_split: Split) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            source_split,
            n_samples: 0,
        }
    }
}

/// Single pass over the windows; each window's per-channel moments are merged
/// with the pairwise update of Chan et al.
pub fn compute_stats<'a>(windows: impl IntoIterator<Item = &'a PhonemeWindow>, source_split: Split) -> Result<ChannelStats> {
    let mut count = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    let mut times = 0usize;
    for w in windows {
        let d = &w.data;
        if count == 0 {
            mean = vec![0.0; d.channels()];
            m2 = vec![0.0; d.channels()];
            times = d.times();
        } else if d.channels() != mean.len() || d.times() != times {
            return Err(Error::Input("windows of differing shapes".into()));
        }
        let nb = times as f64;
        let na = (count * times) as f64;
        for c in 0..d.channels() {
            let row = d.row(c);
            let mb = row.iter().map(|&v| v as f64).sum::<f64>() / nb;
            let m2b: f64 = row.iter().map(|&v| (v as f64 - mb).powi(2)).sum();
            let delta = mb - mean[c];
            let n = na + nb;
            mean[c] += delta * nb / n;
            m2[c] += m2b + delta * delta * na * nb / n;
        }
        count += 1;
    }
    if count == 0 || times == 0 {
        return Err(Error::Input("cannot compute channel statistics of an empty split".into()));
    }
    let total = (count * times) as f64;
    let std = m2.iter().map(|&s| (s / total).sqrt().max(STD_FLOOR)).collect();
    Ok(ChannelStats {
        mean,
        std,
        source_split,
        n_samples: count,
    })
}

pub fn standardize(window: &PhonemeWindow, stats: &ChannelStats) -> PhonemeWindow {
    let mut out = window.clone();
    standardize_in_place(&mut out, stats);
    out
}

pub(crate) fn standardize_in_place(window: &mut PhonemeWindow, stats: &ChannelStats) {
    for c in 0..window.data.channels() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in window.data.row_mut(c) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
}

/// Which statistics standardized each split.
#[derive(Clone, Debug, Default)]
pub struct StandardizationReport {
    pub applied: BTreeMap<Split, ChannelStats>,
}

/// Train and validation use train statistics; test and holdout use their own.
pub fn apply_standardization_policy(dataset: &mut Dataset) -> Result<StandardizationReport> {
    let mut report = StandardizationReport::default();
    let train = if dataset.count(Split::Train) > 0 {
        Some(compute_stats(dataset.windows.iter().filter(|w| w.split == Split::Train), Split::Train)?)
    } else {
        None
    };
    for split in Split::ALL {
        if dataset.count(split) == 0 {
            continue;
        }
        let stats = match split {
            Split::Train | Split::Validation => train.clone().ok_or_else(|| {
                Error::Input("validation split needs train statistics but the train split is empty".into())
            })?,
            Split::Test | Split::Holdout => compute_stats(dataset.windows.iter().filter(|w| w.split == split), split)?,
        };
        for w in dataset.windows.iter_mut().filter(|w| w.split == split) {
            standardize_in_place(w, &stats);
        }
        report.applied.insert(split, stats);
    }
    Ok(report)
}
