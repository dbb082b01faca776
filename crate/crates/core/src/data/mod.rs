//! Windows, splits and datasets.

mod format;
mod stats;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inventory::PhonemeInventory;

pub use format::{ingest, write_dataset, DataFormat, NativeReader, INVENTORY_FILE, MAGIC, MANIFEST_FILE, WINDOWS_FILE};
pub use stats::{apply_standardization_policy, compute_stats, standardize, ChannelStats, StandardizationReport, STD_FLOOR};
pub use synthetic::{class_templates, generate_synthetic, SyntheticParams, EVAL_SESSION, TRAIN_SESSION};

pub const MEG_CHANNELS: usize = 306;
pub const SAMPLE_RATE_HZ: f64 = 250.0;
pub const WINDOW_SAMPLES: usize = 125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Holdout => "holdout",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

/// Row-major `channels × times` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMatrix {
    channels: usize,
    times: usize,
    data: Vec<f32>,
}

impl SignalMatrix {
    pub fn new(channels: usize, times: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * times {
            return Err(Error::Input(format!(
                "signal of {} values does not fill {channels}×{times}",
                data.len()
            )));
        }
        Ok(Self { channels, times, data })
    }

    pub fn zeros(channels: usize, times: usize) -> Self {
        Self {
            channels,
            times,
            data: vec![0.0; channels * times],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.times..(c + 1) * self.times]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.times..(c + 1) * self.times]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One labelled MEG segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeWindow {
    pub data: SignalMatrix,
    pub label: usize,
    pub split: Split,
    pub session_id: String,
}

impl PhonemeWindow {
    pub fn new(data: SignalMatrix, label: usize, split: Split, session_id: impl Into<String>) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::Input("window contains non-finite values".into()));
        }
        Ok(Self {
            data,
            label,
            split,
            session_id: session_id.into(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub inventory: PhonemeInventory,
    pub channels: usize,
    pub times: usize,
    pub windows: Vec<PhonemeWindow>,
    pub sources: Vec<PathBuf>,
}

impl Dataset {
    pub fn new(inventory: PhonemeInventory, channels: usize, times: usize) -> Self {
        Self {
            inventory,
            channels,
            times,
            windows: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn push(&mut self, w: PhonemeWindow) -> Result<()> {
        if w.data.channels() != self.channels || w.data.times() != self.times {
            return Err(Error::Input(format!(
                "window is {}×{}, dataset expects {}×{}",
                w.data.channels(),
                w.data.times(),
                self.channels,
                self.times
            )));
        }
        if w.label >= self.inventory.len() {
            return Err(Error::Input(format!("label {} outside the inventory", w.label)));
        }
        self.windows.push(w);
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&PhonemeWindow> {
        self.windows.iter().filter(|w| w.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.windows.iter().filter(|w| w.split == split).count()
    }

    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        class_histogram(self.windows.iter().filter(|w| w.split == split), self.inventory.len())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut counts = BTreeMap::new();
        let mut histograms = BTreeMap::new();
        for s in Split::ALL {
            counts.insert(s, self.count(s));
            histograms.insert(s, self.class_histogram(s));
        }
        DatasetManifest {
            counts,
            histograms,
            sources: self.sources.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub counts: BTreeMap<Split, usize>,
    pub histograms: BTreeMap<Split, Vec<usize>>,
    pub sources: Vec<PathBuf>,
}

pub fn class_histogram<'a>(windows: impl IntoIterator<Item = &'a PhonemeWindow>, n_classes: usize) -> Vec<usize> {
    let mut h = vec![0; n_classes];
    for w in windows {
        h[w.label] += 1;
    }
    h
}

/// Text bar chart of class counts, most frequent first.
pub fn format_histogram(hist: &[usize], inventory: &PhonemeInventory, width: usize) -> String {
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| hist[b].cmp(&hist[a]).then(a.cmp(&b)));
    let max = hist.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    for id in order {
        let bar = hist[id] * width / max;
        out.push_str(&format!(
            "{:>3} {:>8} {}\n",
            inventory.symbol(id).unwrap_or("?"),
            hist[id],
            "#".repeat(bar)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(label: usize, split: Split) -> PhonemeWindow {
        PhonemeWindow::new(SignalMatrix::zeros(2, 3), label, split, "s").unwrap()
    }

    #[test]
    fn histogram_of_long_tail_fixture() {
        let mut ws = Vec::new();
        for (label, n) in [(0, 8), (1, 4), (2, 2), (3, 1)] {
            ws.extend((0..n).map(|_| window(label, Split::Train)));
        }
        let h = class_histogram(&ws, 39);
        assert_eq!(&h[..4], &[8, 4, 2, 1]);
        assert_eq!(h.iter().sum::<usize>(), 15);
    }

    #[test]
    fn empty_split_histogram_is_zero() {
        let ds = Dataset::new(PhonemeInventory::default(), 2, 3);
        assert_eq!(ds.class_histogram(Split::Holdout), vec![0; 39]);
    }

    #[test]
    fn non_finite_window_rejected() {
        let m = SignalMatrix::new(1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(PhonemeWindow::new(m, 0, Split::Train, "s").is_err());
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
    }
}
