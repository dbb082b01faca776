//! Layer-wise gradient saliency and cross-split stability analysis.

mod cluster;
mod export;
mod similarity;

use megphone_tensor::{Real, TapRegistry, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::data::{PhonemeWindow, SignalMatrix};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};

pub use cluster::{hcluster, upgma, Axis, ClusterTree, Merge};
pub use export::{render_clustermap, write_matrix_csv, write_tree_csv};
pub use similarity::{
    average_ranks, cross_split_similarity, paired_scores, pearson, similarity_matrix, spearman, summarize_similarity,
    Metric, PairedScores, SimilarityMatrix, SimilaritySummary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Windows per class to average; all when unset.
    pub max_per_class: Option<usize>,
    pub batch_size: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            max_per_class: Some(200),
            batch_size: 32,
        }
    }
}

/// Layers × classes grid; missing cells hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMatrix {
    pub values: Vec<f64>,
    pub layer_names: Vec<String>,
    pub phoneme_symbols: Vec<String>,
    pub normalized: bool,
}

impl SaliencyMatrix {
    pub fn n_layers(&self) -> usize {
        self.layer_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.phoneme_symbols.len()
    }

    pub fn get(&self, layer: usize, class: usize) -> f64 {
        self.values[layer * self.n_classes() + class]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        let k = self.n_classes();
        &self.values[layer * k..(layer + 1) * k]
    }
}

/// Backpropagates the sum of each sample's target logit and returns, per
/// sample and tapped layer, the mean absolute gradient over that sample's
/// slice of the activation. Samples must not interact in the forward pass.
pub fn saliency_from_taps<'t, F: Real>(
    tape: &'t Tape<F>,
    taps: &TapRegistry,
    logits: Var<'t, F>,
    labels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if taps.is_empty() {
        return Err(Error::Usage("saliency needs at least one tapped layer".into()));
    }
    let target = logits.pick(labels)?.sum();
    let grads = tape.backward(target)?;
    let batch = labels.len();
    let mut out = vec![Vec::with_capacity(taps.len()); batch];
    for reading in taps.read(tape, &grads) {
        let shape = reading.activation.shape();
        if shape.first() != Some(&batch) {
            return Err(Error::Usage(format!(
                "tap '{}' has leading axis {:?}, expected the batch size {batch}",
                reading.name,
                shape.first()
            )));
        }
        let per = reading.activation.numel() / batch.max(1);
        for (i, row) in out.iter_mut().enumerate() {
            let s = match &reading.grad {
                Some(g) => {
                    g.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64().abs()).sum::<f64>() / per.max(1) as f64
                }
                None => 0.0,
            };
            row.push(s);
        }
    }
    Ok(out)
}

/// Eval-mode per-sample saliency for a batch of windows.
pub fn sample_saliency_batch(model: &Model, windows: &[&SignalMatrix], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    if windows.len() != labels.len() {
        return Err(Error::Input("one label per window required".into()));
    }
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::<f32>::new();
    let x = tape.leaf(model.batch_tensor(windows)?, true);
    let mut taps = TapRegistry::new();
    let out = model.forward(&tape, x, Mode::Eval, Some(&mut taps))?;
    saliency_from_taps(&tape, &taps, out.logits, labels)
}

pub fn sample_saliency(model: &Model, window: &SignalMatrix, label: usize) -> Result<Vec<f64>> {
    Ok(sample_saliency_batch(model, &[window], &[label])?.remove(0))
}

/// Per-sample scores for many windows, batched.
pub fn saliency_scores(model: &Model, windows: &[&PhonemeWindow], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let signals: Vec<&SignalMatrix> = chunk.iter().map(|w| &w.data).collect();
        let labels: Vec<usize> = chunk.iter().map(|w| w.label).collect();
        out.extend(sample_saliency_batch(model, &signals, &labels)?);
    }
    Ok(out)
}

/// Class means of per-sample scores as a layers × classes grid (NaN for
/// classes without samples).
pub fn aggregate(scores: &[Vec<f64>], labels: &[usize], n_layers: usize, n_classes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_layers * n_classes];
    let mut count = vec![0usize; n_classes];
    for (s, &k) in scores.iter().zip(labels) {
        count[k] += 1;
        for (l, &v) in s.iter().enumerate() {
            sum[l * n_classes + k] += v;
        }
    }
    for l in 0..n_layers {
        for k in 0..n_classes {
            let c = count[k];
            sum[l * n_classes + k] = if c == 0 { f64::NAN } else { sum[l * n_classes + k] / c as f64 };
        }
    }
    sum
}

/// Indices of the first `max_per_class` windows of every class, in order.
pub fn subsample_per_class(labels: &[usize], max_per_class: Option<usize>) -> Vec<usize> {
    let Some(cap) = max_per_class else {
        return (0..labels.len()).collect();
    };
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| {
            let c = seen.entry(l).or_default();
            *c += 1;
            *c <= cap
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn class_saliency(
    model: &Model,
    windows: &[&PhonemeWindow],
    symbols: &[String],
    cfg: &SaliencyConfig,
) -> Result<SaliencyMatrix> {
    let layer_names = model.tap_names();
    if layer_names.is_empty() {
        return Err(Error::Usage("model has no tapped layers".into()));
    }
    let n_classes = model.spec().n_classes;
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let picked: Vec<&PhonemeWindow> = subsample_per_class(&labels, cfg.max_per_class)
        .into_iter()
        .map(|i| windows[i])
        .collect();
    let scores = saliency_scores(model, &picked, cfg.batch_size)?;
    let picked_labels: Vec<usize> = picked.iter().map(|w| w.label).collect();
    Ok(SaliencyMatrix {
        values: aggregate(&scores, &picked_labels, layer_names.len(), n_classes),
        layer_names,
        phoneme_symbols: symbols.iter().take(n_classes).cloned().collect(),
        normalized: false,
    })
}

/// Min-max scales every row to [0, 1]; constant rows become zeros and
/// missing cells stay missing.
pub fn row_minmax(s: &SaliencyMatrix) -> SaliencyMatrix {
    let k = s.n_classes();
    let mut values = s.values.clone();
    for row in values.chunks_mut(k.max(1)) {
        let finite = row.iter().copied().filter(|v| !v.is_nan());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        for v in row.iter_mut().filter(|v| !v.is_nan()) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    SaliencyMatrix {
        values,
        layer_names: s.layer_names.clone(),
        phoneme_symbols: s.phoneme_symbols.clone(),
        normalized: true,
    }
}
