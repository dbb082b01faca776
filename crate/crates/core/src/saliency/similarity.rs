use std::fmt;

use serde::{Deserialize, Serialize};

use super::{saliency_scores, subsample_per_class, SaliencyConfig};
use crate::data::PhonemeWindow;
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Pearson,
    Spearman,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        })
    }
}

/// `None` when either side has zero variance or fewer than two values.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Per-sample scores of the same windows under two standardizations.
#[derive(Clone, Debug)]
pub struct PairedScores {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub layer_names: Vec<String>,
}

pub fn paired_scores(
    model: &Model,
    split_a: &[&PhonemeWindow],
    split_b: &[&PhonemeWindow],
    cfg: &SaliencyConfig,
) -> Result<PairedScores> {
    if split_a.len() != split_b.len() {
        return Err(Error::Pairing(format!(
            "splits have {} and {} windows; pairs must align one to one",
            split_a.len(),
            split_b.len()
        )));
    }
    if let Some(i) = (0..split_a.len()).find(|&i| split_a[i].label != split_b[i].label) {
        return Err(Error::Pairing(format!(
            "window {i} is labelled {} in one split and {} in the other",
            split_a[i].label, split_b[i].label
        )));
    }
    let labels: Vec<usize> = split_a.iter().map(|w| w.label).collect();
    let keep = subsample_per_class(&labels, cfg.max_per_class);
    let a: Vec<&PhonemeWindow> = keep.iter().map(|&i| split_a[i]).collect();
    let b: Vec<&PhonemeWindow> = keep.iter().map(|&i| split_b[i]).collect();
    Ok(PairedScores {
        a: saliency_scores(model, &a, cfg.batch_size)?,
        b: saliency_scores(model, &b, cfg.batch_size)?,
        labels: keep.iter().map(|&i| labels[i]).collect(),
        layer_names: model.tap_names(),
    })
}

/// Layers × classes correlations; NaN marks degenerate or empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub layer_names: Vec<String>,
    pub phoneme_symbols: Vec<String>,
    pub metric: Metric,
}

pub fn similarity_matrix(p: &PairedScores, metric: Metric, symbols: &[String]) -> SimilarityMatrix {
    let (n_layers, n_classes) = (p.layer_names.len(), symbols.len());
    let mut values = vec![f64::NAN; n_layers * n_classes];
    for k in 0..n_classes {
        let idx: Vec<usize> = (0..p.labels.len()).filter(|&i| p.labels[i] == k).collect();
        for l in 0..n_layers {
            let xa: Vec<f64> = idx.iter().map(|&i| p.a[i][l]).collect();
            let xb: Vec<f64> = idx.iter().map(|&i| p.b[i][l]).collect();
            let r = match metric {
                Metric::Pearson => pearson(&xa, &xb),
                Metric::Spearman => spearman(&xa, &xb),
            };
            values[l * n_classes + k] = r.unwrap_or(f64::NAN);
        }
    }
    SimilarityMatrix {
        values,
        layer_names: p.layer_names.clone(),
        phoneme_symbols: symbols.to_vec(),
        metric,
    }
}

pub fn cross_split_similarity(
    model: &Model,
    split_a: &[&PhonemeWindow],
    split_b: &[&PhonemeWindow],
    metric: Metric,
    symbols: &[String],
    cfg: &SaliencyConfig,
) -> Result<SimilarityMatrix> {
    let p = paired_scores(model, split_a, split_b, cfg)?;
    Ok(similarity_matrix(&p, metric, &symbols[..model.spec().n_classes.min(symbols.len())]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilaritySummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n_cells: usize,
    pub n_missing: usize,
}

impl fmt::Display for SimilaritySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4} ± {:.4} over {} cells ({} missing)",
            self.mean, self.std, self.n_cells, self.n_missing
        )
    }
}

pub fn summarize_similarity(values: &[f64]) -> SimilaritySummary {
    let present: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    let n = present.len();
    let (mean, std) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let m = present.iter().sum::<f64>() / n as f64;
        (m, (present.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt())
    };
    SimilaritySummary {
        mean,
        std,
        n_cells: n,
        n_missing: values.len() - n,
    }
}
