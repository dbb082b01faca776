//! Optimization loop with best-validation checkpoint selection.

mod adamw;
mod log;

use indexmap::IndexMap;
use megphone_tensor::{softmax_cross_entropy, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, AugmentConfig};
use crate::data::{Dataset, PhonemeWindow, SignalMatrix, Split};
use crate::error::{Error, Result};
use crate::metrics::{confusion, f1_macro, per_class_report, ClassScores};
use crate::models::{predict, Mode, Model};
use crate::rng::{stream, TAG_AUGMENT, TAG_SUBSAMPLE};
use crate::sampling::{average_group, balance_labels, epoch_groups, eval_groups, make_batches, SamplingPlan};

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use log::{EpochRecord, TrainLog};

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sampling: SamplingPlan,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Score validation on fixed-seed group averages instead of single windows.
    pub eval_grouped: bool,
    /// Clip the global gradient norm at 5.
    pub grad_clip: bool,
    pub eval_batch_size: usize,
    /// Raw training windows scored each epoch for the ungrouped train F1.
    pub train_eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            epochs: 10,
            sampling: SamplingPlan::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_grouped: true,
            grad_clip: false,
            eval_batch_size: 64,
            train_eval_windows: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        self.sampling.validate()?;
        self.augment.validate()
    }
}

/// How evaluation windows are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Ungrouped,
    /// Fixed-seed same-class averages of this many windows.
    Grouped(usize),
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub f1_macro: f64,
    pub report: Vec<ClassScores>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

pub fn evaluate(model: &Model, windows: &[&PhonemeWindow], mode: EvalMode, batch_size: usize) -> Result<Evaluation> {
    let n_classes = model.spec().n_classes;
    let (truth, pred) = match mode {
        EvalMode::Ungrouped => {
            let signals: Vec<&SignalMatrix> = windows.iter().map(|w| &w.data).collect();
            (windows.iter().map(|w| w.label).collect(), model.predict_windows(&signals, batch_size)?)
        }
        EvalMode::Grouped(size) => {
            let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
            let groups = eval_groups(&labels, size.max(1));
            if groups.is_empty() {
                return Err(Error::Config(format!(
                    "no class has {size} windows to form an evaluation group"
                )));
            }
            let mut truth = Vec::with_capacity(groups.len());
            let mut pred = Vec::with_capacity(groups.len());
            for chunk in groups.chunks(batch_size.max(1)) {
                let samples: Vec<_> = chunk.iter().map(|g| average_group(windows, g)).collect();
                let signals: Vec<&SignalMatrix> = samples.iter().map(|s| &s.data).collect();
                pred.extend(predict(&model.logits(&signals)?));
                truth.extend(samples.iter().map(|s| s.label));
            }
            (truth, pred)
        }
    };
    for &l in &truth {
        if l >= n_classes {
            return Err(Error::Input(format!("label {l} outside the model's {n_classes} classes")));
        }
    }
    let report = per_class_report(&confusion(&truth, &pred, n_classes)?);
    Ok(Evaluation {
        f1_macro: crate::metrics::macro_mean(&report),
        report,
        truth,
        pred,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub log: TrainLog,
}

/// A failed run together with everything salvaged before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub best: Option<Model>,
    pub log: TrainLog,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure {
            error,
            best: None,
            log: TrainLog::default(),
        }
    }
}

struct Optimizer {
    cfg: AdamWConfig,
    states: IndexMap<String, AdamState<f32>>,
}

impl Optimizer {
    fn step(&mut self, model: &mut Model, grads: &IndexMap<String, Tensor<f32>>, clip: bool) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NumericFault {
                    layer: format!("gradient of {name}"),
                });
            }
        }
        let scale = if clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter().map(|&v| (v as f64).powi(2)))
                .sum::<f64>()
                .sqrt();
            if norm > GRAD_CLIP_NORM {
                GRAD_CLIP_NORM / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        for (name, p) in model.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let g: Vec<f32> = if scale == 1.0 {
                g.data().to_vec()
            } else {
                g.data().iter().map(|&v| (v as f64 * scale) as f32).collect()
            };
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.numel()));
            adamw_step(p.data_mut(), &g, state, &self.cfg)?;
        }
        Ok(())
    }
}

fn train_subsample<'a>(windows: &[&'a PhonemeWindow], limit: usize, seed: u64) -> Vec<&'a PhonemeWindow> {
    if windows.len() <= limit {
        return windows.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut stream(seed, &[TAG_SUBSAMPLE]), windows.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| windows[i]).collect()
}

/// Trains `model` on the train split, selecting the epoch with the highest
/// validation F1-macro (earliest on ties).
pub fn train(
    mut model: Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    cfg.validate()?;
    let train_windows = dataset.split(Split::Train);
    let val_windows = dataset.split(Split::Validation);
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Input("training needs non-empty train and validation splits".into()).into());
    }
    let labels: Vec<usize> = train_windows.iter().map(|w| w.label).collect();
    let pool = if cfg.sampling.balance {
        balance_labels(&labels, cfg.sampling.seed)
    } else {
        (0..labels.len()).collect()
    };
    let val_mode = if cfg.eval_grouped {
        EvalMode::Grouped(cfg.sampling.group_size)
    } else {
        EvalMode::Ungrouped
    };
    let train_probe = train_subsample(&train_windows, cfg.train_eval_windows, cfg.seed);
    let n_classes = model.spec().n_classes;

    let mut opt = Optimizer {
        cfg: AdamWConfig::new(cfg.lr, cfg.weight_decay),
        states: IndexMap::new(),
    };
    let mut log = TrainLog::default();
    let mut best: Option<Model> = None;
    let mut best_f1 = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        let step = (|| -> Result<EpochRecord> {
            let groups = epoch_groups(&labels, &pool, &cfg.sampling, epoch as u64);
            if groups.is_empty() {
                return Err(Error::Config(format!(
                    "no class has {} training windows to form a group",
                    cfg.sampling.group_size
                )));
            }
            let batches = make_batches(groups, cfg.batch_size, cfg.seed, &[epoch as u64])?;
            let (mut loss_sum, mut seen) = (0.0f64, 0usize);
            let (mut truth, mut pred) = (Vec::new(), Vec::new());
            for (b, batch) in batches.iter().enumerate() {
                let mut samples: Vec<_> = batch.iter().map(|g| average_group(&train_windows, g)).collect();
                if cfg.augment.enabled {
                    for (i, s) in samples.iter_mut().enumerate() {
                        let mut rng = stream(cfg.seed, &[TAG_AUGMENT, epoch as u64, b as u64, i as u64]);
                        apply_pipeline(&mut s.data, &cfg.augment, &mut rng);
                    }
                }
                let batch_labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                let signals: Vec<&SignalMatrix> = samples.iter().map(|s| &s.data).collect();
                let tape = Tape::<f32>::new();
                let x = tape.constant(model.batch_tensor(&signals)?);
                let out = model.forward(&tape, x, Mode::Train, None)?;
                let loss = softmax_cross_entropy(out.logits, &batch_labels)?;
                let loss_value = loss.value().item().unwrap_or(f32::NAN) as f64;
                if !loss_value.is_finite() {
                    return Err(Error::NumericFault {
                        layer: format!("loss (epoch {epoch}, batch {b})"),
                    });
                }
                let mut grads = tape.backward(loss)?;
                let named: IndexMap<String, Tensor<f32>> = out
                    .params
                    .iter()
                    .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
                    .collect();
                pred.extend(predict(&out.logits.value()));
                truth.extend_from_slice(&batch_labels);
                opt.step(&mut model, &named, cfg.grad_clip)?;
                model.apply_batch_stats(&out.batch_stats);
                loss_sum += loss_value * batch_labels.len() as f64;
                seen += batch_labels.len();
            }
            let train_f1 = f1_macro(&truth, &pred, n_classes)?;
            let train_f1_ungrouped =
                evaluate(&model, &train_probe, EvalMode::Ungrouped, cfg.eval_batch_size)?.f1_macro;
            let val_f1 = evaluate(&model, &val_windows, val_mode, cfg.eval_batch_size)?.f1_macro;
            Ok(EpochRecord {
                epoch,
                train_loss: loss_sum / seen as f64,
                train_f1,
                train_f1_ungrouped,
                val_f1,
                is_best: false,
            })
        })();
        let mut record = match step {
            Ok(r) => r,
            Err(error) => return Err(TrainFailure { error, best, log }),
        };
        if record.val_f1 > best_f1 {
            best_f1 = record.val_f1;
            best = Some(model.clone());
            for r in &mut log.records {
                r.is_best = false;
            }
            record.is_best = true;
            log.best_epoch = Some(epoch);
        }
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last: model,
        log,
    })
}
