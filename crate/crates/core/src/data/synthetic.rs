use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, PhonemeWindow, SignalMatrix, Split, MEG_CHANNELS, SAMPLE_RATE_HZ, WINDOW_SAMPLES};
use crate::error::{Error, Result};
use crate::inventory::{PhonemeInventory, N_PHONEMES};
use crate::rng::{stream, TAG_NOISE, TAG_SESSION, TAG_TEMPLATE};

pub const TRAIN_SESSION: &str = "synthetic-train";
pub const EVAL_SESSION: &str = "synthetic-eval";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// Uses the first `n_classes` inventory symbols.
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Validation (and test) windows per class; half of `n_per_class` when unset.
    pub eval_per_class: Option<usize>,
    /// Template power over noise power; `inf` gives noiseless windows.
    pub snr: f64,
    pub seed: u64,
    pub channels: usize,
    pub times: usize,
    /// Log-scale spread of the evaluation session's channel gains and offsets
    /// relative to the training session.
    pub session_shift: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_classes: N_PHONEMES,
            n_per_class: 200,
            eval_per_class: None,
            snr: 0.03,
            seed: 0,
            channels: MEG_CHANNELS,
            times: WINDOW_SAMPLES,
            session_shift: 0.25,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.n_classes == 0 || self.n_classes > N_PHONEMES {
            return Err(Error::Config(format!("n_classes must be in 1..={N_PHONEMES}")));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::Config("snr must be positive".into()));
        }
        if self.channels == 0 || self.times == 0 {
            return Err(Error::Config("window shape must be non-empty".into()));
        }
        if !(self.session_shift >= 0.0 && self.session_shift.is_finite()) {
            return Err(Error::Config("session_shift must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn eval_count(&self) -> usize {
        self.eval_per_class.unwrap_or((self.n_per_class / 2).max(1))
    }
}

/// Unit-power class templates: 2–4 sub-20 Hz sinusoids, each mixed across
/// channels by a smooth spatial cosine.
pub fn class_templates(p: &SyntheticParams) -> Vec<SignalMatrix> {
    (0..p.n_classes)
        .map(|k| {
            let mut rng = stream(p.seed, &[TAG_TEMPLATE, k as u64]);
            let n_comp = rng.random_range(2..=4);
            let mut m = SignalMatrix::zeros(p.channels, p.times);
            for _ in 0..n_comp {
                let freq = rng.random_range(1.0..20.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.5);
                let spatial_freq = rng.random_range(1..=3) as f64;
                let spatial_phase = rng.random_range(0.0..2.0 * PI);
                for c in 0..p.channels {
                    let w = amp * (2.0 * PI * spatial_freq * c as f64 / p.channels as f64 + spatial_phase).cos();
                    for (t, v) in m.row_mut(c).iter_mut().enumerate() {
                        *v += (w * (2.0 * PI * freq * t as f64 / SAMPLE_RATE_HZ + phase).sin()) as f32;
                    }
                }
            }
            let power = m.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / m.data().len() as f64;
            let scale = 1.0 / power.sqrt().max(1e-12);
            for v in m.data_mut() {
                *v = (*v as f64 * scale) as f32;
            }
            m
        })
        .collect()
}

struct Session {
    gain: Vec<f64>,
    offset: Vec<f64>,
}

fn sessions(p: &SyntheticParams) -> (Session, Session) {
    let mut rng = stream(p.seed, &[TAG_SESSION]);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let mut train = Session {
        gain: Vec::with_capacity(p.channels),
        offset: Vec::with_capacity(p.channels),
    };
    let mut eval = Session {
        gain: Vec::with_capacity(p.channels),
        offset: Vec::with_capacity(p.channels),
    };
    for _ in 0..p.channels {
        let g = (0.5 * normal()).exp();
        let o = 2.0 * normal();
        train.gain.push(g);
        train.offset.push(o);
        eval.gain.push(g * (p.session_shift * normal()).exp());
        eval.offset.push(o + p.session_shift * g * normal());
    }
    (train, eval)
}

fn record(template: &SignalMatrix, session: &Session, noise_std: f64, seed: u64, path: &[u64]) -> SignalMatrix {
    let mut rng = stream(seed, path);
    let mut m = template.clone();
    let times = m.times();
    for (c, row) in m.data_mut().chunks_exact_mut(times).enumerate() {
        for v in row {
            let noise: f64 = if noise_std > 0.0 { noise_std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            *v = (session.gain[c] * (*v as f64 + noise) + session.offset[c]) as f32;
        }
    }
    m
}

/// Raw (unstandardized) train/validation/test windows.
///
/// Validation and test hold the same recordings from a second session.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<Dataset> {
    p.validate()?;
    let templates = class_templates(p);
    let (train_session, eval_session) = sessions(p);
    let noise_std = if p.snr.is_infinite() { 0.0 } else { 1.0 / p.snr.sqrt() };
    let mut ds = Dataset::new(PhonemeInventory::default(), p.channels, p.times);
    for i in 0..p.n_per_class {
        for (k, t) in templates.iter().enumerate() {
            let m = record(t, &train_session, noise_std, p.seed, &[TAG_NOISE, 0, k as u64, i as u64]);
            ds.push(PhonemeWindow::new(m, k, Split::Train, TRAIN_SESSION)?)?;
        }
    }
    let mut eval = Vec::with_capacity(p.eval_count() * templates.len());
    for i in 0..p.eval_count() {
        for (k, t) in templates.iter().enumerate() {
            let m = record(t, &eval_session, noise_std, p.seed, &[TAG_NOISE, 1, k as u64, i as u64]);
            eval.push(PhonemeWindow::new(m, k, Split::Validation, EVAL_SESSION)?);
        }
    }
    for w in &eval {
        let mut copy = w.clone();
        copy.split = Split::Test;
        ds.push(copy)?;
    }
    for w in eval {
        ds.push(w)?;
    }
    ds.windows.sort_by_key(|w| w.split);
    Ok(ds)
}
