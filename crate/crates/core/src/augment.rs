//! Training-time stochastic augmentations.

use megphone_tensor::{forward_spectrum, inverse_spectrum};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{SignalMatrix, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_apply: f64,
    pub noise_rel_std: f64,
    pub max_shift_ms: f64,
    pub max_mask_ms: f64,
    pub channel_drop_frac: f64,
    pub amp_range: [f64; 2],
    pub band_scale_range: [f64; 2],
    pub band_max_hz: f64,
    pub band_width_hz: f64,
    pub max_bands: usize,
    pub sample_rate_hz: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p_apply: 0.3,
            noise_rel_std: 0.01,
            max_shift_ms: 40.0,
            max_mask_ms: 80.0,
            channel_drop_frac: 0.10,
            amp_range: [0.9, 1.1],
            band_scale_range: [0.8, 1.2],
            band_max_hz: 100.0,
            band_width_hz: 10.0,
            max_bands: 3,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.p_apply) {
            return bad("p_apply must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.channel_drop_frac) {
            return bad("channel_drop_frac must lie in [0, 1]");
        }
        if !(self.amp_range[0] <= self.amp_range[1]) || !(self.band_scale_range[0] <= self.band_scale_range[1]) {
            return bad("ranges must be ordered low <= high");
        }
        if self.noise_rel_std < 0.0 || self.max_shift_ms < 0.0 || self.max_mask_ms < 0.0 {
            return bad("noise, shift and mask settings must be non-negative");
        }
        if !(self.sample_rate_hz > 0.0) || !(self.band_width_hz > 0.0) || !(self.band_max_hz > 0.0) {
            return bad("sample rate and band settings must be positive");
        }
        if self.max_bands == 0 || self.max_bands > self.n_bands() {
            return bad("max_bands must be between 1 and the number of bands");
        }
        Ok(())
    }

    pub fn max_shift_samples(&self) -> usize {
        (self.max_shift_ms * self.sample_rate_hz / 1000.0).round() as usize
    }

    pub fn max_mask_samples(&self) -> usize {
        (self.max_mask_ms * self.sample_rate_hz / 1000.0).round() as usize
    }

    pub fn n_bands(&self) -> usize {
        (self.band_max_hz / self.band_width_hz).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    GaussianNoise,
    TemporalShift,
    TemporalMask,
    ChannelDropout,
    AmplitudeScale,
    FrequencyBand,
}

impl Augmentation {
    /// Application order.
    pub const ALL: [Augmentation; 6] = [
        Augmentation::GaussianNoise,
        Augmentation::TemporalShift,
        Augmentation::TemporalMask,
        Augmentation::ChannelDropout,
        Augmentation::AmplitudeScale,
        Augmentation::FrequencyBand,
    ];
}

/// Adds white noise with std `rel_std` times the whole-window std.
pub fn gaussian_noise<R: Rng + ?Sized>(x: &mut SignalMatrix, rel_std: f64, rng: &mut R) {
    let d = x.data();
    let n = d.len() as f64;
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sigma = rel_std * std;
    if sigma == 0.0 {
        return;
    }
    for v in x.data_mut() {
        *v = (*v as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
    }
}

/// Circular rotation of every channel by `shift` samples (positive = later).
pub fn temporal_shift(x: &mut SignalMatrix, shift: isize) {
    let t = x.times();
    if t == 0 {
        return;
    }
    let k = shift.rem_euclid(t as isize) as usize;
    for c in 0..x.channels() {
        x.row_mut(c).rotate_right(k);
    }
}

/// Zeroes columns `start..start + len` across all channels.
pub fn temporal_mask(x: &mut SignalMatrix, start: usize, len: usize) {
    let end = (start + len).min(x.times());
    for c in 0..x.channels() {
        x.row_mut(c)[start.min(end)..end].fill(0.0);
    }
}

pub fn drop_count(frac: f64, channels: usize) -> usize {
    (frac * channels as f64 + 1e-9).floor() as usize
}

pub fn channel_dropout(x: &mut SignalMatrix, channels: &[usize]) {
    for &c in channels {
        x.row_mut(c).fill(0.0);
    }
}

pub fn amplitude_scale(x: &mut SignalMatrix, s: f64) {
    for v in x.data_mut() {
        *v = (*v as f64 * s) as f32;
    }
}

/// A scaled frequency interval `[lo_hz, hi_hz)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandScale {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub scale: f64,
}

/// Scales the selected bands of each channel's spectrum (with their mirrored
/// negative-frequency bins) and transforms back.
pub fn frequency_band_perturb(x: &mut SignalMatrix, bands: &[BandScale], sample_rate_hz: f64) {
    let n = x.times();
    if n == 0 || bands.is_empty() {
        return;
    }
    let factors: Vec<f64> = (0..=n / 2)
        .map(|k| {
            let f = k as f64 * sample_rate_hz / n as f64;
            bands
                .iter()
                .filter(|b| f >= b.lo_hz && f < b.hi_hz)
                .fold(1.0, |acc, b| acc * b.scale)
        })
        .collect();
    for c in 0..x.channels() {
        let row: Vec<f64> = x.row(c).iter().map(|&v| v as f64).collect();
        let mut spec = forward_spectrum(&row);
        for (k, &s) in factors.iter().enumerate() {
            if s == 1.0 {
                continue;
            }
            spec[k] *= s;
            if k != 0 && n - k != k {
                spec[n - k] *= s;
            }
        }
        for (v, r) in x.row_mut(c).iter_mut().zip(inverse_spectrum(&spec)) {
            *v = r as f32;
        }
    }
}

pub fn random_shift<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> isize {
    let m = cfg.max_shift_samples() as i64;
    rng.random_range(-m..=m) as isize
}

pub fn random_mask<R: Rng + ?Sized>(cfg: &AugmentConfig, times: usize, rng: &mut R) -> (usize, usize) {
    let cap = cfg.max_mask_samples().min(times);
    if cap == 0 {
        return (0, 0);
    }
    let len = rng.random_range(1..=cap);
    (rng.random_range(0..=times - len), len)
}

pub fn random_channels<R: Rng + ?Sized>(cfg: &AugmentConfig, channels: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, channels, drop_count(cfg.channel_drop_frac, channels)).into_vec()
}

pub fn random_bands<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Vec<BandScale> {
    let n_bands = cfg.n_bands();
    let k = rng.random_range(1..=cfg.max_bands.min(n_bands));
    let mut picked = sample(rng, n_bands, k).into_vec();
    picked.sort_unstable();
    let [lo, hi] = cfg.band_scale_range;
    picked
        .into_iter()
        .map(|b| BandScale {
            lo_hz: b as f64 * cfg.band_width_hz,
            hi_hz: (b + 1) as f64 * cfg.band_width_hz,
            scale: if lo == hi { lo } else { rng.random_range(lo..hi) },
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Gates each augmentation by its own Bernoulli draw, in fixed order, and
/// reports which ones fired. `cfg.enabled` is not consulted here.
pub fn apply_pipeline<R: Rng + ?Sized>(x: &mut SignalMatrix, cfg: &AugmentConfig, rng: &mut R) -> [bool; 6] {
    let mut fired = [false; 6];
    for (i, aug) in Augmentation::ALL.iter().enumerate() {
        if !rng.random_bool(cfg.p_apply) {
            continue;
        }
        fired[i] = true;
        match aug {
            Augmentation::GaussianNoise => gaussian_noise(x, cfg.noise_rel_std, rng),
            Augmentation::TemporalShift => {
                let s = random_shift(cfg, rng);
                temporal_shift(x, s)
            }
            Augmentation::TemporalMask => {
                let (start, len) = random_mask(cfg, x.times(), rng);
                temporal_mask(x, start, len)
            }
            Augmentation::ChannelDropout => {
                let chans = random_channels(cfg, x.channels(), rng);
                channel_dropout(x, &chans)
            }
            Augmentation::AmplitudeScale => amplitude_scale(x, uniform(cfg.amp_range, rng)),
            Augmentation::FrequencyBand => {
                let bands = random_bands(cfg, rng);
                frequency_band_perturb(x, &bands, cfg.sample_rate_hz)
            }
        }
    }
    fired
}
