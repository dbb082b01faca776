//! Discrete Fourier transforms: full-length FFT round trips for signal
//! editing and a differentiable short-time magnitude spectrogram.

use std::f64::consts::PI;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

/// Complex spectrum `X[k] = sum_n x[n] exp(-2 pi i k n / N)` of a real signal.
pub fn forward_spectrum<F: Real>(signal: &[F]) -> Vec<Complex<F>> {
    let mut buf: Vec<Complex<F>> = signal.iter().map(|&v| Complex::new(v, F::zero())).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Real part of the normalized inverse transform of a full-length spectrum.
pub fn inverse_spectrum<F: Real>(spectrum: &[Complex<F>]) -> Vec<F> {
    let mut buf = spectrum.to_vec();
    if buf.is_empty() {
        return Vec::new();
    }
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let scale = F::one() / F::from_usize(buf.len()).unwrap();
    buf.into_iter().map(|c| c.re * scale).collect()
}

/// `inverse(forward(x))`; equals `x` up to rounding.
pub fn fft_roundtrip<F: Real>(signal: &Tensor<F>) -> Result<Tensor<F>> {
    if signal.ndim() != 1 {
        return Err(TensorError::dim("fft_roundtrip", "rank", 1, signal.ndim()));
    }
    Tensor::new(signal.shape().to_vec(), inverse_spectrum(&forward_spectrum(signal.data())))
}

/// Frame and bin counts of a magnitude spectrogram: `(frames, bins)`.
pub fn stft_shape(len: usize, n_fft: usize, hop: usize) -> Result<(usize, usize)> {
    if hop == 0 {
        return Err(TensorError::config("stft", "hop must be >= 1"));
    }
    if n_fft == 0 || n_fft > len {
        return Err(TensorError::config(
            "stft",
            format!("n_fft {n_fft} must be in 1..={len} (signal length)"),
        ));
    }
    Ok(((len - n_fft) / hop + 1, n_fft / 2 + 1))
}

struct StftOp<F> {
    len: usize,
    n_fft: usize,
    hop: usize,
    frames: usize,
    bins: usize,
    /// Complex coefficients, laid out like the output.
    spectrum: Vec<Complex<F>>,
}

impl<F: Real> Backward<F> for StftOp<F> {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let (n, bins, frames) = (self.n_fft, self.bins, self.frames);
        // d|X_f|/dx_n = (Re X_f cos(w n) - Im X_f sin(w n)) / |X_f|
        let mut cos = vec![0.0f64; bins * n];
        let mut sin = vec![0.0f64; bins * n];
        for f in 0..bins {
            for t in 0..n {
                let w = 2.0 * PI * (f * t % n) as f64 / n as f64;
                cos[f * n + t] = w.cos();
                sin[f * n + t] = w.sin();
            }
        }
        let signals = a.inputs[0].numel() / self.len;
        let g = a.grad.data();
        let mut out = vec![0.0f64; a.inputs[0].numel()];
        for s in 0..signals {
            let dst = &mut out[s * self.len..(s + 1) * self.len];
            for f in 0..bins {
                for m in 0..frames {
                    let idx = (s * bins + f) * frames + m;
                    let c = self.spectrum[idx];
                    let (re, im) = (c.re.as_f64(), c.im.as_f64());
                    let mag = (re * re + im * im).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    let scale = g[idx].as_f64() / mag;
                    let start = m * self.hop;
                    for t in 0..n {
                        dst[start + t] += scale * (re * cos[f * n + t] - im * sin[f * n + t]);
                    }
                }
            }
        }
        let grad = out.into_iter().map(F::from_f64_lossy).collect();
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), grad).unwrap())]
    }
}

/// Magnitude short-time Fourier transform along the last axis with a
/// rectangular window: `[..., T] -> [..., n_fft / 2 + 1, (T - n_fft) / hop + 1]`.
pub fn stft<'t, F: Real>(x: Var<'t, F>, n_fft: usize, hop: usize) -> Result<Var<'t, F>> {
    let xv = x.value();
    if xv.ndim() == 0 {
        return Err(TensorError::dim("stft", "rank", ">= 1", 0));
    }
    let len = *xv.shape().last().unwrap();
    let (frames, bins) = stft_shape(len, n_fft, hop)?;
    let signals = xv.numel() / len.max(1);
    let fft = FftPlanner::<F>::new().plan_fft_forward(n_fft);
    let mut spectrum = vec![Complex::new(F::zero(), F::zero()); signals * bins * frames];
    let mut buf = vec![Complex::new(F::zero(), F::zero()); n_fft];
    for s in 0..signals {
        let sig = &xv.data()[s * len..(s + 1) * len];
        for m in 0..frames {
            for (b, &v) in buf.iter_mut().zip(&sig[m * hop..m * hop + n_fft]) {
                *b = Complex::new(v, F::zero());
            }
            fft.process(&mut buf);
            for f in 0..bins {
                spectrum[(s * bins + f) * frames + m] = buf[f];
            }
        }
    }
    let mags = spectrum.iter().map(|c| c.norm()).collect();
    let mut shape = xv.shape()[..xv.ndim() - 1].to_vec();
    shape.extend([bins, frames]);
    Ok(x.tape.push_op(
        Tensor::new(shape, mags)?,
        &[x.id],
        StftOp {
            len,
            n_fft,
            hop,
            frames,
            bins,
            spectrum,
        },
    ))
}
