//! Normalization layers.
//!
//! All kinds share one kernel that standardizes contiguous rows:
//! `y = (x - mean) / sqrt(var + eps)` with the population variance.
//! Instance, group and layer norm pick the row layout directly; batch norm
//! permutes channels to the front first.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

/// Default denominator stabilizer for every normalization kind.
pub const NORM_EPS: f64 = 1e-5;

struct StandardizeRowsOp<F> {
    row_len: usize,
    inv_std: Vec<F>,
}

impl<F: Real> Backward<F> for StandardizeRowsOp<F> {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let n = self.row_len;
        let nf = n as f64;
        let y = a.output.data();
        let g = a.grad.data();
        let mut out = vec![F::zero(); g.len()];
        for (r, &inv) in self.inv_std.iter().enumerate() {
            let span = r * n..(r + 1) * n;
            let (gs, ys) = (&g[span.clone()], &y[span.clone()]);
            let sum_g: f64 = gs.iter().map(|v| v.as_f64()).sum();
            let sum_gy: f64 = gs.iter().zip(ys).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
            let inv = inv.as_f64();
            for ((o, &gi), &yi) in out[span].iter_mut().zip(gs).zip(ys) {
                let v = inv * (gi.as_f64() - sum_g / nf - yi.as_f64() * sum_gy / nf);
                *o = F::from_f64_lossy(v);
            }
        }
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap())]
    }
}

/// Per-row statistics computed in f64.
fn row_stats<F: Real>(row: &[F]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

impl<'t, F: Real> Var<'t, F> {
    /// Standardizes each contiguous row of length `row_len`.
    pub fn standardize_rows(self, row_len: usize, eps: f64) -> Result<Var<'t, F>> {
        let x = self.value();
        if row_len == 0 || x.numel() % row_len != 0 {
            return Err(TensorError::config(
                "standardize_rows",
                format!("row length {row_len} does not divide {} elements", x.numel()),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::config("standardize_rows", "eps must be > 0"));
        }
        let rows = x.numel() / row_len;
        let mut out = vec![F::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in x.data().chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
            let (mean, var) = row_stats(src);
            let inv = 1.0 / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = F::from_f64_lossy((s.as_f64() - mean) * inv);
            }
            inv_std.push(F::from_f64_lossy(inv));
        }
        Ok(self.tape.push_op(
            Tensor::new(x.shape().to_vec(), out)?,
            &[self.id],
            StandardizeRowsOp { row_len, inv_std },
        ))
    }
}

fn require_rank<F: Real>(op: &'static str, x: &Var<'_, F>, min: usize) -> Result<Vec<usize>> {
    let s = x.shape();
    if s.len() < min {
        return Err(TensorError::dim(op, "input rank", format!(">= {min}"), s.len()));
    }
    Ok(s)
}

fn affine<'t, F: Real>(
    op: &'static str,
    y: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    axis: usize,
) -> Result<Var<'t, F>> {
    let n = y.shape()[axis];
    for (name, v) in [("gamma", &gamma), ("beta", &beta)] {
        if v.shape() != [n] {
            return Err(TensorError::dim(op, format!("{name} length (axis {axis})"), n, format!("{:?}", v.shape())));
        }
    }
    y.mul_along(gamma, axis)?.add_along(beta, axis)
}

/// Per-sample, per-channel standardization over all trailing axes with
/// fixed `gamma = 1`, `beta = 0`. Input `[B, C, ...]`.
pub fn instance_norm<'t, F: Real>(x: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
    let s = require_rank("instance_norm", &x, 3)?;
    let row: usize = s[2..].iter().product();
    x.standardize_rows(row, eps)
}

/// Group normalization over `[B, C, ...]` with per-channel affine.
pub fn group_norm<'t, F: Real>(
    x: Var<'t, F>,
    groups: usize,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: f64,
) -> Result<Var<'t, F>> {
    let s = require_rank("group_norm", &x, 2)?;
    if groups == 0 || s[1] % groups != 0 {
        return Err(TensorError::config(
            "group_norm",
            format!("{groups} groups do not divide {} channels", s[1]),
        ));
    }
    let row = (s[1] / groups) * s[2..].iter().product::<usize>();
    let y = x.standardize_rows(row, eps)?;
    affine("group_norm", y, gamma, beta, 1)
}

/// Layer normalization over the last axis with affine of that length.
pub fn layer_norm<'t, F: Real>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: f64,
) -> Result<Var<'t, F>> {
    let s = require_rank("layer_norm", &x, 1)?;
    let d = *s.last().unwrap();
    let y = x.standardize_rows(d, eps)?;
    affine("layer_norm", y, gamma, beta, s.len() - 1)
}

/// Per-channel batch statistics observed in a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance of the batch.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

impl BatchStats {
    /// Exponential running-average update with the unbiased batch variance.
    pub fn update_running(&self, running_mean: &mut [f32], running_var: &mut [f32], momentum: f64) {
        let correction = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            let m = running_mean[c] as f64;
            let v = running_var[c] as f64;
            running_mean[c] = ((1.0 - momentum) * m + momentum * self.mean[c]) as f32;
            running_var[c] = ((1.0 - momentum) * v + momentum * self.var[c] * correction) as f32;
        }
    }
}

/// Training-mode batch normalization over `[B, C, ...]`: statistics per
/// channel over batch and trailing axes.
pub fn batch_norm_train<'t, F: Real>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: f64,
) -> Result<(Var<'t, F>, BatchStats)> {
    let s = require_rank("batch_norm", &x, 2)?;
    if s[0] == 0 {
        return Err(TensorError::config("batch_norm", "batch must contain at least one sample"));
    }
    let mut axes: Vec<usize> = (0..s.len()).collect();
    axes.swap(0, 1);
    let moved = x.permute(&axes)?;
    let count = s[0] * s[2..].iter().product::<usize>();
    let stats = {
        let v = moved.value();
        let (mean, var) = v.data().chunks_exact(count).map(row_stats).unzip();
        BatchStats { mean, var, count }
    };
    let y = moved.standardize_rows(count, eps)?.permute(&axes)?;
    Ok((affine("batch_norm", y, gamma, beta, 1)?, stats))
}

/// Evaluation-mode batch normalization using running statistics.
pub fn batch_norm_eval<'t, F: Real>(
    x: Var<'t, F>,
    running_mean: &[f32],
    running_var: &[f32],
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: f64,
) -> Result<Var<'t, F>> {
    let s = require_rank("batch_norm", &x, 2)?;
    if running_mean.len() != s[1] || running_var.len() != s[1] {
        return Err(TensorError::dim("batch_norm", "running stats length (axis 1)", s[1], running_mean.len()));
    }
    let tape = x.tape();
    let shift: Vec<F> = running_mean.iter().map(|&m| F::from_f64_lossy(-(m as f64))).collect();
    let scale: Vec<F> = running_var
        .iter()
        .map(|&v| F::from_f64_lossy(1.0 / (v as f64 + eps).sqrt()))
        .collect();
    let y = x
        .add_along(tape.constant(Tensor::from_vec(shift)), 1)?
        .mul_along(tape.constant(Tensor::from_vec(scale)), 1)?;
    affine("batch_norm", y, gamma, beta, 1)
}

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Group,
    Layer,
    Batch,
    Instance,
}

/// Parameters for [`norm_layer`].
pub enum NormParams<'t, 'a, F: Real> {
    Instance,
    Group {
        groups: usize,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
    },
    /// Normalizes over axis 1 of `[B, C, T]` (the channel axis) at every time step.
    Layer { gamma: Var<'t, F>, beta: Var<'t, F> },
    Batch {
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        running_mean: &'a [f32],
        running_var: &'a [f32],
        training: bool,
    },
}

impl<F: Real> NormParams<'_, '_, F> {
    pub fn kind(&self) -> NormKind {
        match self {
            NormParams::Instance => NormKind::Instance,
            NormParams::Group { .. } => NormKind::Group,
            NormParams::Layer { .. } => NormKind::Layer,
            NormParams::Batch { .. } => NormKind::Batch,
        }
    }
}

/// Applies one normalization layer to a channel-first `[B, C, ...]` input.
///
/// Training-mode batch norm also returns the batch statistics so that the
/// caller can update its running averages.
pub fn norm_layer<'t, F: Real>(
    x: Var<'t, F>,
    params: NormParams<'t, '_, F>,
    eps: f64,
) -> Result<(Var<'t, F>, Option<BatchStats>)> {
    match params {
        NormParams::Instance => Ok((instance_norm(x, eps)?, None)),
        NormParams::Group { groups, gamma, beta } => Ok((group_norm(x, groups, gamma, beta, eps)?, None)),
        NormParams::Layer { gamma, beta } => {
            let s = require_rank("layer_norm", &x, 2)?;
            if s.len() == 2 {
                return Ok((layer_norm(x, gamma, beta, eps)?, None));
            }
            // move channels last, normalize, move back
            let nd = s.len();
            let mut fwd: Vec<usize> = (0..nd).filter(|&a| a != 1).collect();
            fwd.push(1);
            let mut back = vec![0; nd];
            for (i, &a) in fwd.iter().enumerate() {
                back[a] = i;
            }
            let y = layer_norm(x.permute(&fwd)?, gamma, beta, eps)?.permute(&back)?;
            Ok((y, None))
        }
        NormParams::Batch {
            gamma,
            beta,
            running_mean,
            running_var,
            training,
        } => {
            if training {
                let (y, stats) = batch_norm_train(x, gamma, beta, eps)?;
                Ok((y, Some(stats)))
            } else {
                Ok((batch_norm_eval(x, running_mean, running_var, gamma, beta, eps)?, None))
            }
        }
    }
}
