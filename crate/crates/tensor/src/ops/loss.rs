use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

struct SoftmaxOp {
    width: usize,
}

impl<F: Real> Backward<F> for SoftmaxOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let y = a.output.data();
        let g = a.grad.data();
        let mut out = vec![F::zero(); y.len()];
        for ((o, ys), gs) in out
            .chunks_exact_mut(self.width)
            .zip(y.chunks_exact(self.width))
            .zip(g.chunks_exact(self.width))
        {
            let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y.as_f64() * g.as_f64()).sum();
            for ((o, &yi), &gi) in o.iter_mut().zip(ys).zip(gs) {
                *o = F::from_f64_lossy(yi.as_f64() * (gi.as_f64() - dot));
            }
        }
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap())]
    }
}

struct CrossEntropyOp<F> {
    probs: Vec<F>,
    labels: Vec<usize>,
    classes: usize,
}

impl<F: Real> Backward<F> for CrossEntropyOp<F> {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let batch = self.labels.len();
        let scale = a.grad.data()[0].as_f64() / batch as f64;
        let mut out: Vec<F> = self.probs.clone();
        for (row, &label) in self.labels.iter().enumerate() {
            out[row * self.classes + label] -= F::one();
        }
        for v in &mut out {
            *v = F::from_f64_lossy(v.as_f64() * scale);
        }
        vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), out).unwrap())]
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<'t, F: Real> Var<'t, F> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::dim("softmax", "rank", ">= 1", 0))?;
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(width.max(1)) {
            let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            out.extend(softmax_row(&r).into_iter().map(F::from_f64_lossy));
        }
        Ok(self
            .tape
            .push_op(Tensor::new(x.shape().to_vec(), out)?, &[self.id], SoftmaxOp { width }))
    }
}

/// Mean cross-entropy of `[B, K]` logits against class ids in `[0, K)`.
pub fn softmax_cross_entropy<'t, F: Real>(logits: Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    let x = logits.value();
    if x.ndim() != 2 {
        return Err(TensorError::dim("softmax_cross_entropy", "logits rank", 2, x.ndim()));
    }
    let (batch, classes) = (x.shape()[0], x.shape()[1]);
    if labels.len() != batch {
        return Err(TensorError::dim("softmax_cross_entropy", "axis 0 (batch)", batch, labels.len()));
    }
    if batch == 0 {
        return Err(TensorError::Input {
            op: "softmax_cross_entropy",
            reason: "empty batch".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Input {
            op: "softmax_cross_entropy",
            reason: format!("label {bad} outside [0, {classes})"),
        });
    }
    let mut probs = Vec::with_capacity(x.numel());
    let mut total = 0.0f64;
    for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
        let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - r[label];
        probs.extend(softmax_row(&r).into_iter().map(F::from_f64_lossy));
    }
    let loss = Tensor::scalar(F::from_f64_lossy(total / batch as f64));
    Ok(logits.tape.push_op(
        loss,
        &[logits.id],
        CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
            classes,
        },
    ))
}
