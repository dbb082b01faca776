use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

struct ReshapeOp;
impl<F: Real> Backward<F> for ReshapeOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let shape = a.inputs[0].shape().to_vec();
        vec![Some(a.grad.clone().reshape(shape).unwrap())]
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}
impl<F: Real> Backward<F> for PermuteOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(permute_tensor(a.grad, &self.inverse))]
    }
}

struct PickOp {
    labels: Vec<usize>,
}
impl<F: Real> Backward<F> for PickOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let shape = a.inputs[0].shape();
        let k = shape[1];
        let mut out = Tensor::zeros(shape.to_vec());
        let d = out.data_mut();
        for (row, (&label, &g)) in self.labels.iter().zip(a.grad.data()).enumerate() {
            d[row * k + label] = g;
        }
        vec![Some(out)]
    }
}

/// Reorders axes so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_tensor<F: Real>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    if nd == 0 {
        out.extend_from_slice(src);
    } else if !src.is_empty() {
        let last = nd - 1;
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        'outer: loop {
            for j in 0..out_shape[last] {
                out.push(src[offset + j * strides[last]]);
            }
            // advance the multi-index over all but the last axis
            let mut ax = last;
            loop {
                if ax == 0 {
                    break 'outer;
                }
                ax -= 1;
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

impl<'t, F: Real> Var<'t, F> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let shape = shape.into();
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(TensorError::dim(
                "reshape",
                "element count",
                x.numel(),
                format!("{n} ({shape:?})"),
            ));
        }
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.push_op(out, &[self.id], ReshapeOp))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::config(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = permute_tensor(&x, axes);
        Ok(self.tape.push_op(out, &[self.id], PermuteOp { inverse }))
    }

    /// Selects `x[b, labels[b]]` from a `[B, K]` matrix.
    pub fn pick(self, labels: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(TensorError::dim("pick", "rank", 2, x.ndim()));
        }
        let (b, k) = (x.shape()[0], x.shape()[1]);
        if labels.len() != b {
            return Err(TensorError::dim("pick", "axis 0 (batch)", b, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Input {
                op: "pick",
                reason: format!("label {bad} outside [0, {k})"),
            });
        }
        let out: Vec<F> = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| x.data()[row * k + l])
            .collect();
        Ok(self.tape.push_op(
            Tensor::from_vec(out),
            &[self.id],
            PickOp {
                labels: labels.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = Tensor::new(shape.to_vec(), data.clone()).unwrap();
        let y = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn permute_rejects_duplicate_axes() {
        let tape = crate::Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(x.permute(&[0, 0]).is_err());
    }
}
