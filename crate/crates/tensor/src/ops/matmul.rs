use crate::error::{Result, TensorError};
use crate::real::{gemm, Real};
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

/// Batched product over the last two axes; `rhs` optionally transposed.
struct BmmOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<F: Real> Backward<F> for BmmOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (lhs, rhs) = (&a.inputs[0], &a.inputs[1]);
        let g = a.grad.data();
        let ga = a.needs[0].then(|| {
            let mut out = vec![F::zero(); self.batch * m * k];
            for b in 0..self.batch {
                let gb = &g[b * m * n..(b + 1) * m * n];
                let rb = &rhs.data()[b * k * n..(b + 1) * k * n];
                // dA = G * B^T, or G * B when B was used transposed
                gemm(m, n, k, gb, false, rb, !self.trans_b, F::zero(), &mut out[b * m * k..(b + 1) * m * k]);
            }
            Tensor::new(lhs.shape().to_vec(), out).unwrap()
        });
        let gb = a.needs[1].then(|| {
            let mut out = vec![F::zero(); self.batch * k * n];
            for b in 0..self.batch {
                let gb = &g[b * m * n..(b + 1) * m * n];
                let lb = &lhs.data()[b * m * k..(b + 1) * m * k];
                let dst = &mut out[b * k * n..(b + 1) * k * n];
                if self.trans_b {
                    // B stored n x k: dB = G^T * A
                    gemm(n, m, k, gb, true, lb, false, F::zero(), dst);
                } else {
                    gemm(k, m, n, lb, true, gb, false, F::zero(), dst);
                }
            }
            Tensor::new(rhs.shape().to_vec(), out).unwrap()
        });
        vec![ga, gb]
    }
}

struct LinearOp {
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl<F: Real> Backward<F> for LinearOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let (r, di, dout) = (self.rows, self.d_in, self.d_out);
        let x = &a.inputs[0];
        let w = &a.inputs[1];
        let g = a.grad.data();
        let gx = a.needs[0].then(|| {
            let mut out = vec![F::zero(); r * di];
            gemm(r, dout, di, g, false, w.data(), false, F::zero(), &mut out);
            Tensor::new(x.shape().to_vec(), out).unwrap()
        });
        let gw = a.needs[1].then(|| {
            let mut out = vec![F::zero(); dout * di];
            gemm(dout, r, di, g, true, x.data(), false, F::zero(), &mut out);
            Tensor::new(w.shape().to_vec(), out).unwrap()
        });
        let mut grads = vec![gx, gw];
        if a.inputs.len() == 3 {
            grads.push(a.needs[2].then(|| {
                let mut acc = vec![0.0f64; dout];
                for row in g.chunks_exact(dout) {
                    for (s, &v) in acc.iter_mut().zip(row) {
                        *s += v.as_f64();
                    }
                }
                Tensor::from_vec(acc.into_iter().map(F::from_f64_lossy).collect())
            }));
        }
        grads
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// `[..., m, k] x [..., k, n]`, or `[..., m, k] x [..., n, k]^T` when
    /// `trans_rhs`. Leading (batch) axes must agree exactly.
    pub fn bmm(self, rhs: Var<'t, F>, trans_rhs: bool) -> Result<Var<'t, F>> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(TensorError::dim(
                "bmm",
                "rank",
                format!("equal ranks >= 2 ({sa:?})"),
                format!("{sb:?}"),
            ));
        }
        let nd = sa.len();
        if sa[..nd - 2] != sb[..nd - 2] {
            return Err(TensorError::dim(
                "bmm",
                "batch axes",
                format!("{:?}", &sa[..nd - 2]),
                format!("{:?}", &sb[..nd - 2]),
            ));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_rhs {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(TensorError::dim("bmm", "inner axis", k, kb));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                trans_rhs,
                F::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.tape.push_op(
            Tensor::new(shape, out)?,
            &[self.id, rhs.id],
            BmmOp {
                batch,
                m,
                k,
                n,
                trans_b: trans_rhs,
            },
        ))
    }
}

/// Affine map over the last axis: `out = x * weight^T + bias`.
///
/// `x` is `[..., d_in]`, `weight` is `[d_out, d_in]`, `bias` is `[d_out]`.
pub fn linear<'t, F: Real>(
    x: Var<'t, F>,
    weight: Var<'t, F>,
    bias: Option<Var<'t, F>>,
) -> Result<Var<'t, F>> {
    x.same_tape(&weight)?;
    let xv = x.value();
    let wv = weight.value();
    if xv.ndim() == 0 {
        return Err(TensorError::dim("linear", "input rank", ">= 1", 0));
    }
    if wv.ndim() != 2 {
        return Err(TensorError::dim("linear", "weight rank", 2, wv.ndim()));
    }
    let d_in = *xv.shape().last().unwrap();
    let (d_out, w_in) = (wv.shape()[0], wv.shape()[1]);
    if d_in != w_in {
        return Err(TensorError::dim(
            "linear",
            "input feature axis (last)",
            w_in,
            d_in,
        ));
    }
    let rows = xv.numel() / d_in.max(1);
    let mut out = vec![F::zero(); rows * d_out];
    gemm(rows, d_in, d_out, xv.data(), false, wv.data(), true, F::zero(), &mut out);
    let mut parents = vec![x.id, weight.id];
    if let Some(b) = bias {
        x.same_tape(&b)?;
        let bv = b.value();
        if bv.shape() != [d_out] {
            return Err(TensorError::dim(
                "linear",
                "bias axis 0",
                d_out,
                format!("{:?}", bv.shape()),
            ));
        }
        for row in out.chunks_exact_mut(d_out) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        parents.push(b.id);
    }
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Ok(x.tape.push_op(
        Tensor::new(shape, out)?,
        &parents,
        LinearOp { rows, d_in, d_out },
    ))
}
