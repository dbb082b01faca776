use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::{axis_extents, Tensor};

struct AddOp;
impl<F: Real> Backward<F> for AddOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(a.grad.clone()), Some(a.grad.clone())]
    }
}

struct SubOp;
impl<F: Real> Backward<F> for SubOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))]
    }
}

struct MulOp;
impl<F: Real> Backward<F> for MulOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let (x, y) = (&a.inputs[0], &a.inputs[1]);
        vec![
            a.needs[0].then(|| a.grad.zip_map(y, |g, v| g * v)),
            a.needs[1].then(|| a.grad.zip_map(x, |g, v| g * v)),
        ]
    }
}

struct ScaleOp<F>(F);
impl<F: Real> Backward<F> for ScaleOp<F> {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let c = self.0;
        vec![Some(a.grad.map(|g| g * c))]
    }
}

struct ReluOp;
impl<F: Real> Backward<F> for ReluOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(a.grad.zip_map(&a.inputs[0], |g, x| {
            if x > F::zero() {
                g
            } else {
                F::zero()
            }
        }))]
    }
}

struct AbsOp;
impl<F: Real> Backward<F> for AbsOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        vec![Some(a.grad.zip_map(&a.inputs[0], |g, x| {
            if x > F::zero() {
                g
            } else if x < F::zero() {
                -g
            } else {
                F::zero()
            }
        }))]
    }
}

struct SumOp;
impl<F: Real> Backward<F> for SumOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let g = a.grad.data()[0];
        vec![Some(Tensor::full(a.inputs[0].shape().to_vec(), g))]
    }
}

/// Broadcast a 1-d vector along `axis` (bias add or per-channel scale).
struct AlongOp {
    axis: usize,
    multiply: bool,
}

impl<F: Real> Backward<F> for AlongOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let x = &a.inputs[0];
        let v = a.inputs[1].data();
        let (outer, n, inner) = axis_extents(x.shape(), self.axis);
        let g = a.grad.data();
        let gx = a.needs[0].then(|| {
            if self.multiply {
                let mut out = a.grad.clone();
                let d = out.data_mut();
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        for e in &mut d[base..base + inner] {
                            *e *= v[i];
                        }
                    }
                }
                out
            } else {
                a.grad.clone()
            }
        });
        let gv = a.needs[1].then(|| {
            let xd = x.data();
            let mut acc = vec![0.0f64; n];
            for o in 0..outer {
                for (i, slot) in acc.iter_mut().enumerate() {
                    let base = (o * n + i) * inner;
                    let gs = &g[base..base + inner];
                    *slot += if self.multiply {
                        gs.iter()
                            .zip(&xd[base..base + inner])
                            .map(|(&g, &x)| (g * x).as_f64())
                            .sum::<f64>()
                    } else {
                        gs.iter().map(|&g| g.as_f64()).sum::<f64>()
                    };
                }
            }
            Tensor::from_vec(acc.into_iter().map(F::from_f64_lossy).collect())
        });
        vec![gx, gv]
    }
}

struct MeanAxisOp {
    axis: usize,
}

impl<F: Real> Backward<F> for MeanAxisOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let shape = a.inputs[0].shape();
        let (outer, n, inner) = axis_extents(shape, self.axis);
        let scale = F::one() / F::from_usize(n).unwrap();
        let g = a.grad.data();
        let mut out = vec![F::zero(); outer * n * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[(o * n + i) * inner + j] = g[o * inner + j] * scale;
                }
            }
        }
        vec![Some(Tensor::new(shape.to_vec(), out).unwrap())]
    }
}

fn check_same_shape<F: Real>(op: &'static str, a: &Var<'_, F>, b: &Var<'_, F>) -> Result<()> {
    a.same_tape(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::dim(
            op,
            "operand shape",
            format!("{sa:?}"),
            format!("{sb:?}"),
        ));
    }
    Ok(())
}

impl<'t, F: Real> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("add", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.tape.push_op(out, &[self.id, other.id], AddOp))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("sub", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.tape.push_op(out, &[self.id, other.id], SubOp))
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        check_same_shape("mul", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.tape.push_op(out, &[self.id, other.id], MulOp))
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let out = self.value().map(|v| v * c);
        self.tape.push_op(out, &[self.id], ScaleOp(c))
    }

    pub fn relu(self) -> Var<'t, F> {
        let out = self.value().map(|v| v.max(F::zero()));
        self.tape.push_op(out, &[self.id], ReluOp)
    }

    pub fn abs(self) -> Var<'t, F> {
        let out = self.value().map(|v| v.abs());
        self.tape.push_op(out, &[self.id], AbsOp)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t, F> {
        let total: f64 = self.value().data().iter().map(|v| v.as_f64()).sum();
        self.tape
            .push_op(Tensor::scalar(F::from_f64_lossy(total)), &[self.id], SumOp)
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().numel().max(1);
        self.sum().scale(F::one() / F::from_usize(n).unwrap())
    }

    /// Adds `bias[i]` to every element whose index along `axis` is `i`.
    pub fn add_along(self, bias: Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
        self.along("add_along", bias, axis, false)
    }

    /// Multiplies every element whose index along `axis` is `i` by `scale[i]`.
    pub fn mul_along(self, scale: Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
        self.along("mul_along", scale, axis, true)
    }

    fn along(
        self,
        op: &'static str,
        vector: Var<'t, F>,
        axis: usize,
        multiply: bool,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&vector)?;
        let x = self.value();
        let v = vector.value();
        if axis >= x.ndim() {
            return Err(TensorError::config(
                op,
                format!("axis {axis} out of range for rank {}", x.ndim()),
            ));
        }
        let (outer, n, inner) = axis_extents(x.shape(), axis);
        if v.ndim() != 1 || v.numel() != n {
            return Err(TensorError::dim(
                op,
                format!("axis {axis}"),
                n,
                format!("{:?}", v.shape()),
            ));
        }
        let mut out = (*x).clone();
        let d = out.data_mut();
        let vd = v.data();
        for o in 0..outer {
            for (i, &vi) in vd.iter().enumerate() {
                let base = (o * n + i) * inner;
                for e in &mut d[base..base + inner] {
                    if multiply {
                        *e *= vi;
                    } else {
                        *e += vi;
                    }
                }
            }
        }
        Ok(self
            .tape
            .push_op(out, &[self.id, vector.id], AlongOp { axis, multiply }))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(TensorError::config(
                "mean_axis",
                format!("axis {axis} out of range for rank {}", x.ndim()),
            ));
        }
        let (outer, n, inner) = axis_extents(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += xd[(o * n + i) * inner + j].as_f64();
                }
                out[o * inner + j] = F::from_f64_lossy(s / n as f64);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self
            .tape
            .push_op(Tensor::new(shape, out)?, &[self.id], MeanAxisOp { axis }))
    }
}
