//! 1-d and 2-d cross-correlation via im2col + gemm.

use crate::error::{Result, TensorError};
use crate::real::{gemm, Real};
use crate::tape::{Backward, BackwardArgs, Var};
use crate::tensor::Tensor;

/// Geometry of a 2-d convolution; the 1-d case uses `height = kh = 1`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride_h: usize,
    stride_w: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input position along the width is in range
    /// for kernel offset `kj`.
    #[inline]
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad_w > kj { (self.pad_w - kj).div_ceil(self.stride_w) } else { 0 };
        let hi = if self.w + self.pad_w > kj {
            ((self.w + self.pad_w - kj - 1) / self.stride_w + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn source_row(&self, ki: usize, oy: usize) -> Option<usize> {
        let y = (oy * self.stride_h + ki).checked_sub(self.pad_h)?;
        (y < self.h).then_some(y)
    }

    /// Writes one image's columns into `cols` (row stride `ld`, starting at
    /// column `offset`).
    fn im2col<F: Real>(&self, image: &[F], cols: &mut [F], ld: usize, offset: usize) {
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.oh {
                        let start = row * ld + offset + oy * self.ow;
                        let dst = &mut cols[start..start + self.ow];
                        match self.source_row(ki, oy) {
                            None => dst.fill(F::zero()),
                            Some(y) => {
                                dst[..lo].fill(F::zero());
                                dst[hi..].fill(F::zero());
                                let src = &plane[y * self.w..(y + 1) * self.w];
                                if self.stride_w == 1 {
                                    let x0 = lo + kj - self.pad_w;
                                    dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                                } else {
                                    for ox in lo..hi {
                                        dst[ox] = src[ox * self.stride_w + kj - self.pad_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, cols: &[F], ld: usize, offset: usize, image: &mut [F]) {
        for ci in 0..self.c_in {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.oh {
                        let Some(y) = self.source_row(ki, oy) else { continue };
                        let start = row * ld + offset + oy * self.ow;
                        let src = &cols[start..start + self.ow];
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        for ox in lo..hi {
                            dst[ox * self.stride_w + kj - self.pad_w] += src[ox];
                        }
                    }
                }
            }
        }
    }

    /// Samples per gemm so that the column buffer stays near 1M entries.
    fn chunk(&self) -> usize {
        (1_000_000 / (self.col_rows() * self.col_cols()).max(1)).clamp(1, self.batch.max(1))
    }
}

struct ConvOp {
    geo: Geometry,
}

impl<F: Real> Backward<F> for ConvOp {
    fn backward(&self, a: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>> {
        let g = self.geo;
        let (x, w) = (&a.inputs[0], &a.inputs[1]);
        let (rows, n) = (g.col_rows(), g.col_cols());
        let in_size = g.c_in * g.h * g.w;
        let out_size = g.c_out * n;
        let mut gx = a.needs[0].then(|| vec![F::zero(); g.batch * in_size]);
        let mut gw = a.needs[1].then(|| vec![F::zero(); g.c_out * rows]);
        let chunk = g.chunk();
        let mut gout = vec![F::zero(); g.c_out * chunk * n];
        let mut cols = vec![F::zero(); rows * chunk * n];
        for b0 in (0..g.batch).step_by(chunk) {
            let nb = chunk.min(g.batch - b0);
            let ld = nb * n;
            // output gradient as [C_out, nb * n]
            let gout = &mut gout[..g.c_out * ld];
            for bi in 0..nb {
                let src = &a.grad.data()[(b0 + bi) * out_size..(b0 + bi + 1) * out_size];
                for co in 0..g.c_out {
                    gout[co * ld + bi * n..co * ld + (bi + 1) * n].copy_from_slice(&src[co * n..(co + 1) * n]);
                }
            }
            let cols = &mut cols[..rows * ld];
            if let Some(gw) = gw.as_mut() {
                for bi in 0..nb {
                    g.im2col(&x.data()[(b0 + bi) * in_size..(b0 + bi + 1) * in_size], cols, ld, bi * n);
                }
                // dW += dOut * cols^T
                gemm(g.c_out, ld, rows, gout, false, cols, true, F::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                // dcols = W^T * dOut, reusing the column buffer
                gemm(rows, g.c_out, ld, w.data(), true, gout, false, F::zero(), cols);
                for bi in 0..nb {
                    g.col2im(cols, ld, bi * n, &mut gx[(b0 + bi) * in_size..(b0 + bi + 1) * in_size]);
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            gw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ]
    }
}

fn output_len(
    op: &'static str,
    axis: &str,
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::config(op, "stride must be >= 1"));
    }
    if kernel == 0 || kernel > size + 2 * padding {
        return Err(TensorError::dim(
            op,
            format!("{axis} (kernel {kernel} vs padded input {})", size + 2 * padding),
            format!("<= {}", size + 2 * padding),
            kernel,
        ));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

fn run_conv<'t, F: Real>(x: Var<'t, F>, weight: Var<'t, F>, geo: Geometry, out_shape: Vec<usize>) -> Result<Var<'t, F>> {
    let xv = x.value();
    let wv = weight.value();
    let (rows, n) = (geo.col_rows(), geo.col_cols());
    let in_size = geo.c_in * geo.h * geo.w;
    let out_size = geo.c_out * n;
    let mut out = vec![F::zero(); geo.batch * out_size];
    let chunk = geo.chunk();
    let mut cols_buf = vec![F::zero(); rows * chunk * n];
    let mut prod_buf = vec![F::zero(); geo.c_out * chunk * n];
    for b0 in (0..geo.batch).step_by(chunk) {
        let nb = chunk.min(geo.batch - b0);
        let ld = nb * n;
        let cols = &mut cols_buf[..rows * ld];
        for bi in 0..nb {
            geo.im2col(&xv.data()[(b0 + bi) * in_size..(b0 + bi + 1) * in_size], cols, ld, bi * n);
        }
        let prod = &mut prod_buf[..geo.c_out * ld];
        gemm(geo.c_out, rows, ld, wv.data(), false, cols, false, F::zero(), prod);
        for bi in 0..nb {
            let dst = &mut out[(b0 + bi) * out_size..(b0 + bi + 1) * out_size];
            for co in 0..geo.c_out {
                dst[co * n..(co + 1) * n].copy_from_slice(&prod[co * ld + bi * n..co * ld + (bi + 1) * n]);
            }
        }
    }
    Ok(x
        .tape
        .push_op(Tensor::new(out_shape, out)?, &[x.id, weight.id], ConvOp { geo }))
}

/// `[B, C_in, T] (*) [C_out, C_in, K] -> [B, C_out, T']` with
/// `T' = (T + 2 * padding - K) / stride + 1`.
pub fn conv1d<'t, F: Real>(
    x: Var<'t, F>,
    kernel: Var<'t, F>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, F>> {
    x.same_tape(&kernel)?;
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 3 {
        return Err(TensorError::dim("conv1d", "input rank", 3, xs.len()));
    }
    if ks.len() != 3 {
        return Err(TensorError::dim("conv1d", "kernel rank", 3, ks.len()));
    }
    if ks[1] != xs[1] {
        return Err(TensorError::dim("conv1d", "channel axis (1)", ks[1], xs[1]));
    }
    let t_out = output_len("conv1d", "time axis (2)", xs[2], ks[2], stride, padding)?;
    let geo = Geometry {
        batch: xs[0],
        c_in: xs[1],
        c_out: ks[0],
        h: 1,
        w: xs[2],
        kh: 1,
        kw: ks[2],
        stride_h: 1,
        stride_w: stride,
        pad_h: 0,
        pad_w: padding,
        oh: 1,
        ow: t_out,
    };
    run_conv(x, kernel, geo, vec![xs[0], ks[0], t_out])
}

/// `[B, C_in, H, W] (*) [C_out, C_in, KH, KW] -> [B, C_out, H', W']`; the same
/// stride and padding apply to both spatial axes.
pub fn conv2d<'t, F: Real>(
    x: Var<'t, F>,
    kernel: Var<'t, F>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, F>> {
    x.same_tape(&kernel)?;
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 {
        return Err(TensorError::dim("conv2d", "input rank", 4, xs.len()));
    }
    if ks.len() != 4 {
        return Err(TensorError::dim("conv2d", "kernel rank", 4, ks.len()));
    }
    if ks[1] != xs[1] {
        return Err(TensorError::dim("conv2d", "channel axis (1)", ks[1], xs[1]));
    }
    let oh = output_len("conv2d", "height axis (2)", xs[2], ks[2], stride, padding)?;
    let ow = output_len("conv2d", "width axis (3)", xs[3], ks[3], stride, padding)?;
    let geo = Geometry {
        batch: xs[0],
        c_in: xs[1],
        c_out: ks[0],
        h: xs[2],
        w: xs[3],
        kh: ks[2],
        kw: ks[3],
        stride_h: stride,
        stride_w: stride,
        pad_h: padding,
        pad_w: padding,
        oh,
        ow,
    };
    run_conv(x, kernel, geo, vec![xs[0], ks[0], oh, ow])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn direct_conv1d(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; c_out * t_out];
        for co in 0..c_out {
            for o in 0..t_out {
                let mut s = 0.0;
                for ci in 0..c_in {
                    for kk in 0..k {
                        let pos = (o * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < t {
                            s += x[ci * t + pos as usize] * w[(co * c_in + ci) * k + kk];
                        }
                    }
                }
                out[co * t_out + o] = s;
            }
        }
        out
    }

    #[test]
    fn conv1d_matches_direct_sum_with_stride_and_padding() {
        let (c_in, t, c_out, k) = (3, 11, 2, 4);
        let x: Vec<f64> = (0..c_in * t).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|i| ((i * 5 % 11) as f64 - 5.0) / 4.0).collect();
        for &(stride, pad) in &[(1, 0), (2, 1), (3, 2)] {
            let tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![1, c_in, t], x.clone()).unwrap());
            let wv = tape.constant(Tensor::new(vec![c_out, c_in, k], w.clone()).unwrap());
            let y = conv1d(xv, wv, stride, pad).unwrap().value();
            let want = direct_conv1d(&x, c_in, t, &w, c_out, k, stride, pad);
            assert_eq!(y.data().len(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_longer_than_padded_input_names_time_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 5]));
        let err = conv1d(x, w, 1, 0).unwrap_err();
        assert!(err.to_string().contains("time axis"), "{err}");
    }

    #[test]
    fn channel_mismatch_names_channel_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 8]));
        let w = tape.constant(Tensor::zeros(vec![1, 3, 3]));
        let err = conv1d(x, w, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
    }

    #[test]
    fn batch_spanning_several_gemm_chunks_matches_per_sample() {
        // 300 channels with a width-7 kernel leaves room for three samples per chunk
        let (b, c_in, t, c_out, k) = (7, 300, 125, 4, 7);
        let x: Vec<f64> = (0..b * c_in * t).map(|i| ((i * 31 % 97) as f64 - 48.0) / 50.0).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|i| ((i * 13 % 29) as f64 - 14.0) / 30.0).collect();
        let r: Vec<f64> = (0..b * c_out * t).map(|i| ((i * 7 % 17) as f64 - 8.0) / 9.0).collect();
        let run = |xs: &[f64], rs: &[f64], nb: usize| {
            let tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![nb, c_in, t], xs.to_vec()).unwrap(), true);
            let wv = tape.leaf(Tensor::new(vec![c_out, c_in, k], w.clone()).unwrap(), true);
            let rv = tape.constant(Tensor::new(vec![nb, c_out, t], rs.to_vec()).unwrap());
            let y = conv1d(xv, wv, 1, 3).unwrap();
            let loss = y.mul(rv).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            (y.value().data().to_vec(), g.get(xv).unwrap().data().to_vec(), g.get(wv).unwrap().data().to_vec())
        };
        let (y, gx, gw) = run(&x, &r, b);
        let mut gw_sum = vec![0.0; gw.len()];
        for i in 0..b {
            let (ys, gxs, gws) = run(&x[i * c_in * t..(i + 1) * c_in * t], &r[i * c_out * t..(i + 1) * c_out * t], 1);
            for (a, e) in y[i * c_out * t..(i + 1) * c_out * t].iter().zip(&ys) {
                assert!((a - e).abs() < 1e-9);
            }
            for (a, e) in gx[i * c_in * t..(i + 1) * c_in * t].iter().zip(&gxs) {
                assert!((a - e).abs() < 1e-9);
            }
            for (s, v) in gw_sum.iter_mut().zip(&gws) {
                *s += v;
            }
        }
        for (a, e) in gw.iter().zip(&gw_sum) {
            assert!((a - e).abs() < 1e-8 * (1.0 + e.abs()));
        }
    }
}
