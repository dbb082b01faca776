//! Central finite-difference gradient checking.
//!
//! The numerical side always runs in f64 using only forward evaluations, so
//! it is independent of every backward rule it is used to check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued function of several tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<'t, F: Real>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>>;
}

/// Precision used for the analytic (backward) gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Number of randomly chosen coordinates to probe (all when fewer exist).
    pub points: usize,
    pub step: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            points: 10,
            step: 1e-6,
            floor: 1e-3,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate_f64<S: ScalarFn>(f: &S, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    out.value()
        .item()
        .ok_or_else(|| TensorError::Usage("gradient check needs a scalar function".into()))
}

fn analytic<S: ScalarFn, F: Real>(f: &S, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::<F>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.cast::<F>())).collect();
    let out = f.eval(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Compares backward-pass gradients with central differences at randomly
/// chosen input coordinates.
pub fn check_gradients<S: ScalarFn>(f: &S, inputs: &[Tensor<f64>], cfg: GradCheck) -> Result<GradCheckReport> {
    let analytic = match cfg.precision {
        Precision::F32 => analytic::<S, f32>(f, inputs)?,
        Precision::F64 => analytic::<S, f64>(f, inputs)?,
    };
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if total <= cfg.points {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, cfg.points).into_vec();
        v.sort_unstable();
        v
    };
    let mut probes = Vec::with_capacity(picks.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for flat in picks {
        let (mut input, mut index) = (0, flat);
        while index >= inputs[input].numel() {
            index -= inputs[input].numel();
            input += 1;
        }
        let x0 = inputs[input].data()[index];
        let h = cfg.step * x0.abs().max(1.0);
        work[input].data_mut()[index] = x0 + h;
        let plus = evaluate_f64(f, &work)?;
        work[input].data_mut()[index] = x0 - h;
        let minus = evaluate_f64(f, &work)?;
        work[input].data_mut()[index] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[input][index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(Probe {
            input,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport { probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cube;
    impl ScalarFn for Cube {
        fn eval<'t, F: Real>(&self, _tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
            let x = inputs[0];
            Ok(x.mul(x)?.mul(x)?.sum())
        }
    }

    #[test]
    fn cube_gradient_is_three_x_squared() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let report = check_gradients(&Cube, &[x], GradCheck { precision: Precision::F64, ..Default::default() }).unwrap();
        assert_eq!(report.probes.len(), 3);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
        assert!((report.probes[2].analytic - 12.0).abs() < 1e-12);
    }
}
