use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named activations captured during one forward pass, in execution order.
#[derive(Clone, Debug, Default)]
pub struct TapRegistry {
    entries: Vec<(String, usize)>,
}

/// A captured activation together with the gradient that reached it.
#[derive(Clone, Debug)]
pub struct TapReading<F> {
    pub name: String,
    pub activation: Rc<Tensor<F>>,
    /// `None` when the activation was not on a differentiable path to the loss.
    pub grad: Option<Tensor<F>>,
}

impl TapRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<F: Real>(&mut self, name: impl Into<String>, var: Var<'_, F>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(TensorError::Usage(format!(
                "tap name '{name}' recorded twice in one forward pass"
            )));
        }
        self.entries.push((name, var.id()));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Pairs every tapped activation with its gradient from `grads`.
    pub fn read<F: Real>(&self, tape: &Tape<F>, grads: &Gradients<F>) -> Vec<TapReading<F>> {
        self.entries
            .iter()
            .map(|(name, id)| TapReading {
                name: name.clone(),
                activation: tape.value(*id),
                grad: grads.by_id(*id).cloned(),
            })
            .collect()
    }
}
