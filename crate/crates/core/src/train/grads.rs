use crate::numerics::{Scalar, Tensor};
use crate::params::ParamTree;
use crate::transformer::Model;

/// Gradient buffers mirroring a model's parameters.
///
/// Unless `accumulate` is set, [`GradStore::begin_step`] clears the buffers.
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    pub grads: Model<T>,
    pub accumulate: bool,
}

impl<T: Scalar> GradStore<T> {
    pub fn new(model: &Model<T>) -> Self {
        GradStore {
            grads: model.zeros_like(),
            accumulate: false,
        }
    }

    pub fn zero(&mut self) {
        self.grads.zero_params();
    }

    pub fn begin_step(&mut self) {
        if !self.accumulate {
            self.zero();
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.grads.named()
    }

    /// `Σ|g|` over the parameters selected by `filter`.
    pub fn abs_sum(&self, filter: impl Fn(&str) -> bool) -> f64 {
        self.grads
            .named()
            .into_iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.data().iter().map(|v| v.abs().as_f64()).sum::<f64>())
            .sum()
    }
}
