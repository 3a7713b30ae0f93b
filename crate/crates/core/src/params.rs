//! Named views over parameter tensors.
//!
//! Every parameter container implements [`ParamTree`], which lists its
//! tensors in a fixed order under dotted names. Gradients, optimizer moments
//! and checkpoints reuse the same container types, so a gradient store is
//! simply a zeroed clone of the parameters it mirrors.

use crate::numerics::{Scalar, Tensor};

pub trait ParamTree<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_params(&mut self) {
        for (_, t) in self.named_mut() {
            t.fill(T::zero());
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_params();
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convenience for implementing [`ParamTree`] on a struct with tensor fields.
macro_rules! visit_tensors {
    ($self:ident, $prefix:ident, $out:ident, [$($field:ident),* $(,)?]) => {
        $( $out.push(($crate::params::join($prefix, stringify!($field)), & $self.$field)); )*
    };
}

macro_rules! visit_tensors_mut {
    ($self:ident, $prefix:ident, $out:ident, [$($field:ident),* $(,)?]) => {
        $( $out.push(($crate::params::join($prefix, stringify!($field)), &mut $self.$field)); )*
    };
}

pub(crate) use visit_tensors;
pub(crate) use visit_tensors_mut;
