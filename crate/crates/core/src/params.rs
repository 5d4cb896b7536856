//! Named traversal over every tensor a model owns.
//!
//! Optimizers, gradient clipping, weight decay, checkpoints and the gradient
//! checker all walk parameters through [`Parameters`], so a tensor's dotted
//! name (`encoder.conv1.kernels`) is the single key that ties them together.

use ndarray::{ArrayViewD, ArrayViewMutD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix or kernel; subject to weight decay.
    Weight,
    Bias,
    /// Diagonal cell-to-gate LSTM weights.
    Peephole,
    /// Batch-norm scale and shift.
    NormAffine,
    /// Batch-norm running statistics; saved but never optimized.
    RunningStat,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn is_decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

pub type Visitor<'a, T> = dyn FnMut(&str, ParamKind, ArrayViewD<'_, T>) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, T>) + 'a;

pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Parameters`] for a struct whose tensor fields are listed with
/// their kind.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident : $kind:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::params::Parameters<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut $crate::params::Visitor<'_, T>) {
                $( f(&$crate::params::join(prefix, stringify!($field)),
                     $crate::params::ParamKind::$kind,
                     self.$field.view().into_dyn()); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut $crate::params::VisitorMut<'_, T>) {
                $( f(&$crate::params::join(prefix, stringify!($field)),
                     $crate::params::ParamKind::$kind,
                     self.$field.view_mut().into_dyn()); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

/// Dotted names, kinds and shapes in visiting order.
pub fn describe<T, P: Parameters<T> + ?Sized>(params: &P) -> Vec<(String, ParamKind, Vec<usize>)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t.shape().to_vec())));
    out
}

/// Total number of trainable scalars.
pub fn count_trainable<T, P: Parameters<T> + ?Sized>(params: &P) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, kind, t| {
        if kind.is_trainable() {
            n += t.len()
        }
    });
    n
}
