//! Per-patch classification, attention-weighted aggregation of the patch
//! distributions, and the regularized negative log-likelihood.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::params::{impl_parameters, Parameters};
use crate::Scalar;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `n_classes × input`
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl_parameters!(HeadParams {
    weights: Weight,
    bias: Bias,
});

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(input: usize, n_classes: usize) -> Self {
        Self {
            weights: Array2::zeros((n_classes, input)),
            bias: Array1::zeros(n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution<T> {
    pub z: Array1<T>,
    /// `D × n`, one softmax row per patch.
    pub per_patch: Array2<T>,
}

pub fn softmax_rows<T: Scalar>(logits: &mut Array2<T>) {
    for mut row in logits.outer_iter_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Softmax of `W φ_d + b` for every patch row.
pub fn patch_distributions<T: Scalar>(phi: ArrayView2<T>, params: &HeadParams<T>) -> Result<Array2<T>> {
    if phi.ncols() != params.weights.ncols() {
        return Err(Error::InvalidShape(format!(
            "classifier expects {}-dim features, got {}",
            params.weights.ncols(),
            phi.ncols()
        )));
    }
    let mut logits = phi.dot(&params.weights.t());
    logits += &params.bias;
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Reverse pass of [`patch_distributions`]; returns `dφ`.
pub fn patch_distributions_backward<T: Scalar>(
    phi: ArrayView2<T>,
    probs: &Array2<T>,
    d_probs: ArrayView2<T>,
    params: &HeadParams<T>,
    grad: &mut HeadParams<T>,
) -> Array2<T> {
    let mut d_logits = Array2::zeros(probs.raw_dim());
    for ((mut out, p), g) in d_logits.outer_iter_mut().zip(probs.outer_iter()).zip(d_probs.outer_iter()) {
        let dot = p.dot(&g);
        Zip::from(&mut out).and(&p).and(&g).for_each(|o, &pv, &gv| *o = pv * (gv - dot));
    }
    grad.weights += &d_logits.t().dot(&phi);
    grad.bias += &d_logits.sum_axis(Axis(0));
    d_logits.dot(&params.weights)
}

/// `z = Σ_d p_d · φ̂_d`
pub fn aggregate<T: Scalar>(per_patch: Array2<T>, p: &AttentionWeights<T>) -> Result<ClassDistribution<T>> {
    if per_patch.nrows() != p.len() {
        return Err(Error::InvalidShape(format!(
            "{} patch distributions for {} attention weights",
            per_patch.nrows(),
            p.len()
        )));
    }
    let z = per_patch.t().dot(&p.p);
    Ok(ClassDistribution { z, per_patch })
}

/// Mean negative log-likelihood over a batch of `(z, label)` pairs.
pub fn nll<T: Scalar>(batch: &[(ArrayView1<T>, usize)]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (z, label) in batch {
        let p = *z.get(*label).ok_or_else(|| {
            Error::InvalidInput(format!("label {label} out of range for {} classes", z.len()))
        })?;
        total -= p.max(floor).ln();
    }
    Ok(total / T::from_usize(batch.len()).expect("batch size"))
}

/// `∂/∂z` of one sample's share of the batch-mean NLL.
pub fn nll_grad<T: Scalar>(z: ArrayView1<T>, label: usize, batch_size: usize) -> Array1<T> {
    let mut g = Array1::zeros(z.len());
    let floor = T::lit(PROB_FLOOR);
    if z[label] > floor {
        g[label] = -T::one() / (T::from_usize(batch_size).expect("batch size") * z[label]);
    }
    g
}

/// `Σ w²` over the decayed (weight-matrix) tensors.
pub fn squared_weight_norm<T: Scalar, P: Parameters<T> + ?Sized>(params: &P) -> T {
    let mut acc = T::zero();
    params.visit("", &mut |_, kind, t| {
        if kind.is_decayed() {
            acc += t.iter().fold(T::zero(), |a, &v| a + v * v);
        }
    });
    acc
}

/// Batch-mean NLL plus `λ Σ w²`.
pub fn loss<T: Scalar, P: Parameters<T> + ?Sized>(batch: &[(ArrayView1<T>, usize)], params: &P, lambda: T) -> Result<T> {
    if lambda < T::zero() {
        return Err(Error::Config("weight decay must be non-negative".into()));
    }
    Ok(nll(batch)? + lambda * squared_weight_norm(params))
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn argmax_class<T: Scalar>(z: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}
