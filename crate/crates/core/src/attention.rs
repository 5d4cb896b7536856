//! Soft attention over patches: an additive score per LSTM output, then a
//! softmax restricted to the unmasked positions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::impl_parameters;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `A × H`
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    /// Scoring vector of length `A`.
    pub context: Array1<T>,
}

impl_parameters!(AttentionParams {
    weights: Weight,
    bias: Bias,
    context: Weight,
});

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((dim, hidden)),
            bias: Array1::zeros(dim),
            context: Array1::zeros(dim),
        }
    }
}

/// Normalized attention distribution. `mask[d] == true` marks a padded slot,
/// whose weight is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub p: Array1<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// `1/D` over the unmasked positions.
    pub fn uniform(mask: Vec<bool>) -> Result<Self> {
        let live = mask.iter().filter(|m| !**m).count();
        if live == 0 {
            return Err(Error::InvalidInput("every attention slot is masked".into()));
        }
        let w = T::one() / T::from_usize(live).expect("count");
        let p = mask.iter().map(|&m| if m { T::zero() } else { w }).collect();
        Ok(Self { p, mask })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Scores `q_d = v·tanh(W h_d + b)` for every row of `hidden`, plus the
/// `D × A` tanh activations for the reverse pass.
pub fn attention_scores<T: Scalar>(hidden: ArrayView2<T>, params: &AttentionParams<T>) -> Result<(Array1<T>, Array2<T>)> {
    if hidden.nrows() == 0 {
        return Err(Error::InvalidInput("attention needs at least one step".into()));
    }
    if hidden.ncols() != params.weights.ncols() {
        return Err(Error::InvalidShape(format!(
            "attention expects hidden size {}, got {}",
            params.weights.ncols(),
            hidden.ncols()
        )));
    }
    let mut act = hidden.dot(&params.weights.t());
    act += &params.bias;
    act.mapv_inplace(|v| v.tanh());
    let scores = act.dot(&params.context);
    Ok((scores, act))
}

/// Max-subtracted softmax over unmasked scores.
pub fn attention_weights<T: Scalar>(scores: ArrayView1<T>, mask: &[bool]) -> Result<AttentionWeights<T>> {
    if mask.len() != scores.len() {
        return Err(Error::InvalidShape(format!(
            "{} scores but {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&s, _)| s)
        .fold(None, |acc: Option<T>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or_else(|| Error::InvalidInput("every attention slot is masked".into()))?;
    let mut p = Array1::zeros(scores.len());
    let mut total = T::zero();
    for ((pd, &s), &m) in p.iter_mut().zip(scores.iter()).zip(mask) {
        if !m {
            *pd = (s - max).exp();
            total += *pd;
        }
    }
    p /= total;
    Ok(AttentionWeights { p, mask: mask.to_vec() })
}

/// Softmax reverse pass: `dq = p ⊙ (dp − ⟨dp, p⟩)`; masked slots get zero.
pub fn attention_weights_backward<T: Scalar>(weights: &AttentionWeights<T>, d_p: ArrayView1<T>) -> Array1<T> {
    let dot = weights.p.dot(&d_p);
    let mut dq = Array1::zeros(weights.len());
    Zip::from(&mut dq)
        .and(&weights.p)
        .and(&d_p)
        .and(&weights.mask)
        .for_each(|q, &p, &g, &m| {
            if !m {
                *q = p * (g - dot)
            }
        });
    dq
}

/// Reverse pass of [`attention_scores`]; accumulates into `grad` and returns
/// the gradient with respect to `hidden`.
pub fn attention_scores_backward<T: Scalar>(
    hidden: ArrayView2<T>,
    act: &Array2<T>,
    d_scores: ArrayView1<T>,
    params: &AttentionParams<T>,
    grad: &mut AttentionParams<T>,
) -> Array2<T> {
    grad.context += &act.t().dot(&d_scores);
    // d pre-activation = dq_d · v ⊙ (1 − a²)
    let mut d_pre = act.mapv(|a| T::one() - a * a);
    for (mut row, &dq) in d_pre.outer_iter_mut().zip(d_scores.iter()) {
        Zip::from(&mut row).and(&params.context).for_each(|r, &v| *r *= dq * v);
    }
    grad.weights += &d_pre.t().dot(&hidden);
    grad.bias += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&params.weights)
}
