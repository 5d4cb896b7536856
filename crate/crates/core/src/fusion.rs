//! Local/global feature construction and their per-patch dynamic weighting.
//!
//! Local features are attention-scaled patch features. The single global
//! feature comes from the top LSTM cell state after the last patch, projected
//! down to the patch-feature width. Each branch has its own scorer, and a
//! two-way softmax over the two scores gives the coherence weights that mix
//! the branches for every patch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::params::{impl_parameters, join, Parameters, Visitor, VisitorMut};
use crate::Scalar;

/// `v = w·tanh(W f + b)`
#[derive(Debug, Clone, PartialEq)]
pub struct BranchScorer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub context: Array1<T>,
}

impl_parameters!(BranchScorer {
    weights: Weight,
    bias: Bias,
    context: Weight,
});

impl<T: Scalar> BranchScorer<T> {
    pub fn zeros(feature: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((dim, feature)),
            bias: Array1::zeros(dim),
            context: Array1::zeros(dim),
        }
    }

    /// Scores each row of `f`; returns scores and tanh activations.
    pub fn score(&self, f: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
        let mut act = f.dot(&self.weights.t());
        act += &self.bias;
        act.mapv_inplace(|v| v.tanh());
        (act.dot(&self.context), act)
    }

    /// Reverse pass of [`score`](Self::score) for rows `f`; returns `df`.
    pub fn backward(&self, f: ArrayView2<T>, act: &Array2<T>, d_scores: ArrayView1<T>, grad: &mut BranchScorer<T>) -> Array2<T> {
        grad.context += &act.t().dot(&d_scores);
        let mut d_pre = act.mapv(|a| T::one() - a * a);
        for (mut row, &dv) in d_pre.outer_iter_mut().zip(d_scores.iter()) {
            Zip::from(&mut row).and(&self.context).for_each(|r, &w| *r *= dv * w);
        }
        grad.weights += &d_pre.t().dot(&f);
        grad.bias += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `F × H` projection of the final cell state.
    pub global_weights: Array2<T>,
    pub global_bias: Array1<T>,
    pub local_scorer: BranchScorer<T>,
    pub global_scorer: BranchScorer<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn zeros(hidden: usize, feature: usize, scorer_dim: usize) -> Self {
        Self {
            global_weights: Array2::zeros((feature, hidden)),
            global_bias: Array1::zeros(feature),
            local_scorer: BranchScorer::zeros(feature, scorer_dim),
            global_scorer: BranchScorer::zeros(feature, scorer_dim),
        }
    }
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "global_weights"), crate::params::ParamKind::Weight, self.global_weights.view().into_dyn());
        f(&join(prefix, "global_bias"), crate::params::ParamKind::Bias, self.global_bias.view().into_dyn());
        self.local_scorer.visit(&join(prefix, "local_scorer"), f);
        self.global_scorer.visit(&join(prefix, "global_scorer"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&join(prefix, "global_weights"), crate::params::ParamKind::Weight, self.global_weights.view_mut().into_dyn());
        f(&join(prefix, "global_bias"), crate::params::ParamKind::Bias, self.global_bias.view_mut().into_dyn());
        self.local_scorer.visit_mut(&join(prefix, "local_scorer"), f);
        self.global_scorer.visit_mut(&join(prefix, "global_scorer"), f);
    }
}

/// Coherence pair for one patch; the two entries sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence<T> {
    pub local: T,
    pub global: T,
}

impl<T: Scalar> Coherence<T> {
    /// Two-way softmax of the branch scores.
    pub fn from_scores(v_local: T, v_global: T) -> Self {
        let m = v_local.max(v_global);
        let el = (v_local - m).exp();
        let eg = (v_global - m).exp();
        let s = el + eg;
        Self {
            local: el / s,
            global: eg / s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature<T> {
    pub phi: Array1<T>,
    pub coherence: Coherence<T>,
}

/// `Lf_d = p_d · Y_d` row by row.
pub fn local_features<T: Scalar>(p: &AttentionWeights<T>, y: ArrayView2<T>) -> Result<Array2<T>> {
    if p.len() != y.nrows() {
        return Err(Error::InvalidShape(format!(
            "{} attention weights for {} patch features",
            p.len(),
            y.nrows()
        )));
    }
    let mut lf = y.to_owned();
    for (mut row, &pd) in lf.outer_iter_mut().zip(p.p.iter()) {
        row *= pd;
    }
    Ok(lf)
}

/// `Gf = tanh(P c + b)` from the top-layer final cell state.
pub fn global_feature<T: Scalar>(final_cell_top: ArrayView1<T>, params: &FusionParams<T>) -> Result<Array1<T>> {
    if final_cell_top.len() != params.global_weights.ncols() {
        return Err(Error::InvalidShape(format!(
            "global projection expects a {}-vector, got {}",
            params.global_weights.ncols(),
            final_cell_top.len()
        )));
    }
    Ok((params.global_weights.dot(&final_cell_top) + &params.global_bias).mapv(|v| v.tanh()))
}

/// Reverse pass of [`global_feature`]; returns the cell-state gradient.
pub fn global_feature_backward<T: Scalar>(
    final_cell_top: ArrayView1<T>,
    gf: &Array1<T>,
    d_gf: ArrayView1<T>,
    params: &FusionParams<T>,
    grad: &mut FusionParams<T>,
) -> Array1<T> {
    let d_pre = Zip::from(gf).and(&d_gf).map_collect(|&g, &d| d * (T::one() - g * g));
    let outer = d_pre
        .view()
        .insert_axis(Axis(1))
        .dot(&final_cell_top.insert_axis(Axis(0)));
    grad.global_weights += &outer;
    grad.global_bias += &d_pre;
    params.global_weights.t().dot(&d_pre)
}

/// Branch coherence for one patch.
pub fn coherence_scores<T: Scalar>(lf: ArrayView1<T>, gf: ArrayView1<T>, params: &FusionParams<T>) -> Coherence<T> {
    let (vl, _) = params.local_scorer.score(lf.insert_axis(Axis(0)));
    let (vg, _) = params.global_scorer.score(gf.insert_axis(Axis(0)));
    Coherence::from_scores(vl[0], vg[0])
}

/// `φ_d = c_local·Lf_d + c_global·Gf`
pub fn fuse<T: Scalar>(lf: ArrayView1<T>, gf: ArrayView1<T>, coherence: Coherence<T>) -> FusedFeature<T> {
    let phi = Zip::from(&lf)
        .and(&gf)
        .map_collect(|&l, &g| coherence.local * l + coherence.global * g);
    FusedFeature { phi, coherence }
}

/// Intermediates of a whole-sequence dynamic fusion.
#[derive(Debug, Clone)]
pub struct FusionTrace<T> {
    pub local_act: Array2<T>,
    pub global_act: Array2<T>,
    /// `D × 2`: local then global coherence per patch.
    pub coherence: Array2<T>,
}

/// Dynamic fusion of every local feature with the shared global feature.
pub fn fuse_sequence<T: Scalar>(lf: ArrayView2<T>, gf: ArrayView1<T>, params: &FusionParams<T>) -> (Array2<T>, FusionTrace<T>) {
    let (vl, local_act) = params.local_scorer.score(lf);
    let (vg, global_act) = params.global_scorer.score(gf.insert_axis(Axis(0)));
    let d = lf.nrows();
    let mut coherence = Array2::zeros((d, 2));
    let mut phi = Array2::zeros(lf.raw_dim());
    for t in 0..d {
        let c = Coherence::from_scores(vl[t], vg[0]);
        coherence[[t, 0]] = c.local;
        coherence[[t, 1]] = c.global;
        Zip::from(phi.row_mut(t))
            .and(lf.row(t))
            .and(&gf)
            .for_each(|o, &l, &g| *o = c.local * l + c.global * g);
    }
    (
        phi,
        FusionTrace {
            local_act,
            global_act,
            coherence,
        },
    )
}

/// Reverse pass of [`fuse_sequence`]; returns `(dLf, dGf)`.
pub fn fuse_sequence_backward<T: Scalar>(
    lf: ArrayView2<T>,
    gf: ArrayView1<T>,
    trace: &FusionTrace<T>,
    d_phi: ArrayView2<T>,
    params: &FusionParams<T>,
    grad: &mut FusionParams<T>,
) -> (Array2<T>, Array1<T>) {
    let d = lf.nrows();
    let mut d_lf = Array2::zeros(lf.raw_dim());
    let mut d_gf = Array1::zeros(gf.len());
    let mut d_vl = Array1::zeros(d);
    let mut d_vg = T::zero();
    for t in 0..d {
        let (cl, cg) = (trace.coherence[[t, 0]], trace.coherence[[t, 1]]);
        let g_row = d_phi.row(t);
        let dcl = g_row.dot(&lf.row(t));
        let dcg = g_row.dot(&gf);
        Zip::from(d_lf.row_mut(t)).and(&g_row).for_each(|o, &g| *o = cl * g);
        Zip::from(&mut d_gf).and(&g_row).for_each(|o, &g| *o += cg * g);
        let mean = cl * dcl + cg * dcg;
        d_vl[t] = cl * (dcl - mean);
        d_vg += cg * (dcg - mean);
    }
    d_lf += &params.local_scorer.backward(lf, &trace.local_act, d_vl.view(), &mut grad.local_scorer);
    let d_vg = Array1::from_elem(1, d_vg);
    let d_g = params
        .global_scorer
        .backward(gf.insert_axis(Axis(0)), &trace.global_act, d_vg.view(), &mut grad.global_scorer);
    d_gf += &d_g.row(0);
    (d_lf, d_gf)
}

/// `[Lf_d ; Gf]` per patch, used by the concatenation ablations.
pub fn concat_sequence<T: Scalar>(lf: ArrayView2<T>, gf: ArrayView1<T>) -> Array2<T> {
    let (d, f) = lf.dim();
    let mut out = Array2::zeros((d, f + gf.len()));
    for t in 0..d {
        let mut row = out.row_mut(t);
        row.slice_mut(ndarray::s![..f]).assign(&lf.row(t));
        row.slice_mut(ndarray::s![f..]).assign(&gf);
    }
    out
}

pub fn concat_sequence_backward<T: Scalar>(d_phi: ArrayView2<T>, f: usize) -> (Array2<T>, Array1<T>) {
    let d_lf = d_phi.slice(ndarray::s![.., ..f]).to_owned();
    let d_gf = d_phi.slice(ndarray::s![.., f..]).sum_axis(Axis(0));
    (d_lf, d_gf)
}
