//! Two stacked peephole LSTM layers over the ordered patch features.
//!
//! Gate pre-activations are stored gate-major in one `4H` block, ordered
//! input, forget, cell candidate, output. Peepholes are diagonal: the input
//! and forget gates see the previous cell state, the output gate sees the new
//! one.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{impl_parameters, join, Parameters, Visitor, VisitorMut};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams<T> {
    /// `4H × input`, gate blocks stacked by rows.
    pub input_weights: Array2<T>,
    /// `4H × H`
    pub recurrent_weights: Array2<T>,
    pub peephole_input: Array1<T>,
    pub peephole_forget: Array1<T>,
    pub peephole_output: Array1<T>,
    /// `4H`
    pub bias: Array1<T>,
}

impl_parameters!(LstmLayerParams {
    input_weights: Weight,
    recurrent_weights: Weight,
    peephole_input: Peephole,
    peephole_forget: Peephole,
    peephole_output: Peephole,
    bias: Bias,
});

impl<T: Scalar> LstmLayerParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input_weights: Array2::zeros((4 * hidden, input)),
            recurrent_weights: Array2::zeros((4 * hidden, hidden)),
            peephole_input: Array1::zeros(hidden),
            peephole_forget: Array1::zeros(hidden),
            peephole_output: Array1::zeros(hidden),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.ncols()
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.ncols()
    }

    /// `H × input` block of one gate's input weights.
    pub fn gate_input_weights(&self, gate: Gate) -> ArrayView2<'_, T> {
        let h = self.hidden();
        let g = gate as usize;
        self.input_weights.slice(s![g * h..(g + 1) * h, ..])
    }

    pub fn gate_recurrent_weights(&self, gate: Gate) -> ArrayView2<'_, T> {
        let h = self.hidden();
        let g = gate as usize;
        self.recurrent_weights.slice(s![g * h..(g + 1) * h, ..])
    }

    pub fn gate_bias(&self, gate: Gate) -> ArrayView1<'_, T> {
        let h = self.hidden();
        let g = gate as usize;
        self.bias.slice(s![g * h..(g + 1) * h])
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> ArrayViewMut1<'_, T> {
        let h = self.hidden();
        let g = gate as usize;
        self.bias.slice_mut(s![g * h..(g + 1) * h])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackParams<T> {
    pub layers: [LstmLayerParams<T>; 2],
}

impl<T: Scalar> StackParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            layers: [LstmLayerParams::zeros(input, hidden), LstmLayerParams::zeros(hidden, hidden)],
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[1].hidden()
    }
}

impl<T: Scalar> Parameters<T> for StackParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.layers[0].visit(&join(prefix, "layer1"), f);
        self.layers[1].visit(&join(prefix, "layer2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.layers[0].visit_mut(&join(prefix, "layer1"), f);
        self.layers[1].visit_mut(&join(prefix, "layer2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Array1<T>,
    pub c: Array1<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// Gate activations of one step, kept for the reverse pass.
#[derive(Debug, Clone, Copy)]
struct Activations<'a, T> {
    i: ArrayView1<'a, T>,
    f: ArrayView1<'a, T>,
    g: ArrayView1<'a, T>,
    o: ArrayView1<'a, T>,
}

/// Applies the gate nonlinearities in place on a `4H` pre-activation row.
/// `pre` must already hold `W_x x + W_h h_prev + b`.
fn step_in_place<T: Scalar>(
    mut pre: ArrayViewMut1<T>,
    c_prev: ArrayView1<T>,
    params: &LstmLayerParams<T>,
    mut c_out: ArrayViewMut1<T>,
    mut h_out: ArrayViewMut1<T>,
) {
    let h = params.hidden();
    let (mut ai, rest) = pre.view_mut().split_at(Axis(0), h);
    let (mut af, rest) = rest.split_at(Axis(0), h);
    let (mut ag, mut ao) = rest.split_at(Axis(0), h);
    Zip::from(&mut ai)
        .and(&c_prev)
        .and(&params.peephole_input)
        .for_each(|a, &c, &w| *a = (*a + w * c).sigmoid());
    Zip::from(&mut af)
        .and(&c_prev)
        .and(&params.peephole_forget)
        .for_each(|a, &c, &w| *a = (*a + w * c).sigmoid());
    ag.mapv_inplace(|a| a.tanh());
    Zip::from(&mut c_out)
        .and(&af)
        .and(&c_prev)
        .and(&ai)
        .and(&ag)
        .for_each(|c, &f, &cp, &i, &g| *c = f * cp + i * g);
    Zip::from(&mut ao)
        .and(&c_out)
        .and(&params.peephole_output)
        .for_each(|a, &c, &w| *a = (*a + w * c).sigmoid());
    Zip::from(&mut h_out)
        .and(&ao)
        .and(&c_out)
        .for_each(|hv, &o, &c| *hv = o * c.tanh());
}

/// One peephole LSTM step.
pub fn lstm_cell_step<T: Scalar>(x: ArrayView1<T>, prev: &LstmState<T>, params: &LstmLayerParams<T>) -> Result<LstmState<T>> {
    let hdim = params.hidden();
    if x.len() != params.input_size() || prev.h.len() != hdim || prev.c.len() != hdim {
        return Err(Error::InvalidShape(format!(
            "LSTM step expects input {} and state {hdim}, got {} and {}/{}",
            params.input_size(),
            x.len(),
            prev.h.len(),
            prev.c.len()
        )));
    }
    let mut pre = params.input_weights.dot(&x) + params.recurrent_weights.dot(&prev.h) + &params.bias;
    let mut next = LstmState::zeros(hdim);
    step_in_place(pre.view_mut(), prev.c.view(), params, next.c.view_mut(), next.h.view_mut());
    if next.c.iter().chain(next.h.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("lstm cell".into()));
    }
    Ok(next)
}

/// Per-layer record of a sequence pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    input: Array2<T>,
    /// `D × 4H` post-nonlinearity gate values.
    gates: Array2<T>,
    cells: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> LayerTrace<T> {
    fn acts(&self, t: usize) -> Activations<'_, T> {
        let h = self.cells.ncols();
        let row = self.gates.row(t);
        let (i, rest) = row.split_at(Axis(0), h);
        let (f, rest) = rest.split_at(Axis(0), h);
        let (g, o) = rest.split_at(Axis(0), h);
        Activations { i, f, g, o }
    }

    pub fn hidden(&self) -> &Array2<T> {
        &self.hidden
    }

    pub fn cells(&self) -> &Array2<T> {
        &self.cells
    }
}

/// Runs one layer over a `D × input` sequence from a zero state.
pub fn run_layer<T: Scalar>(input: ArrayView2<T>, params: &LstmLayerParams<T>) -> Result<LayerTrace<T>> {
    let d = input.nrows();
    let h = params.hidden();
    if input.ncols() != params.input_size() {
        return Err(Error::InvalidShape(format!(
            "LSTM layer expects {} inputs, got {}",
            params.input_size(),
            input.ncols()
        )));
    }
    let mut gates = input.dot(&params.input_weights.t());
    gates += &params.bias;
    let mut cells = Array2::zeros((d, h));
    let mut hidden = Array2::zeros((d, h));
    let zeros = Array1::zeros(h);
    for t in 0..d {
        let (h_prev, c_prev) = if t == 0 {
            (zeros.view(), zeros.view())
        } else {
            (hidden.row(t - 1), cells.row(t - 1))
        };
        let mut row = gates.row_mut(t);
        general_mat_mul_vec(&params.recurrent_weights, h_prev, &mut row);
        let c_prev = c_prev.to_owned();
        let (mut c_rows, _) = cells.view_mut().split_at(Axis(0), t + 1);
        let (mut h_rows, _) = hidden.view_mut().split_at(Axis(0), t + 1);
        step_in_place(row, c_prev.view(), params, c_rows.row_mut(t), h_rows.row_mut(t));
    }
    if cells.iter().chain(hidden.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("lstm layer".into()));
    }
    Ok(LayerTrace {
        input: input.to_owned(),
        gates,
        cells,
        hidden,
    })
}

fn general_mat_mul_vec<T: Scalar>(m: &Array2<T>, v: ArrayView1<T>, out: &mut ArrayViewMut1<T>) {
    ndarray::linalg::general_mat_vec_mul(T::one(), m, &v, T::one(), out);
}

/// Reverse pass of [`run_layer`] (full BPTT). `d_hidden` is the upstream
/// gradient on every step's hidden output and `d_last_cell` the gradient on
/// the final cell state. Accumulates into `grad` and returns the input
/// gradient.
pub fn run_layer_backward<T: Scalar>(
    trace: &LayerTrace<T>,
    d_hidden: ArrayView2<T>,
    d_last_cell: ArrayView1<T>,
    params: &LstmLayerParams<T>,
    grad: &mut LstmLayerParams<T>,
) -> Array2<T> {
    let (d, h) = trace.hidden.dim();
    let mut d_pre = Array2::zeros((d, 4 * h));
    let mut dh_next = Array1::<T>::zeros(h);
    let mut dc_next = d_last_cell.to_owned();
    let zeros = Array1::zeros(h);
    for t in (0..d).rev() {
        let a = trace.acts(t);
        let c = trace.cells.row(t);
        let c_prev = if t == 0 { zeros.view() } else { trace.cells.row(t - 1) };
        let mut row = d_pre.row_mut(t);
        let (mut dai, rest) = row.view_mut().split_at(Axis(0), h);
        let (mut daf, rest) = rest.split_at(Axis(0), h);
        let (mut dag, mut dao) = rest.split_at(Axis(0), h);
        let mut dc = Array1::zeros(h);
        for j in 0..h {
            let dh = d_hidden[[t, j]] + dh_next[j];
            let tc = c[j].tanh();
            let o = a.o[j];
            let da_o = dh * tc * o * (T::one() - o);
            let dcj = dc_next[j] + dh * o * (T::one() - tc * tc) + da_o * params.peephole_output[j];
            let (i, f, g) = (a.i[j], a.f[j], a.g[j]);
            let da_i = dcj * g * i * (T::one() - i);
            let da_f = dcj * c_prev[j] * f * (T::one() - f);
            let da_g = dcj * i * (T::one() - g * g);
            dao[j] = da_o;
            dai[j] = da_i;
            daf[j] = da_f;
            dag[j] = da_g;
            dc[j] = dcj;
            grad.peephole_input[j] += da_i * c_prev[j];
            grad.peephole_forget[j] += da_f * c_prev[j];
            grad.peephole_output[j] += da_o * c[j];
        }
        for j in 0..h {
            dc_next[j] = dc[j] * a.f[j] + dai[j] * params.peephole_input[j] + daf[j] * params.peephole_forget[j];
        }
        dh_next = params.recurrent_weights.t().dot(&d_pre.row(t));
    }
    general_mat_mul(T::one(), &d_pre.t(), &trace.input, T::one(), &mut grad.input_weights);
    if d > 1 {
        general_mat_mul(
            T::one(),
            &d_pre.slice(s![1.., ..]).t(),
            &trace.hidden.slice(s![..d - 1, ..]),
            T::one(),
            &mut grad.recurrent_weights,
        );
    }
    grad.bias += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&params.input_weights)
}

#[derive(Debug, Clone)]
pub struct SequenceOutput<T> {
    /// `D × H`: top-layer hidden state per step.
    pub hidden_per_step: Array2<T>,
    /// Top-layer cell state after the last step.
    pub final_cell_top: Array1<T>,
    pub traces: [LayerTrace<T>; 2],
}

/// Feeds `D × F` features through both layers from zero initial states.
pub fn run_stack<T: Scalar>(features: ArrayView2<T>, params: &StackParams<T>) -> Result<SequenceOutput<T>> {
    if features.nrows() == 0 {
        return Err(Error::InvalidInput("LSTM stack needs at least one step".into()));
    }
    let l1 = run_layer(features, &params.layers[0])?;
    let l2 = run_layer(l1.hidden.view(), &params.layers[1])?;
    let d = features.nrows();
    Ok(SequenceOutput {
        hidden_per_step: l2.hidden.clone(),
        final_cell_top: l2.cells.row(d - 1).to_owned(),
        traces: [l1, l2],
    })
}

/// Full-sequence BPTT through both layers; returns the feature gradient.
pub fn run_stack_backward<T: Scalar>(
    out: &SequenceOutput<T>,
    d_hidden: ArrayView2<T>,
    d_final_cell: ArrayView1<T>,
    params: &StackParams<T>,
    grad: &mut StackParams<T>,
) -> Array2<T> {
    let h1 = params.layers[0].hidden();
    let d_mid = run_layer_backward(&out.traces[1], d_hidden, d_final_cell, &params.layers[1], &mut grad.layers[1]);
    let zero = Array1::zeros(h1);
    run_layer_backward(&out.traces[0], d_mid.view(), zero.view(), &params.layers[0], &mut grad.layers[0])
}
