//! A single-direction LSTM with a hand-written backward pass.
//!
//! The input projection for the whole sequence is batched into one matrix
//! product; only the hidden recurrence runs step by step. Gradients are
//! likewise accumulated with whole-sequence products after the reverse
//! scan collects per-step gate adjoints.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Weights of one LSTM direction. Gate order along the `4h` axis is
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h × input`
    pub w_ih: Array2<f64>,
    /// `4h × h`
    pub w_hh: Array2<f64>,
    /// `4h`
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }

    /// Glorot-uniform weights; zero biases except the forget gate at 1.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        glorot(&mut self.w_ih, rng);
        glorot(&mut self.w_hh, rng);
        self.b.fill(0.0);
        let h = self.hidden();
        self.b.slice_mut(s![h..2 * h]).fill(1.0);
    }
}

/// Fill a matrix uniformly from ±sqrt(6 / (rows + cols)).
pub fn glorot<R: Rng>(w: &mut Array2<f64>, rng: &mut R) {
    let bound = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Post-activation gates, `T × 4h`.
    gates: Array2<f64>,
    /// Cell states, `T × h`.
    cells: Array2<f64>,
    /// `tanh` of each cell state, `T × h`.
    tanh_cells: Array2<f64>,
    /// Hidden states, `T × h`.
    pub hs: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run the LSTM over `xs` (`T × input`) from zero initial state.
pub fn lstm_forward(params: &LstmParams, xs: ArrayView2<f64>) -> LstmTrace {
    let t_len = xs.nrows();
    let h = params.hidden();
    assert_eq!(xs.ncols(), params.input_dim(), "LSTM input width mismatch");

    // One product covers every step's input contribution.
    let pre_in = xs.dot(&params.w_ih.t());

    let mut gates = Array2::zeros((t_len, 4 * h));
    let mut cells = Array2::zeros((t_len, h));
    let mut tanh_cells = Array2::zeros((t_len, h));
    let mut hs = Array2::zeros((t_len, h));
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::<f64>::zeros(h);

    for t in 0..t_len {
        let mut pre = &pre_in.row(t) + &params.w_hh.dot(&h_prev) + &params.b;
        for (k, v) in pre.iter_mut().enumerate() {
            *v = if k / h == 2 { v.tanh() } else { sigmoid(*v) };
        }
        let (i, f, g, o) = (
            pre.slice(s![0..h]),
            pre.slice(s![h..2 * h]),
            pre.slice(s![2 * h..3 * h]),
            pre.slice(s![3 * h..4 * h]),
        );
        let c = &(&f * &c_prev) + &(&i * &g);
        let tanh_c = c.mapv(f64::tanh);
        let h_t = &o * &tanh_c;

        gates.row_mut(t).assign(&pre);
        cells.row_mut(t).assign(&c);
        tanh_cells.row_mut(t).assign(&tanh_c);
        hs.row_mut(t).assign(&h_t);
        h_prev = h_t;
        c_prev = c;
    }

    LstmTrace { gates, cells, tanh_cells, hs }
}

/// Backpropagate upstream gradients `d_hs` (`T × h`, one row per hidden
/// state) through the run recorded in `trace`. Parameter gradients
/// accumulate into `grads`; the return value is `d_xs` (`T × input`).
pub fn lstm_backward(
    params: &LstmParams,
    xs: ArrayView2<f64>,
    trace: &LstmTrace,
    d_hs: ArrayView2<f64>,
    grads: &mut LstmParams,
) -> Array2<f64> {
    let t_len = xs.nrows();
    let h = params.hidden();
    assert_eq!(d_hs.dim(), trace.hs.dim(), "upstream gradient shape mismatch");

    let mut d_gates = Array2::zeros((t_len, 4 * h));
    let mut dh_next = Array1::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);

    for t in (0..t_len).rev() {
        let dh = &d_hs.row(t) + &dh_next;
        let gates_t = trace.gates.row(t);
        let (i, f, g, o) = (
            gates_t.slice(s![0..h]),
            gates_t.slice(s![h..2 * h]),
            gates_t.slice(s![2 * h..3 * h]),
            gates_t.slice(s![3 * h..4 * h]),
        );
        let tanh_c = trace.tanh_cells.row(t);

        let d_o = &dh * &tanh_c;
        let dc = &dc_next + &(&(&dh * &o) * &tanh_c.mapv(|v| 1.0 - v * v));
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = if t == 0 {
            Array1::zeros(h)
        } else {
            &dc * &trace.cells.row(t - 1)
        };
        dc_next = &dc * &f;

        let mut row = d_gates.row_mut(t);
        for k in 0..h {
            row[k] = d_i[k] * i[k] * (1.0 - i[k]);
            row[h + k] = d_f[k] * f[k] * (1.0 - f[k]);
            row[2 * h + k] = d_g[k] * (1.0 - g[k] * g[k]);
            row[3 * h + k] = d_o[k] * o[k] * (1.0 - o[k]);
        }
        dh_next = params.w_hh.t().dot(&row.view());
    }

    grads.w_ih += &d_gates.t().dot(&xs);
    if t_len > 1 {
        let tail = d_gates.slice(s![1.., ..]);
        let prev = trace.hs.slice(s![..t_len - 1, ..]);
        grads.w_hh += &tail.t().dot(&prev);
    }
    grads.b += &d_gates.sum_axis(Axis(0));
    d_gates.dot(&params.w_ih)
}
