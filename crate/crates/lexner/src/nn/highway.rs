//! Highway layers: gated mixtures of a transformed and an untouched copy
//! of the input, `y = t ⊙ ReLU(W_h x + b_h) + (1 − t) ⊙ x` with
//! `t = σ(W_t x + b_t)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::lstm::glorot;

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayLayer {
    /// Transform-gate weights, `d × d`.
    pub w_t: Array2<f64>,
    pub b_t: Array1<f64>,
    /// Carry-path weights, `d × d`.
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
}

impl HighwayLayer {
    pub fn zeros(dim: usize) -> Self {
        HighwayLayer {
            w_t: Array2::zeros((dim, dim)),
            b_t: Array1::zeros(dim),
            w_h: Array2::zeros((dim, dim)),
            b_h: Array1::zeros(dim),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        glorot(&mut self.w_t, rng);
        self.b_t.fill(0.0);
        glorot(&mut self.w_h, rng);
        self.b_h.fill(0.0);
    }
}

/// A stack of highway layers sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Highway {
    pub layers: Vec<HighwayLayer>,
}

impl Highway {
    pub fn zeros(dim: usize, depth: usize) -> Self {
        Highway { layers: (0..depth).map(|_| HighwayLayer::zeros(dim)).collect() }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }
}

/// Per-layer state retained for the backward pass.
#[derive(Debug, Clone)]
struct LayerTrace {
    /// Input rows to this layer, `T × d`.
    x: Array2<f64>,
    /// Gate activations, `T × d`.
    gate: Array2<f64>,
    /// Pre-ReLU transform values, `T × d`.
    pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HighwayTrace {
    layers: Vec<LayerTrace>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run the stack over a batch of row vectors (`T × d`).
pub fn highway_batch(params: &Highway, xs: ArrayView2<f64>) -> (Array2<f64>, HighwayTrace) {
    let mut current = xs.to_owned();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let gate = (current.dot(&layer.w_t.t()) + &layer.b_t).mapv(sigmoid);
        let pre = current.dot(&layer.w_h.t()) + &layer.b_h;
        let transformed = pre.mapv(|v| v.max(0.0));
        let out = &gate * &transformed + (1.0 - &gate) * &current;
        layers.push(LayerTrace { x: current, gate, pre });
        current = out;
    }
    (current, HighwayTrace { layers })
}

/// The single-vector form of [`highway_batch`].
pub fn highway_forward(params: &Highway, x: &Array1<f64>) -> Array1<f64> {
    let xs = x.view().insert_axis(Axis(0));
    let (out, _) = highway_batch(params, xs);
    out.index_axis_move(Axis(0), 0)
}

/// Backpropagate through the stack: parameter gradients accumulate into
/// `grads` (same shape as `params`), and the input gradient is returned.
pub fn highway_backward(
    params: &Highway,
    trace: &HighwayTrace,
    d_out: ArrayView2<f64>,
    grads: &mut Highway,
) -> Array2<f64> {
    let mut d_current = d_out.to_owned();
    for ((layer, layer_trace), grad) in params
        .layers
        .iter()
        .zip(&trace.layers)
        .zip(&mut grads.layers)
        .rev()
    {
        let transformed = layer_trace.pre.mapv(|v| v.max(0.0));
        let d_transformed = &d_current * &layer_trace.gate;
        let d_gate = &d_current * &(&transformed - &layer_trace.x);
        let mut d_x = &d_current * &(1.0 - &layer_trace.gate);

        let mut d_pre = d_transformed;
        d_pre.zip_mut_with(&layer_trace.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let d_gate_pre = &d_gate * &(&layer_trace.gate * &(1.0 - &layer_trace.gate));

        grad.w_h += &d_pre.t().dot(&layer_trace.x);
        grad.b_h += &d_pre.sum_axis(Axis(0));
        grad.w_t += &d_gate_pre.t().dot(&layer_trace.x);
        grad.b_t += &d_gate_pre.sum_axis(Axis(0));

        d_x += &d_pre.dot(&layer.w_h);
        d_x += &d_gate_pre.dot(&layer.w_t);
        d_current = d_x;
    }
    d_current
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_stack(seed: u64, dim: usize, depth: usize) -> Highway {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut hw = Highway::zeros(dim, depth);
        hw.init(&mut rng);
        hw
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut hw = random_stack(1, 3, 1);
        hw.layers[0].b_t.fill(-1e9);
        let x = ndarray::array![0.4, -0.7, 2.0];
        let y = highway_forward(&hw, &x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn open_gate_is_pure_transform() {
        let mut hw = random_stack(2, 3, 1);
        hw.layers[0].b_t.fill(1e9);
        let x = ndarray::array![0.4, -0.7, 2.0];
        let y = highway_forward(&hw, &x);
        let pre = hw.layers[0].w_h.dot(&x) + &hw.layers[0].b_h;
        for (a, b) in y.iter().zip(pre.iter()) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_reimplementation() {
        let hw = random_stack(3, 5, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x: Array1<f64> = Array1::from_shape_fn(5, |_| rng.gen_range(-2.0..2.0));
        let y = highway_forward(&hw, &x);

        // Independent scalar loop over both layers.
        let mut cur: Vec<f64> = x.to_vec();
        for layer in &hw.layers {
            let mut next = vec![0.0; 5];
            for i in 0..5 {
                let mut t = layer.b_t[i];
                let mut h = layer.b_h[i];
                for j in 0..5 {
                    t += layer.w_t[[i, j]] * cur[j];
                    h += layer.w_h[[i, j]] * cur[j];
                }
                let t = 1.0 / (1.0 + (-t).exp());
                let h = h.max(0.0);
                next[i] = t * h + (1.0 - t) * cur[i];
            }
            cur = next;
        }
        for (a, b) in y.iter().zip(cur.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let hw = random_stack(5, 4, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let xs = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.5..1.5));
        let weights = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &Highway, x: &Array2<f64>| -> f64 {
            (&highway_batch(p, x.view()).0 * &weights).sum()
        };

        let (_, trace) = highway_batch(&hw, xs.view());
        let mut grads = Highway::zeros(4, 2);
        let d_xs = highway_backward(&hw, &trace, weights.view(), &mut grads);

        let h_step = 1e-6;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let close = (analytic - fd).abs() < 1e-8 || ((analytic - fd) / denom).abs() < 1e-5;
            assert!(close, "{what}: analytic={analytic} fd={fd}");
        };

        for idx in 0..xs.len() {
            let (r, c) = (idx / 4, idx % 4);
            let mut plus = xs.clone();
            plus[[r, c]] += h_step;
            let mut minus = xs.clone();
            minus[[r, c]] -= h_step;
            check(d_xs[[r, c]], (loss(&hw, &plus) - loss(&hw, &minus)) / (2.0 * h_step), "d_xs");
        }
        for layer_idx in 0..2 {
            for idx in 0..16 {
                let (r, c) = (idx / 4, idx % 4);
                for which in 0..2 {
                    let mut plus = hw.clone();
                    let mut minus = hw.clone();
                    if which == 0 {
                        plus.layers[layer_idx].w_t[[r, c]] += h_step;
                        minus.layers[layer_idx].w_t[[r, c]] -= h_step;
                    } else {
                        plus.layers[layer_idx].w_h[[r, c]] += h_step;
                        minus.layers[layer_idx].w_h[[r, c]] -= h_step;
                    }
                    let analytic = if which == 0 {
                        grads.layers[layer_idx].w_t[[r, c]]
                    } else {
                        grads.layers[layer_idx].w_h[[r, c]]
                    };
                    check(analytic, (loss(&plus, &xs) - loss(&minus, &xs)) / (2.0 * h_step), "w");
                }
            }
            for k in 0..4 {
                for which in 0..2 {
                    let mut plus = hw.clone();
                    let mut minus = hw.clone();
                    if which == 0 {
                        plus.layers[layer_idx].b_t[k] += h_step;
                        minus.layers[layer_idx].b_t[k] -= h_step;
                    } else {
                        plus.layers[layer_idx].b_h[k] += h_step;
                        minus.layers[layer_idx].b_h[k] -= h_step;
                    }
                    let analytic = if which == 0 {
                        grads.layers[layer_idx].b_t[k]
                    } else {
                        grads.layers[layer_idx].b_h[k]
                    };
                    check(analytic, (loss(&plus, &xs) - loss(&minus, &xs)) / (2.0 * h_step), "b");
                }
            }
        }
    }
}
