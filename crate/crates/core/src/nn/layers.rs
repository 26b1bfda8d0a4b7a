//! Conv1d, max-pool, bidirectional LSTM and dense layers with hand-written
//! forward and backward passes.
//!
//! Sequences are time-major: a `[T, channels]` tensor holds one row per
//! time step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{axpy, matvec, matvec_t_acc, outer_acc, Tensor};

fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-padded 1-D convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out_channels, in_channels, kernel]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl Conv1dLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: glorot(
                rng,
                &[out_channels, in_channels, kernel],
                in_channels * kernel,
                out_channels * kernel,
            ),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn left_pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Fills `patch` with the receptive field of output step `t`, laid out
    /// `[in_channels, kernel]` to match a weight row. Out-of-range taps are 0.
    fn gather_patch(&self, input: &Tensor, t: usize, patch: &mut [f64]) {
        let steps = input.shape()[0];
        let pad = self.left_pad();
        for c in 0..self.in_channels {
            for j in 0..self.kernel {
                let src = t + j;
                patch[c * self.kernel + j] = if src < pad || src - pad >= steps {
                    0.0
                } else {
                    input.data()[(src - pad) * self.in_channels + c]
                };
            }
        }
    }

    /// Returns the post-ReLU activations `[T, out_channels]`.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let steps = input.shape()[0];
        let width = self.in_channels * self.kernel;
        let mut patch = vec![0.0; width];
        let mut out = Tensor::zeros(&[steps, self.out_channels]);
        for t in 0..steps {
            self.gather_patch(input, t, &mut patch);
            let row = out.row_mut(t);
            matvec(self.weight.data(), width, &patch, row);
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o = (*o + b).max(0.0);
            }
        }
        out
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the
    /// post-ReLU output. The input gradient is not needed and not computed.
    pub fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor, grads: &mut Conv1dLayer) {
        let steps = input.shape()[0];
        let width = self.in_channels * self.kernel;
        let mut patch = vec![0.0; width];
        let mut dpre = vec![0.0; self.out_channels];
        for t in 0..steps {
            let mut any = false;
            for ((d, &u), &o) in dpre.iter_mut().zip(upstream.row(t)).zip(output.row(t)) {
                *d = if o > 0.0 { u } else { 0.0 };
                any |= *d != 0.0;
            }
            if !any {
                continue;
            }
            self.gather_patch(input, t, &mut patch);
            outer_acc(&dpre, &patch, grads.weight.data_mut());
            axpy(1.0, &dpre, grads.bias.data_mut());
        }
    }
}

/// Non-overlapping max-pool over time. Returns the pooled `[T / size, F]`
/// tensor and, per pooled cell, the source time index of the maximum.
/// Ties go to the earliest index.
pub fn max_pool_forward(input: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let (steps, channels) = (input.shape()[0], input.shape()[1]);
    let pooled_steps = steps / size;
    let mut out = Tensor::zeros(&[pooled_steps, channels]);
    let mut argmax = vec![0usize; pooled_steps * channels];
    for p in 0..pooled_steps {
        for c in 0..channels {
            let mut best_t = p * size;
            let mut best = input.data()[best_t * channels + c];
            for t in p * size + 1..(p + 1) * size {
                let v = input.data()[t * channels + c];
                if v > best {
                    best = v;
                    best_t = t;
                }
            }
            out.data_mut()[p * channels + c] = best;
            argmax[p * channels + c] = best_t;
        }
    }
    (out, argmax)
}

/// Routes pooled gradients back to the argmax positions of a `[steps, F]`
/// input.
pub fn max_pool_backward(upstream: &Tensor, argmax: &[usize], steps: usize) -> Tensor {
    let channels = upstream.shape()[1];
    let mut grad = Tensor::zeros(&[steps, channels]);
    for (cell, &t) in argmax.iter().enumerate() {
        let c = cell % channels;
        grad.data_mut()[t * channels + c] += upstream.data()[cell];
    }
    grad
}

/// One direction of an LSTM. Gate blocks are stacked `[i, f, g, o]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    /// `[4H, input]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

/// Per-step activations kept for backpropagation through time. Indexed by
/// processing step, not by time.
#[derive(Clone, Debug)]
pub struct DirectionCache {
    reverse: bool,
    /// activated gates `[steps, 4H]`
    gates: Vec<f64>,
    /// cell states `[steps + 1, H]`, row 0 is the zero initial state
    cells: Vec<f64>,
    /// hidden states `[steps + 1, H]`
    hidden: Vec<f64>,
}

impl DirectionCache {
    pub fn final_hidden(&self, hidden_size: usize) -> &[f64] {
        let n = self.hidden.len() / hidden_size;
        &self.hidden[(n - 1) * hidden_size..]
    }
}

impl LstmDirection {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden_size, input_size]),
            w_hh: Tensor::zeros(&[4 * hidden_size, hidden_size]),
            bias: Tensor::zeros(&[4 * hidden_size]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, input_size: usize, hidden_size: usize) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden_size]);
        bias.data_mut()[hidden_size..2 * hidden_size].fill(1.0);
        Self {
            w_ih: glorot(rng, &[4 * hidden_size, input_size], input_size, 4 * hidden_size),
            w_hh: glorot(rng, &[4 * hidden_size, hidden_size], hidden_size, 4 * hidden_size),
            bias,
        }
    }

    fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn time_of(step: usize, steps: usize, reverse: bool) -> usize {
        if reverse {
            steps - 1 - step
        } else {
            step
        }
    }

    pub fn forward(&self, xs: &Tensor, reverse: bool) -> DirectionCache {
        let steps = xs.shape()[0];
        let input = xs.shape()[1];
        let h = self.hidden_size();
        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; (steps + 1) * h];
        let mut hidden = vec![0.0; (steps + 1) * h];
        let mut z = vec![0.0; 4 * h];
        let mut rec = vec![0.0; 4 * h];
        for s in 0..steps {
            let x = xs.row(Self::time_of(s, steps, reverse));
            matvec(self.w_ih.data(), input, x, &mut z);
            matvec(self.w_hh.data(), h, &hidden[s * h..(s + 1) * h], &mut rec);
            let g = &mut gates[s * 4 * h..(s + 1) * 4 * h];
            for k in 0..4 * h {
                let pre = z[k] + rec[k] + self.bias.data()[k];
                g[k] = if (2 * h..3 * h).contains(&k) {
                    pre.tanh()
                } else {
                    sigmoid(pre)
                };
            }
            let (prev, next) = cells.split_at_mut((s + 1) * h);
            let c_prev = &prev[s * h..];
            let c = &mut next[..h];
            let hid = &mut hidden[(s + 1) * h..(s + 2) * h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                c[j] = f * c_prev[j] + i * gg;
                hid[j] = o * c[j].tanh();
            }
        }
        DirectionCache {
            reverse,
            gates,
            cells,
            hidden,
        }
    }

    /// Backpropagation through time from a gradient on the final hidden
    /// state. Accumulates into `grads` and into the input gradient `dxs`.
    pub fn backward(
        &self,
        xs: &Tensor,
        cache: &DirectionCache,
        d_final: &[f64],
        grads: &mut LstmDirection,
        dxs: &mut Tensor,
    ) {
        let steps = xs.shape()[0];
        let h = self.hidden_size();
        let mut dh = d_final.to_vec();
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for s in (0..steps).rev() {
            let t = Self::time_of(s, steps, cache.reverse);
            let g = &cache.gates[s * 4 * h..(s + 1) * 4 * h];
            let c = &cache.cells[(s + 1) * h..(s + 2) * h];
            let c_prev = &cache.cells[s * h..(s + 1) * h];
            let h_prev = &cache.hidden[s * h..(s + 1) * h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dcj * gg * i * (1.0 - i);
                dz[h + j] = dcj * c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dcj * i * (1.0 - gg * gg);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            axpy(1.0, &dz, grads.bias.data_mut());
            outer_acc(&dz, xs.row(t), grads.w_ih.data_mut());
            outer_acc(&dz, h_prev, grads.w_hh.data_mut());
            matvec_t_acc(self.w_ih.data(), xs.shape()[1], &dz, dxs.row_mut(t));
            dh.fill(0.0);
            matvec_t_acc(self.w_hh.data(), h, &dz, &mut dh);
        }
    }
}

/// Bidirectional LSTM read out as `[h_forward_final, h_backward_final]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BiLstmLayer {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            forward: LstmDirection::zeros(input_size, hidden_size),
            backward: LstmDirection::zeros(input_size, hidden_size),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, input_size: usize, hidden_size: usize) -> Self {
        let forward = LstmDirection::init(rng, input_size, hidden_size);
        let backward = LstmDirection::init(rng, input_size, hidden_size);
        Self {
            input_size,
            hidden_size,
            forward,
            backward,
        }
    }
}

/// Fully connected layer with identity activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: glorot(rng, &[outputs, inputs], inputs, outputs),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.outputs()];
        matvec(self.weight.data(), self.inputs(), x, &mut y);
        for (yi, b) in y.iter_mut().zip(self.bias.data()) {
            *yi += b;
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grads: &mut DenseLayer) -> Vec<f64> {
        outer_acc(upstream, x, grads.weight.data_mut());
        axpy(1.0, upstream, grads.bias.data_mut());
        let mut dx = vec![0.0; self.inputs()];
        matvec_t_acc(self.weight.data(), self.inputs(), upstream, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_tie_goes_to_earliest_index() {
        let input = Tensor::from_vec(&[2, 1], vec![2.0, 2.0]).unwrap();
        let (pooled, argmax) = max_pool_forward(&input, 2);
        assert_eq!(pooled.data(), &[2.0]);
        assert_eq!(argmax, vec![0]);
        let up = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let grad = max_pool_backward(&up, &argmax, 2);
        assert_eq!(grad.data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_pool_drops_trailing_odd_step() {
        let input = Tensor::from_vec(&[5, 1], vec![1.0, 3.0, 2.0, 0.0, 9.0]).unwrap();
        let (pooled, argmax) = max_pool_forward(&input, 2);
        assert_eq!(pooled.data(), &[3.0, 2.0]);
        assert_eq!(argmax, vec![1, 2]);
    }

    #[test]
    fn max_pool_gradient_partitions_upstream() {
        let input = Tensor::from_vec(&[6, 2], (0..12).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        let (_, argmax) = max_pool_forward(&input, 3);
        let up = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 4.0]).unwrap();
        let grad = max_pool_backward(&up, &argmax, 6);
        for group in 0..2 {
            for c in 0..2 {
                let total: f64 = (group * 3..group * 3 + 3).map(|t| grad.data()[t * 2 + c]).sum();
                assert_eq!(total, up.data()[group * 2 + c]);
            }
        }
    }

    #[test]
    fn conv_same_padding_keeps_length_and_matches_direct_sum() {
        let mut conv = Conv1dLayer::zeros(2, 1, 3);
        conv.weight = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        conv.bias = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 2.0, 1.0, 3.0, 0.0, 4.0, 2.0]).unwrap();
        let out = conv.forward(&x);
        assert_eq!(out.shape(), &[4, 1]);
        // t = 1 sees rows 0..=2
        let direct = 0.25 + (1.0 * 1.0 + 2.0 * 2.0 + 3.0 * 3.0) + (-1.0 * 0.0 + 0.5 * 1.0 + 0.0 * 0.0);
        assert_eq!(out.data()[1], direct);
        // t = 0 has a zero left tap
        let first = 0.25 + (2.0 * 1.0 + 3.0 * 2.0) + (0.5 * 0.0 + 0.0 * 1.0);
        assert_eq!(out.data()[0], first);
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let lstm = LstmDirection::zeros(3, 4);
        let xs = Tensor::full(&[5, 3], 1.5);
        let cache = lstm.forward(&xs, false);
        assert!(cache.final_hidden(4).iter().all(|&v| v == 0.0));
    }
}
