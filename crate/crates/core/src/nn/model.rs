//! The regressor: Conv1d(+ReLU) → MaxPool → BiLSTM → Dense.

use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::layers::{
    max_pool_backward, max_pool_forward, BiLstmLayer, Conv1dLayer, DenseLayer, DirectionCache,
};
use super::NnError;
use crate::tensor::Tensor;

/// Length of the sentence-embedding targets the regressor predicts.
pub const EMBEDDING_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool_size: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ModelConfig {
    /// Default architecture: k=5, 64 filters, pool 2, 128 hidden units per
    /// direction, 768 outputs.
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            filters: 64,
            kernel: 5,
            pool_size: 2,
            hidden: 128,
            out_dim: EMBEDDING_DIM,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let fields = [
            ("in_channels", self.in_channels),
            ("filters", self.filters),
            ("kernel", self.kernel),
            ("pool_size", self.pool_size),
            ("hidden", self.hidden),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let conv = self.filters * self.in_channels * self.kernel + self.filters;
        let dir = 4 * self.hidden * (self.filters + self.hidden) + 4 * self.hidden;
        let head = self.out_dim * 2 * self.hidden + self.out_dim;
        conv + 2 * dir + head
    }
}

/// Deliberate backward-pass corruptions used to show that the gradient
/// checker catches real bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    ConvSignFlip,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    conv_out: Tensor,
    pooled: Tensor,
    argmax: Vec<usize>,
    fwd: DirectionCache,
    bwd: DirectionCache,
    features: Vec<f64>,
}

impl ForwardCache {
    /// The `[T / pool, filters]` sequence fed to the BiLSTM.
    pub fn lstm_input(&self) -> &Tensor {
        &self.pooled
    }

    /// The concatenated final hidden states fed to the head.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Hash of the piecewise-linear branch taken (ReLU mask and pool
    /// argmax). Two inputs with equal signatures lie on the same smooth
    /// piece of the network.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &v in self.conv_out.data() {
            mix((v > 0.0) as u64);
        }
        for &i in &self.argmax {
            mix(i as u64);
        }
        h
    }
}

fn named<'a>(
    conv: &'a Conv1dLayer,
    lstm: &'a BiLstmLayer,
    head: &'a DenseLayer,
) -> [(&'static str, &'a Tensor); 10] {
    [
        ("conv.weight", &conv.weight),
        ("conv.bias", &conv.bias),
        ("lstm.forward.w_ih", &lstm.forward.w_ih),
        ("lstm.forward.w_hh", &lstm.forward.w_hh),
        ("lstm.forward.bias", &lstm.forward.bias),
        ("lstm.backward.w_ih", &lstm.backward.w_ih),
        ("lstm.backward.w_hh", &lstm.backward.w_hh),
        ("lstm.backward.bias", &lstm.backward.bias),
        ("head.weight", &head.weight),
        ("head.bias", &head.bias),
    ]
}

fn named_mut<'a>(
    conv: &'a mut Conv1dLayer,
    lstm: &'a mut BiLstmLayer,
    head: &'a mut DenseLayer,
) -> [&'a mut Tensor; 10] {
    [
        &mut conv.weight,
        &mut conv.bias,
        &mut lstm.forward.w_ih,
        &mut lstm.forward.w_hh,
        &mut lstm.forward.bias,
        &mut lstm.backward.w_ih,
        &mut lstm.backward.w_hh,
        &mut lstm.backward.bias,
        &mut head.weight,
        &mut head.bias,
    ]
}

/// Parameter gradients, laid out exactly like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub conv: Conv1dLayer,
    pub lstm: BiLstmLayer,
    pub head: DenseLayer,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            conv: Conv1dLayer::zeros(config.in_channels, config.filters, config.kernel),
            lstm: BiLstmLayer::zeros(config.filters, config.hidden),
            head: DenseLayer::zeros(2 * config.hidden, config.out_dim),
        }
    }

    pub fn named_tensors(&self) -> [(&'static str, &Tensor); 10] {
        named(&self.conv, &self.lstm, &self.head)
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        named_mut(&mut self.conv, &mut self.lstm, &mut self.head)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            dst.add_scaled(1.0, src);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressorModel {
    pub conv: Conv1dLayer,
    pub pool_size: usize,
    pub lstm: BiLstmLayer,
    pub head: DenseLayer,
    pub seed: u64,
    #[serde(skip)]
    cache: Option<ForwardCache>,
    #[serde(skip)]
    fault: Option<BackwardFault>,
}

impl PartialEq for RegressorModel {
    fn eq(&self, other: &Self) -> bool {
        self.conv == other.conv
            && self.pool_size == other.pool_size
            && self.lstm == other.lstm
            && self.head == other.head
    }
}

impl RegressorModel {
    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.0, drawn
    /// from a SplitMix64 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let conv = Conv1dLayer::init(&mut rng, config.in_channels, config.filters, config.kernel);
        let lstm = BiLstmLayer::init(&mut rng, config.filters, config.hidden);
        let head = DenseLayer::init(&mut rng, 2 * config.hidden, config.out_dim);
        Ok(Self::from_layers(conv, config.pool_size, lstm, head, seed))
    }

    /// Every weight and bias zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let grads = Gradients::zeros(&config);
        Ok(Self::from_layers(grads.conv, config.pool_size, grads.lstm, grads.head, 0))
    }

    pub(crate) fn from_layers(
        conv: Conv1dLayer,
        pool_size: usize,
        lstm: BiLstmLayer,
        head: DenseLayer,
        seed: u64,
    ) -> Self {
        Self {
            conv,
            pool_size,
            lstm,
            head,
            seed,
            cache: None,
            fault: None,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.conv.in_channels,
            filters: self.conv.out_channels,
            kernel: self.conv.kernel,
            pool_size: self.pool_size,
            hidden: self.lstm.hidden_size,
            out_dim: self.head.outputs(),
        }
    }

    pub fn named_parameters(&self) -> [(&'static str, &Tensor); 10] {
        named(&self.conv, &self.lstm, &self.head)
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 10] {
        self.cache = None;
        named_mut(&mut self.conv, &mut self.lstm, &mut self.head)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    fn check_window(&self, window: &Tensor) -> Result<(), NnError> {
        if window.rank() != 2 {
            return Err(NnError::Shape {
                what: "window rank",
                expected: "2 ([T, channels])".into(),
                actual: format!("{:?}", window.shape()),
            });
        }
        if window.shape()[1] != self.conv.in_channels {
            return Err(NnError::Shape {
                what: "window channels",
                expected: self.conv.in_channels.to_string(),
                actual: window.shape()[1].to_string(),
            });
        }
        if window.shape()[0] < self.pool_size {
            return Err(NnError::Shape {
                what: "window length",
                expected: format!(">= pool size {}", self.pool_size),
                actual: window.shape()[0].to_string(),
            });
        }
        Ok(())
    }

    /// Forward pass that hands the intermediates back to the caller instead
    /// of storing them, so one model can serve several threads.
    pub fn forward_pass(&self, window: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
        self.check_window(window)?;
        let conv_out = self.conv.forward(window);
        let (pooled, argmax) = max_pool_forward(&conv_out, self.pool_size);
        let fwd = self.lstm.forward.forward(&pooled, false);
        let bwd = self.lstm.backward.forward(&pooled, true);
        let h = self.lstm.hidden_size;
        let mut features = Vec::with_capacity(2 * h);
        features.extend_from_slice(fwd.final_hidden(h));
        features.extend_from_slice(bwd.final_hidden(h));
        let out = self.head.forward(&features);
        let out = Tensor::from_vec(&[out.len()], out)?;
        let cache = ForwardCache {
            input: window.clone(),
            conv_out,
            pooled,
            argmax,
            fwd,
            bwd,
            features,
        };
        Ok((out, cache))
    }

    pub fn backward_pass(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Gradients, NnError> {
        upstream.expect_shape("upstream gradient", &[self.head.outputs()])?;
        let mut grads = Gradients::zeros(&self.config());
        let d_features = self.head.backward(&cache.features, upstream.data(), &mut grads.head);
        let h = self.lstm.hidden_size;
        let mut d_pooled = Tensor::zeros(cache.pooled.shape());
        self.lstm.forward.backward(
            &cache.pooled,
            &cache.fwd,
            &d_features[..h],
            &mut grads.lstm.forward,
            &mut d_pooled,
        );
        self.lstm.backward.backward(
            &cache.pooled,
            &cache.bwd,
            &d_features[h..],
            &mut grads.lstm.backward,
            &mut d_pooled,
        );
        let steps = cache.conv_out.shape()[0];
        let d_conv = max_pool_backward(&d_pooled, &cache.argmax, steps);
        self.conv.backward(&cache.input, &cache.conv_out, &d_conv, &mut grads.conv);
        if self.fault == Some(BackwardFault::ConvSignFlip) {
            grads.conv.weight.scale(-1.0);
            grads.conv.bias.scale(-1.0);
        }
        Ok(grads)
    }

    /// Runs the network on a `[T, in_channels]` window and keeps the
    /// intermediates for a following [`backward`](Self::backward).
    pub fn forward(&mut self, window: &Tensor) -> Result<Tensor, NnError> {
        let (out, cache) = self.forward_pass(window)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<Gradients, NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        self.backward_pass(cache, upstream)
    }

    pub fn last_cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    /// Output without caching.
    pub fn predict(&self, window: &Tensor) -> Result<Tensor, NnError> {
        self.forward_pass(window).map(|(out, _)| out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            filters: 4,
            kernel: 3,
            pool_size: 2,
            hidden: 5,
            out_dim: 7,
        }
    }

    #[test]
    fn parameter_count_matches_tensors() {
        let m = RegressorModel::new(small(), 1).unwrap();
        assert_eq!(m.parameter_count(), small().parameter_count());
        let d = RegressorModel::new(ModelConfig::new(6), 1).unwrap();
        assert_eq!(d.parameter_count(), ModelConfig::new(6).parameter_count());
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let m = RegressorModel::new(small(), 3).unwrap();
        let b = m.lstm.forward.bias.data();
        assert!(b[..5].iter().all(|&v| v == 0.0));
        assert!(b[5..10].iter().all(|&v| v == 1.0));
        assert!(b[10..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let m = RegressorModel::new(small(), 3).unwrap();
        let up = Tensor::zeros(&[7]);
        assert!(matches!(m.backward(&up), Err(NnError::NoForwardCache)));
    }

    #[test]
    fn channel_mismatch_names_both_extents() {
        let mut m = RegressorModel::new(small(), 3).unwrap();
        let err = m.forward(&Tensor::zeros(&[10, 4])).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('4'), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut m = RegressorModel::new(small(), 9).unwrap();
        let x = Tensor::full(&[8, 3], 0.3);
        m.forward(&x).unwrap();
        let g = m.backward(&Tensor::zeros(&[7])).unwrap();
        for (_, t) in g.named_tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = RegressorModel::new(small(), 42).unwrap();
        let b = RegressorModel::new(small(), 42).unwrap();
        let c = RegressorModel::new(small(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
