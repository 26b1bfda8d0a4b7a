//! Fixed-length windows over a recording.
//!
//! Recordings no longer than one window become a single window padded at
//! the tail. Longer ones are cut into overlapping windows every stride,
//! plus one window aligned to the end so the final motion is never cut off.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SensorSequence;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("invalid window config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_seconds: f64,
    pub stride_seconds: f64,
    pub pad_value: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_seconds: 5.0,
            stride_seconds: 2.5,
            pad_value: 0.0,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), WindowError> {
        if !(self.window_seconds > 0.0) || !self.window_seconds.is_finite() {
            return Err(WindowError::Config(format!(
                "window_seconds must be positive, got {}",
                self.window_seconds
            )));
        }
        if !(self.stride_seconds > 0.0 && self.stride_seconds <= self.window_seconds) {
            return Err(WindowError::Config(format!(
                "stride_seconds must lie in (0, {}], got {}",
                self.window_seconds, self.stride_seconds
            )));
        }
        Ok(())
    }

    /// Rows per window at `rate_hz`: `window_seconds · rate_hz`, rounded
    /// half up (150 at 30 Hz, 250 at 50 Hz).
    pub fn window_samples(&self, rate_hz: f64) -> usize {
        round_half_up(self.window_seconds * rate_hz).max(1)
    }

    pub fn stride_samples(&self, rate_hz: f64) -> usize {
        round_half_up(self.stride_seconds * rate_hz).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub source_id: String,
    pub class_id: Option<String>,
    pub start_sample: usize,
    /// `[T, channels]`
    pub samples: Tensor,
    pub padded_tail: usize,
}

fn starts(length: usize, window: usize, stride: usize) -> Vec<usize> {
    if length <= window {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..=length - window).step_by(stride).collect();
    if out.last().is_none_or(|&s| s + window != length) {
        out.push(length - window);
    }
    out
}

pub fn segment(seq: &SensorSequence, cfg: &WindowConfig) -> Result<Vec<Window>, WindowError> {
    cfg.validate()?;
    let window = cfg.window_samples(seq.rate_hz);
    let stride = cfg.stride_samples(seq.rate_hz);
    let channels = seq.channels();
    let length = seq.len();
    let windows = starts(length, window, stride)
        .into_iter()
        .map(|start| {
            let end = (start + window).min(length);
            let mut data = Vec::with_capacity(window * channels);
            data.extend_from_slice(&seq.samples.data()[start * channels..end * channels]);
            let padded_tail = window - (end - start);
            data.resize(window * channels, cfg.pad_value);
            Window {
                source_id: seq.id.clone(),
                class_id: seq.class_id.clone(),
                start_sample: start,
                samples: Tensor::from_vec(&[window, channels], data).expect("window sized"),
                padded_tail,
            }
        })
        .collect();
    Ok(windows)
}

/// Number of windows [`segment`] would emit, without building them.
pub fn window_count(length: usize, rate_hz: f64, cfg: &WindowConfig) -> Result<usize, WindowError> {
    cfg.validate()?;
    let window = cfg.window_samples(rate_hz);
    let stride = cfg.stride_samples(rate_hz);
    if length <= window {
        return Ok(1);
    }
    let span = length - window;
    Ok(span / stride + 1 + usize::from(!span.is_multiple_of(stride)))
}
