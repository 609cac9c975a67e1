//! Multichannel signal containers shared by every stage.

use crate::error::{Error, Result};

/// Channels x samples matrix of values in row-major order with a sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    data: Vec<f64>,
    channels: usize,
    samples: usize,
    rate_hz: f64,
}

impl MultichannelSignal {
    pub fn new(data: Vec<f64>, channels: usize, rate_hz: f64) -> Result<Self> {
        if channels == 0 || data.is_empty() || !data.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "{} values cannot form {} channels with at least one sample",
                data.len(),
                channels
            )));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling rate {rate_hz} must be positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "signal contains non-finite values".into(),
            ));
        }
        let samples = data.len() / channels;
        Ok(Self {
            data,
            channels,
            samples,
            rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], rate_hz: f64) -> Result<Self> {
        let samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::Shape("rows have unequal lengths".into()));
        }
        Self::new(rows.concat(), rows.len(), rate_hz)
    }

    pub fn zeros(channels: usize, samples: usize, rate_hz: f64) -> Result<Self> {
        Self::new(vec![0.0; channels * samples], channels, rate_hz)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.rate_hz
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.samples)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies samples `[start, start + len)` of every channel.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples || len == 0 {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside {} samples",
                start + len,
                self.samples
            )));
        }
        let mut out = Vec::with_capacity(len * self.channels);
        for row in self.rows() {
            out.extend_from_slice(&row[start..start + len]);
        }
        Self::new(out, self.channels, self.rate_hz)
    }
}

/// Single-channel nonnegative amplitude envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    data: Vec<f64>,
    rate_hz: f64,
}

impl Envelope {
    pub fn new(data: Vec<f64>, rate_hz: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Shape(
                "envelope must have at least one sample".into(),
            ));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling rate {rate_hz} must be positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "envelope contains non-finite values".into(),
            ));
        }
        Ok(Self { data, rate_hz })
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.data.len() as f64 / self.rate_hz
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_signal(&self) -> MultichannelSignal {
        MultichannelSignal {
            data: self.data.clone(),
            channels: 1,
            samples: self.data.len(),
            rate_hz: self.rate_hz,
        }
    }

    pub fn from_signal(signal: MultichannelSignal) -> Result<Self> {
        if signal.channels() != 1 {
            return Err(Error::Shape(format!(
                "envelope must be single-channel, got {} channels",
                signal.channels()
            )));
        }
        let rate = signal.rate_hz();
        Self::new(signal.into_vec(), rate)
    }
}
