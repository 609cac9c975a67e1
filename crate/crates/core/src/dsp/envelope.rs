//! Amplitude envelope extraction.

use super::iir::{design_lowpass, filtfilt};
use super::resample::{plan, resample_slice};
use crate::error::{Error, Result};
use crate::signal::Envelope;

/// Turns single-channel audio into an envelope at a target rate.
pub trait EnvelopeExtractor: Send + Sync {
    fn extract(&self, audio: &[f64], rate_hz: f64, target_rate_hz: f64) -> Result<Envelope>;
}

/// Full-wave rectification, zero-phase Butterworth low-pass at
/// `0.45 x target rate`, resampling, and clamping at zero.
#[derive(Debug, Clone, Copy)]
pub struct RectifiedLowpass {
    pub order: usize,
}

impl Default for RectifiedLowpass {
    fn default() -> Self {
        Self { order: 3 }
    }
}

impl EnvelopeExtractor for RectifiedLowpass {
    fn extract(&self, audio: &[f64], rate_hz: f64, target_rate_hz: f64) -> Result<Envelope> {
        if audio.is_empty() {
            return Err(Error::InsufficientData("empty audio".into()));
        }
        if audio.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "audio contains non-finite values".into(),
            ));
        }
        let rectified: Vec<f64> = audio.iter().map(|v| v.abs()).collect();
        let cutoff = 0.45 * target_rate_hz.min(rate_hz);
        let smoothed = if cutoff < rate_hz / 2.0 {
            filtfilt(&rectified, &design_lowpass(cutoff, self.order, rate_hz)?)
        } else {
            rectified
        };
        let mut out = resample_slice(&smoothed, &plan(rate_hz, target_rate_hz)?);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        Envelope::new(out, target_rate_hz)
    }
}

pub fn extract_envelope(audio: &[f64], rate_hz: f64, target_rate_hz: f64) -> Result<Envelope> {
    RectifiedLowpass::default().extract(audio, rate_hz, target_rate_hz)
}
