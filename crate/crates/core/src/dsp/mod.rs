//! Filter design, zero-phase filtering, resampling, envelope extraction and
//! segmentation.

pub mod envelope;
pub mod iir;
pub mod resample;
pub mod segment;

pub use envelope::{extract_envelope, EnvelopeExtractor, RectifiedLowpass};
pub use iir::{
    design_bandpass, design_lowpass, filter_zero_phase, filtfilt, IirCoefficients, Section,
};
pub use resample::{rational_ratio, resample, resample_slice};
pub use segment::{segment_signal, window_starts, Segment};
