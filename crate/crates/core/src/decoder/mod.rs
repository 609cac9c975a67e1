//! Twin-branch dilated-convolution similarity decoder shared by the LF and
//! gamma paths, with exact reverse-mode gradients and Adam.

mod adam;
mod model;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use model::{
    backward, cosine_over_time, forward, normalize_segment, BatchGradient, DecoderModel, Example,
    ForwardCache, Scalar,
};
pub use params::{init_params, Architecture, ConvLayout, DecoderParameters, Layout};

/// Per-pairing logits of both decoders; the feature space of the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogitPair {
    pub lf_logit: f64,
    pub gamma_logit: f64,
    /// `Some(true)` for a matched pairing.
    pub label: Option<bool>,
    pub eeg_segment: usize,
    pub stimulus_segment: usize,
}

impl LogitPair {
    pub fn new(lf_logit: f64, gamma_logit: f64, label: Option<bool>) -> Self {
        Self {
            lf_logit,
            gamma_logit,
            label,
            eeg_segment: 0,
            stimulus_segment: 0,
        }
    }

    pub fn features(&self) -> [f64; 2] {
        [self.lf_logit, self.gamma_logit]
    }
}
