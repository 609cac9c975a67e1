//! Auditory EEG match-mismatch decoding.
//!
//! Band-specific preprocessing, twin-branch envelope similarity decoders for
//! the low-frequency (64 Hz) and gamma-band (35-150 Hz at 512 Hz) paths, LDA
//! fusion of their logits, ensemble logit averaging, multi-imposter
//! evaluation, TRF/GFP response analysis, and a synthetic forward model that
//! fabricates cohorts with known responses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod composite;
pub mod decoder;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod parallel;
pub mod pipeline;
pub mod signal;
pub mod storage;
pub mod synth;
pub mod training;
pub mod trf;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use parallel::Execution;
pub use signal::{Envelope, MultichannelSignal};

/// Which decoder path a model or dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Lf,
    Gamma,
}

impl Band {
    pub const BOTH: [Band; 2] = [Band::Lf, Band::Gamma];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Lf => "lf",
            Band::Gamma => "gamma",
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lf" => Ok(Band::Lf),
            "gamma" => Ok(Band::Gamma),
            other => Err(Error::InvalidParameter(format!(
                "unknown band {other:?} (expected lf|gamma)"
            ))),
        }
    }
}

/// Derives an independent stream seed from a base seed and a stream index
/// (splitmix64 finalizer over the pair).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
