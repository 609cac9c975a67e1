use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Band;

/// Shape of the decoder. Both branches share `widths`, `kernel` and
/// `dilations`; the EEG branch starts from `spatial_width` projected
/// channels, the stimulus branch from the single envelope channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub spatial_width: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: 64,
            spatial_width: 8,
            widths: vec![16, 16, 16],
            kernel: 3,
            dilations: vec![1, 3, 9],
        }
    }
}

impl Architecture {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.spatial_width == 0 || self.kernel == 0 {
            return Err(Error::InvalidParameter(
                "architecture dimensions must be positive".into(),
            ));
        }
        if self.widths.is_empty() || self.widths.len() != self.dilations.len() {
            return Err(Error::InvalidParameter(format!(
                "{} widths vs {} dilations",
                self.widths.len(),
                self.dilations.len()
            )));
        }
        if self.widths.contains(&0) || self.dilations.contains(&0) {
            return Err(Error::InvalidParameter(
                "widths and dilations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Samples consumed by the valid convolutions of one branch.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|d| (self.kernel - 1) * d)
            .sum::<usize>()
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut take = |n: usize| {
            let start = offset;
            offset += n;
            start
        };
        let spatial = take(self.channels * self.spatial_width);
        let mut stack = |input: usize| {
            let mut in_w = input;
            let mut layers = Vec::new();
            for (&out_w, &dilation) in self.widths.iter().zip(&self.dilations) {
                let weight = take(out_w * in_w * self.kernel);
                let bias = take(out_w);
                layers.push(ConvLayout {
                    in_w,
                    out_w,
                    kernel: self.kernel,
                    dilation,
                    weight,
                    bias,
                });
                in_w = out_w;
            }
            layers
        };
        let eeg = stack(self.spatial_width);
        let stim = stack(1);
        let readout_w = take(self.output_width());
        let readout_b = take(1);
        Layout {
            spatial,
            spatial_len: self.channels * self.spatial_width,
            eeg,
            stim,
            readout_w,
            readout_b,
            total: offset,
        }
    }
}

/// Offsets of one convolution layer inside the flat parameter vector.
/// Weights are indexed `[out][in][tap]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayout {
    pub in_w: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayout {
    pub fn weight_len(&self) -> usize {
        self.out_w * self.in_w * self.kernel
    }

    pub fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }
}

/// Offsets of every parameter tensor. The spatial projection is indexed
/// `[channel][projected]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub spatial: usize,
    pub spatial_len: usize,
    pub eeg: Vec<ConvLayout>,
    pub stim: Vec<ConvLayout>,
    pub readout_w: usize,
    pub readout_b: usize,
    pub total: usize,
}

/// All weights of one decoder instance, stored flat in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParameters {
    pub architecture: Architecture,
    pub band: Band,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

impl DecoderParameters {
    pub fn zeros(architecture: Architecture, band: Band, rate_hz: f64) -> Result<Self> {
        architecture.validate()?;
        let n = architecture.layout().total;
        Ok(Self {
            architecture,
            band,
            rate_hz,
            values: vec![0.0; n],
        })
    }

    pub fn layout(&self) -> Layout {
        self.architecture.layout()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn readout_bias(&self) -> f64 {
        self.values[self.layout().readout_b]
    }

    pub fn set_readout_bias(&mut self, b: f64) {
        let i = self.layout().readout_b;
        self.values[i] = b;
    }

    /// `(fan_in, range)` for every weight tensor, biases excluded.
    pub fn weight_blocks(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let layout = self.layout();
        let mut blocks = vec![(
            self.architecture.channels,
            layout.spatial..layout.spatial + layout.spatial_len,
        )];
        for l in layout.eeg.iter().chain(&layout.stim) {
            blocks.push((l.in_w * l.kernel, l.weight..l.weight + l.weight_len()));
        }
        let width = self.architecture.output_width();
        blocks.push((width, layout.readout_w..layout.readout_w + width));
        blocks
    }
}

/// Uniform initialization in `±1/sqrt(fan_in)` per weight tensor; biases zero.
pub fn init_params(
    seed: u64,
    band: Band,
    architecture: Architecture,
    rate_hz: f64,
) -> Result<DecoderParameters> {
    let mut params = DecoderParameters::zeros(architecture, band, rate_hz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (fan_in, range) in params.weight_blocks() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut params.values[range] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}
