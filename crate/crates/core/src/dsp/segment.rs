use crate::error::{Error, Result};
use crate::signal::MultichannelSignal;

/// A window cut from a longer signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub signal: MultichannelSignal,
}

fn to_samples(seconds: f64, rate_hz: f64, what: &str) -> Result<usize> {
    let exact = seconds * rate_hz;
    let n = exact.round();
    if !(seconds > 0.0) || (exact - n).abs() > 1e-6 || n < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "{what} of {seconds} s is not a positive whole number of samples at {rate_hz} Hz"
        )));
    }
    Ok(n as usize)
}

/// Start indices of every full window; no partial tail.
pub fn window_starts(total: usize, len: usize, hop: usize) -> Vec<usize> {
    if len == 0 || hop == 0 || len > total {
        return Vec::new();
    }
    (0..=(total - len) / hop).map(|i| i * hop).collect()
}

/// Cuts `signal` into full windows of `length_s` every `hop_s`.
pub fn segment_signal(
    signal: &MultichannelSignal,
    length_s: f64,
    hop_s: f64,
) -> Result<Vec<Segment>> {
    let rate = signal.rate_hz();
    let len = to_samples(length_s, rate, "segment length")?;
    let hop = to_samples(hop_s, rate, "hop")?;
    window_starts(signal.samples(), len, hop)
        .into_iter()
        .map(|start| {
            Ok(Segment {
                start,
                signal: signal.window(start, len)?,
            })
        })
        .collect()
}
