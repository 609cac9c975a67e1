//! Rational-ratio resampling with Kaiser-windowed sinc anti-alias filters.
//!
//! Each stage keeps 0..0.45 x min(rate in, rate out) in the passband and
//! reaches the stopband at the lower Nyquist frequency. Ratios whose reduced
//! terms exceed 64 are split into cascaded stages of at most 64 each.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::MultichannelSignal;

const MAX_TERM: u64 = 64;
const MAX_DENOMINATOR: u64 = 100_000;
const STOPBAND_DB: f64 = 80.0;

/// One polyphase stage: upsample by `up`, filter, downsample by `down`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub up: usize,
    pub down: usize,
    pub taps: Vec<f64>,
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass at `rate_hz` with the given passband and
/// stopband edges, scaled by `gain`.
pub fn kaiser_lowpass(pass_hz: f64, stop_hz: f64, rate_hz: f64, gain: f64) -> Vec<f64> {
    let atten = STOPBAND_DB;
    let beta = 0.1102 * (atten - 8.7);
    let width = 2.0 * PI * (stop_hz - pass_hz) / rate_hz;
    let mut n = ((atten - 7.95) / (2.285 * width)).ceil() as usize + 1;
    if n.is_multiple_of(2) {
        n += 1;
    }
    let cutoff = (pass_hz + stop_hz) / 2.0 / rate_hz;
    let centre = (n - 1) as f64 / 2.0;
    let i0_beta = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let t = i as f64 - centre;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / centre;
            let window = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            gain * sinc * window
        })
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn prime_factors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

fn group_factors(factors: Vec<u64>) -> Result<Vec<u64>> {
    if factors.iter().any(|&f| f > MAX_TERM) {
        return Err(Error::InvalidParameter(format!(
            "prime factor above {MAX_TERM}"
        )));
    }
    let mut groups: Vec<u64> = Vec::new();
    for f in factors.into_iter().rev() {
        match groups.iter_mut().find(|g| **g * f <= MAX_TERM) {
            Some(g) => *g *= f,
            None => groups.push(f),
        }
    }
    groups.sort_unstable_by(|a, b| b.cmp(a));
    Ok(groups)
}

/// Reduced `(up, down)` for `to_hz / from_hz`.
pub fn rational_ratio(from_hz: f64, to_hz: f64) -> Result<(u64, u64)> {
    let bad = || Error::ResampleRatio {
        from: from_hz,
        to: to_hz,
    };
    if !(from_hz > 0.0 && to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite()) {
        return Err(bad());
    }
    let ratio = to_hz / from_hz;
    for q in 1..=MAX_DENOMINATOR {
        let p = (ratio * q as f64).round();
        if p >= 1.0 && (p / q as f64 - ratio).abs() <= 1e-9 * ratio {
            let p = p as u64;
            let g = gcd(p, q);
            return Ok((p / g, q / g));
        }
    }
    Err(bad())
}

/// Stage plan for a rate change; empty when the rates are equal.
pub fn plan(from_hz: f64, to_hz: f64) -> Result<Vec<Stage>> {
    let (up, down) = rational_ratio(from_hz, to_hz)?;
    if up == 1 && down == 1 {
        return Ok(Vec::new());
    }
    let ratios: Vec<(u64, u64)> = if up <= MAX_TERM && down <= MAX_TERM {
        vec![(up, down)]
    } else {
        let err = |_| Error::ResampleRatio {
            from: from_hz,
            to: to_hz,
        };
        let ups = group_factors(prime_factors(up)).map_err(err)?;
        let downs = group_factors(prime_factors(down)).map_err(err)?;
        ups.into_iter()
            .map(|u| (u, 1))
            .chain(downs.into_iter().map(|d| (1, d)))
            .collect()
    };
    let mut rate = from_hz;
    let mut stages = Vec::with_capacity(ratios.len());
    for (u, d) in ratios {
        let out = rate * u as f64 / d as f64;
        let lower = rate.min(out);
        let inner = rate * u as f64;
        stages.push(Stage {
            up: u as usize,
            down: d as usize,
            taps: kaiser_lowpass(0.45 * lower, 0.5 * lower, inner, u as f64),
        });
        rate = out;
    }
    Ok(stages)
}

impl Stage {
    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up).div_ceil(self.down)
    }

    /// Zero-delay polyphase application. The input is extended by mirror
    /// reflection at both ends so edges see no artificial step.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (up, down) = (self.up, self.down);
        let n_taps = self.taps.len();
        let delay = (n_taps - 1) / 2;
        // Pad by a whole number of `down` input samples so the output grid
        // of the padded signal contains the unpadded one.
        let pad = (delay / up + 2).div_ceil(down) * down;
        let padded: Vec<f64> = (0..x.len() + 2 * pad)
            .map(|i| x[mirror(i as isize - pad as isize, x.len())])
            .collect();
        let upsampled_len = padded.len() * up;
        let skip = pad * up / down;
        (skip..skip + self.output_len(x.len()))
            .map(|m| {
                let j0 = m * down + delay;
                let mut acc = 0.0;
                let mut k = j0 % up;
                if j0 + up > upsampled_len {
                    k = k.max(j0 + up - upsampled_len);
                }
                while k < n_taps && k <= j0 {
                    acc += self.taps[k] * padded[(j0 - k) / up];
                    k += up;
                }
                acc
            })
            .collect()
    }
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

pub fn resample_slice(x: &[f64], stages: &[Stage]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for stage in stages {
        cur = stage.apply(&cur);
    }
    cur
}

/// Changes the sampling rate of every channel to `target_rate_hz`.
pub fn resample(
    signal: &MultichannelSignal,
    target_rate_hz: f64,
    exec: Execution,
) -> Result<MultichannelSignal> {
    let stages = plan(signal.rate_hz(), target_rate_hz)?;
    if stages.is_empty() {
        return Ok(signal.clone());
    }
    let rows: Vec<&[f64]> = signal.rows().collect();
    let out = exec.map(&rows, |row| resample_slice(row, &stages));
    MultichannelSignal::new(out.concat(), signal.channels(), target_rate_hz)
}
