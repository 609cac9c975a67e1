//! Butterworth design as cascaded second-order sections and zero-phase
//! (forward-backward) filtering.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::MultichannelSignal;

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Section {
    pub fn poles(&self) -> [Complex64; 2] {
        let [a1, a2] = self.a;
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let z2 = z_inv * z_inv;
        (b0 + b1 * z_inv + b2 * z2) / (1.0 + a1 * z_inv + a2 * z2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass { low_hz: f64, high_hz: f64 },
    Lowpass { cutoff_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirCoefficients {
    pub sections: Vec<Section>,
    pub kind: FilterKind,
    pub order: usize,
    pub rate_hz: f64,
}

impl IirCoefficients {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / self.rate_hz);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.magnitude(freq_hz).log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.poles().iter().all(|p| p.norm() < 1.0))
    }

    /// Runs the cascade causally over `x` in place, from rest.
    pub fn apply(&self, x: &mut [f64]) {
        for s in &self.sections {
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in x.iter_mut() {
                let input = *v;
                let y = b0 * input + z1;
                z1 = b1 * input - a1 * y + z2;
                z2 = b2 * input - a2 * y;
                *v = y;
            }
        }
    }

    /// Length after which the impulse response stays below 1e-5 of its peak.
    pub fn settle_length(&self) -> usize {
        const MAX: usize = 1 << 20;
        let mut block = 1024usize;
        loop {
            let mut h = vec![0.0; block];
            h[0] = 1.0;
            self.apply(&mut h);
            let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let last = h.iter().rposition(|v| v.abs() >= 1e-5 * peak).unwrap_or(0);
            // Require a quiet tail at least as long as the settled part.
            if last * 2 < block || block >= MAX {
                return last + 1;
            }
            block *= 2;
        }
    }
}

fn prewarp(freq_hz: f64, rate_hz: f64) -> f64 {
    2.0 * rate_hz * (PI * freq_hz / rate_hz).tan()
}

fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn bilinear(s: Complex64, rate_hz: f64) -> Complex64 {
    let fs2 = 2.0 * rate_hz;
    (fs2 + s) / (fs2 - s)
}

/// Groups conjugate pole pairs (and pairs of real poles) into sections, each
/// taking up to two zeros from `zeros`.
fn to_sections(poles: &[Complex64], zeros: &[f64]) -> Vec<Section> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > TOL).collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= TOL)
        .map(|p| p.re)
        .collect();
    real.sort_by(f64::total_cmp);
    let mut zeros = zeros.iter().copied();
    let mut num = |n: usize| -> [f64; 3] {
        let z: Vec<f64> = (&mut zeros).take(n).collect();
        match z.as_slice() {
            [] => [1.0, 0.0, 0.0],
            [z0] => [1.0, -z0, 0.0],
            [z0, z1, ..] => [1.0, -(z0 + z1), z0 * z1],
        }
    };
    let mut sections = Vec::new();
    for p in complex {
        sections.push(Section {
            b: num(2),
            a: [-2.0 * p.re, p.norm_sqr()],
        });
    }
    for pair in real.chunks(2) {
        match *pair {
            [r1, r2] => sections.push(Section {
                b: num(2),
                a: [-(r1 + r2), r1 * r2],
            }),
            [r] => sections.push(Section {
                b: num(1),
                a: [-r, 0.0],
            }),
            _ => unreachable!(),
        }
    }
    sections
}

fn finish(mut coeffs: IirCoefficients, norm_freq_hz: f64) -> Result<IirCoefficients> {
    if !coeffs.is_stable() {
        return Err(Error::UnstableFilter(format!(
            "{:?} order {}",
            coeffs.kind, coeffs.order
        )));
    }
    let gain = coeffs.magnitude(norm_freq_hz);
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::UnstableFilter(format!("degenerate gain {gain}")));
    }
    for b in &mut coeffs.sections[0].b {
        *b /= gain;
    }
    Ok(coeffs)
}

/// Butterworth band-pass of the given prototype order (2 x `order` poles),
/// bilinear transform with edge prewarping; unit gain at the geometric centre.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    rate_hz: f64,
) -> Result<IirCoefficients> {
    if !(rate_hz > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < rate_hz / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "band-pass edges must satisfy 0 < {low_hz} < {high_hz} < {}",
            rate_hz / 2.0
        )));
    }
    if !(1..=8).contains(&order) {
        return Err(Error::InvalidParameter(format!(
            "order {order} outside 1..=8"
        )));
    }
    let w1 = prewarp(low_hz, rate_hz);
    let w2 = prewarp(high_hz, rate_hz);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;
    let mut poles = Vec::with_capacity(2 * order);
    for p in prototype_poles(order) {
        let half = p * bw / 2.0;
        let root = (half * half - w0_sq).sqrt();
        poles.push(bilinear(half + root, rate_hz));
        poles.push(bilinear(half - root, rate_hz));
    }
    // Zeros: `order` at s = 0 (z = 1) and `order` at infinity (z = -1).
    let zeros: Vec<f64> = (0..order).flat_map(|_| [1.0, -1.0]).collect();
    let coeffs = IirCoefficients {
        sections: to_sections(&poles, &zeros),
        kind: FilterKind::Bandpass { low_hz, high_hz },
        order,
        rate_hz,
    };
    let centre = rate_hz / PI * (w0_sq.sqrt() / (2.0 * rate_hz)).atan();
    finish(coeffs, centre)
}

/// Butterworth low-pass with unit DC gain.
pub fn design_lowpass(cutoff_hz: f64, order: usize, rate_hz: f64) -> Result<IirCoefficients> {
    if !(rate_hz > 0.0 && cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "low-pass cutoff must satisfy 0 < {cutoff_hz} < {}",
            rate_hz / 2.0
        )));
    }
    if !(1..=8).contains(&order) {
        return Err(Error::InvalidParameter(format!(
            "order {order} outside 1..=8"
        )));
    }
    let wc = prewarp(cutoff_hz, rate_hz);
    let poles: Vec<Complex64> = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, rate_hz))
        .collect();
    let zeros = vec![-1.0; order];
    let coeffs = IirCoefficients {
        sections: to_sections(&poles, &zeros),
        kind: FilterKind::Lowpass { cutoff_hz },
        order,
        rate_hz,
    };
    finish(coeffs, 0.0)
}

/// Odd-reflection padding, forward pass, backward pass, trim.
pub fn filtfilt(x: &[f64], coeffs: &IirCoefficients) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * coeffs.settle_length()).min(n - 1);
    let mut buf = Vec::with_capacity(n + 2 * pad);
    buf.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    buf.extend_from_slice(x);
    buf.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    coeffs.apply(&mut buf);
    buf.reverse();
    coeffs.apply(&mut buf);
    buf.reverse();
    buf[pad..pad + n].to_vec()
}

/// Zero-phase filtering of every channel. The signal rate must equal the
/// design rate.
pub fn filter_zero_phase(
    signal: &MultichannelSignal,
    coeffs: &IirCoefficients,
    exec: Execution,
) -> Result<MultichannelSignal> {
    if (signal.rate_hz() - coeffs.rate_hz).abs() > 1e-9 {
        return Err(Error::RateMismatch {
            expected: coeffs.rate_hz,
            found: signal.rate_hz(),
        });
    }
    let rows: Vec<&[f64]> = signal.rows().collect();
    let filtered = exec.map(&rows, |row| filtfilt(row, coeffs));
    MultichannelSignal::new(filtered.concat(), signal.channels(), signal.rate_hz())
}
