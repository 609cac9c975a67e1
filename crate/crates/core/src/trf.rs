//! Lagged ridge regression from envelope to EEG (temporal response
//! functions) and global-field-power SNR analysis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dsp::{design_bandpass, filtfilt, resample};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::{Envelope, MultichannelSignal};

/// Envelope copies at each lag: `rows x lags`, row-major. Row `r` is time
/// `first_row + r`; column `k` holds `envelope[t - lags[k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedMatrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub lags: Vec<i64>,
    pub first_row: usize,
    pub rate_hz: f64,
}

impl LaggedMatrix {
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.data[r * self.lags.len() + k])
            .collect()
    }

    pub fn lag_axis_s(&self) -> Vec<f64> {
        self.lags.iter().map(|&l| l as f64 / self.rate_hz).collect()
    }
}

fn lag_range(lag_min_s: f64, lag_max_s: f64, rate_hz: f64) -> Result<(i64, i64)> {
    if !(lag_min_s < lag_max_s) {
        return Err(Error::InvalidParameter(format!(
            "lag window {lag_min_s}..{lag_max_s} s is empty"
        )));
    }
    let lo = (lag_min_s * rate_hz).round() as i64;
    let hi = (lag_max_s * rate_hz).round() as i64;
    if lo >= hi {
        return Err(Error::InvalidParameter(
            "lag window narrower than one sample".into(),
        ));
    }
    Ok((lo, hi))
}

/// Valid time rows `[start, end)` for lags `lo..=hi` over `n` samples.
fn valid_rows(n: usize, lo: i64, hi: i64) -> Result<(usize, usize)> {
    let start = hi.max(0) as usize;
    let end = n as i64 + lo.min(0);
    if end <= start as i64 {
        return Err(Error::InsufficientData(format!(
            "lag window of {} samples does not fit in {n} samples",
            hi - lo + 1
        )));
    }
    Ok((start, end as usize))
}

pub fn build_lagged_matrix(
    envelope: &Envelope,
    lag_min_s: f64,
    lag_max_s: f64,
) -> Result<LaggedMatrix> {
    let rate = envelope.rate_hz();
    let (lo, hi) = lag_range(lag_min_s, lag_max_s, rate)?;
    let x = envelope.as_slice();
    let (start, end) = valid_rows(x.len(), lo, hi)?;
    let lags: Vec<i64> = (lo..=hi).collect();
    let mut data = Vec::with_capacity((end - start) * lags.len());
    for t in start..end {
        data.extend(lags.iter().map(|&l| x[(t as i64 - l) as usize]));
    }
    Ok(LaggedMatrix {
        data,
        rows: end - start,
        lags,
        first_row: start,
        rate_hz: rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trf {
    /// `channels x lags`, row-major.
    pub weights: Vec<f64>,
    pub channels: usize,
    pub lag_axis_s: Vec<f64>,
    pub band_hz: Option<(f64, f64)>,
    pub rate_hz: f64,
    pub lambda: f64,
}

impl Trf {
    pub fn lags(&self) -> usize {
        self.lag_axis_s.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.weights[c * self.lags()..(c + 1) * self.lags()]
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normal equations of the lagged regression restricted to time rows
/// `[t0, t1)`: returns `(XtX, XtY)` with `XtY` as `lags x channels`.
struct Normal {
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
}

fn normal_equations(
    env: &[f64],
    eeg: &MultichannelSignal,
    lags: &[i64],
    t0: usize,
    t1: usize,
    exec: Execution,
) -> Normal {
    let shifted = |l: i64| &env[(t0 as i64 - l) as usize..(t1 as i64 - l) as usize];
    let n_lags = lags.len();
    let mut xtx = DMatrix::zeros(n_lags, n_lags);
    let rows = exec.map_range(n_lags, |i| {
        let xi = shifted(lags[i]);
        (i..n_lags)
            .map(|j| dot(xi, shifted(lags[j])))
            .collect::<Vec<_>>()
    });
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            xtx[(i, i + off)] = v;
            xtx[(i + off, i)] = v;
        }
    }
    let cols = exec.map_range(eeg.channels(), |c| {
        let y = &eeg.channel(c)[t0..t1];
        lags.iter().map(|&l| dot(shifted(l), y)).collect::<Vec<_>>()
    });
    let mut xty = DMatrix::zeros(n_lags, eeg.channels());
    for (c, col) in cols.into_iter().enumerate() {
        for (k, v) in col.into_iter().enumerate() {
            xty[(k, c)] = v;
        }
    }
    Normal { xtx, xty }
}

fn solve(normal: &Normal, lambda: f64) -> Result<DMatrix<f64>> {
    let n = normal.xtx.nrows();
    let a = &normal.xtx + DMatrix::identity(n, n) * lambda;
    let chol = a.clone().cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "lagged covariance not positive definite at lambda = {lambda}"
        ))
    })?;
    let l = chol.l();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        dmin = dmin.min(l[(i, i)]);
        dmax = dmax.max(l[(i, i)]);
    }
    if !(dmin > dmax * 1e-7) {
        return Err(Error::Singular(format!(
            "lagged covariance is numerically singular at lambda = {lambda}"
        )));
    }
    Ok(chol.solve(&normal.xty))
}

fn check_pair(envelope: &Envelope, eeg: &MultichannelSignal) -> Result<()> {
    if (envelope.rate_hz() - eeg.rate_hz()).abs() > 1e-9 {
        return Err(Error::RateMismatch {
            expected: eeg.rate_hz(),
            found: envelope.rate_hz(),
        });
    }
    if envelope.samples() != eeg.samples() {
        return Err(Error::Shape(format!(
            "envelope has {} samples, EEG {}",
            envelope.samples(),
            eeg.samples()
        )));
    }
    Ok(())
}

/// Ridge solution `(XtX + lambda I)^-1 Xt Y` for every channel.
pub fn fit_trf(
    envelope: &Envelope,
    eeg: &MultichannelSignal,
    lag_min_s: f64,
    lag_max_s: f64,
    lambda: f64,
) -> Result<Trf> {
    fit_trf_with(
        envelope,
        eeg,
        lag_min_s,
        lag_max_s,
        lambda,
        Execution::default(),
    )
}

pub fn fit_trf_with(
    envelope: &Envelope,
    eeg: &MultichannelSignal,
    lag_min_s: f64,
    lag_max_s: f64,
    lambda: f64,
    exec: Execution,
) -> Result<Trf> {
    check_pair(envelope, eeg)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ridge lambda {lambda} must be >= 0"
        )));
    }
    let rate = eeg.rate_hz();
    let (lo, hi) = lag_range(lag_min_s, lag_max_s, rate)?;
    let (t0, t1) = valid_rows(eeg.samples(), lo, hi)?;
    let lags: Vec<i64> = (lo..=hi).collect();
    let normal = normal_equations(envelope.as_slice(), eeg, &lags, t0, t1, exec);
    let w = solve(&normal, lambda)?;
    Ok(to_trf(&w, &lags, rate, lambda))
}

fn to_trf(w: &DMatrix<f64>, lags: &[i64], rate: f64, lambda: f64) -> Trf {
    let channels = w.ncols();
    let mut weights = Vec::with_capacity(channels * lags.len());
    for c in 0..channels {
        weights.extend((0..lags.len()).map(|k| w[(k, c)]));
    }
    Trf {
        weights,
        channels,
        lag_axis_s: lags.iter().map(|&l| l as f64 / rate).collect(),
        band_hz: None,
        rate_hz: rate,
        lambda,
    }
}

/// Default ridge grid: 1e-4 .. 1e4 in decades, scaled by the mean diagonal
/// of the lagged covariance.
pub fn lambda_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Fits on the first two thirds of the valid rows, scores every grid value
/// by mean predictive correlation on the last third, and refits on all
/// rows with the winner. Ties go to the larger lambda.
pub fn fit_trf_auto(
    envelope: &Envelope,
    eeg: &MultichannelSignal,
    lag_min_s: f64,
    lag_max_s: f64,
    exec: Execution,
) -> Result<Trf> {
    check_pair(envelope, eeg)?;
    let rate = eeg.rate_hz();
    let (lo, hi) = lag_range(lag_min_s, lag_max_s, rate)?;
    let (t0, t1) = valid_rows(eeg.samples(), lo, hi)?;
    let lags: Vec<i64> = (lo..=hi).collect();
    let split = t0 + (t1 - t0) * 2 / 3;
    if split - t0 < lags.len() || t1 - split < 2 {
        return Err(Error::InsufficientData(
            "too few samples for lambda selection".into(),
        ));
    }
    let env = envelope.as_slice();
    let train = normal_equations(env, eeg, &lags, t0, split, exec);
    let scale = train.xtx.trace() / lags.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for factor in lambda_grid() {
        let lambda = factor * scale;
        let Ok(w) = solve(&train, lambda) else {
            continue;
        };
        let scores = exec.map_range(eeg.channels(), |c| {
            let pred: Vec<f64> = (split..t1)
                .map(|t| {
                    lags.iter()
                        .enumerate()
                        .map(|(k, &l)| w[(k, c)] * env[(t as i64 - l) as usize])
                        .sum()
                })
                .collect();
            pearson(&pred, &eeg.channel(c)[split..t1])
        });
        let score = scores.iter().sum::<f64>() / scores.len() as f64;
        if best.is_none_or(|(s, _)| score >= s) {
            best = Some((score, lambda));
        }
    }
    let (_, lambda) =
        best.ok_or_else(|| Error::Singular("no grid value gave a solvable system".into()))?;
    let full = normal_equations(env, eeg, &lags, t0, t1, exec);
    Ok(to_trf(&solve(&full, lambda)?, &lags, rate, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfpCurve {
    pub lag_axis_s: Vec<f64>,
    pub values: Vec<f64>,
    /// Divisor applied by [`normalize_gfp`]; 1 for a raw curve.
    pub normalization: f64,
    pub peak_snr: f64,
    pub peak_lag_s: f64,
}

/// Per-lag population standard deviation across channels.
pub fn gfp(trf: &Trf) -> Result<GfpCurve> {
    if trf.channels < 2 {
        return Err(Error::InvalidParameter(
            "global field power needs at least 2 channels".into(),
        ));
    }
    let n = trf.channels as f64;
    let values: Vec<f64> = (0..trf.lags())
        .map(|k| {
            let col = || (0..trf.channels).map(|c| trf.weights[c * trf.lags() + k]);
            let mean = col().sum::<f64>() / n;
            (col().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let (i, &peak) =
        values.iter().enumerate().fold(
            (0, &f64::MIN),
            |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
        );
    Ok(GfpCurve {
        peak_snr: peak,
        peak_lag_s: trf.lag_axis_s[i],
        lag_axis_s: trf.lag_axis_s.clone(),
        values,
        normalization: 1.0,
    })
}

/// Divides by the mean over lags inside `background_s` (inclusive) so that
/// background activity equals 1; the peak then reads as an SNR.
pub fn normalize_gfp(curve: &GfpCurve, background_s: (f64, f64)) -> Result<GfpCurve> {
    let eps = 1e-9;
    let bg: Vec<f64> = curve
        .lag_axis_s
        .iter()
        .zip(&curve.values)
        .filter(|(&l, _)| l >= background_s.0 - eps && l <= background_s.1 + eps)
        .map(|(_, &v)| v)
        .collect();
    if bg.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "background window {background_s:?} contains no lags"
        )));
    }
    let mean = bg.iter().sum::<f64>() / bg.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Singular("background mean is zero".into()));
    }
    let values: Vec<f64> = curve.values.iter().map(|v| v / mean).collect();
    let (i, &peak) =
        values.iter().enumerate().fold(
            (0, &f64::MIN),
            |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
        );
    Ok(GfpCurve {
        lag_axis_s: curve.lag_axis_s.clone(),
        peak_snr: peak,
        peak_lag_s: curve.lag_axis_s[i],
        values,
        normalization: curve.normalization * mean,
    })
}

/// Analysis band and lag windows for one response class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrfPreset {
    pub name: String,
    /// Band-pass applied to both EEG and envelope; `None` keeps broadband.
    pub band_hz: Option<(f64, f64)>,
    pub rate_hz: f64,
    pub lag_min_s: f64,
    pub lag_max_s: f64,
    pub background_s: (f64, f64),
    pub filter_order: usize,
}

impl TrfPreset {
    pub fn gamma(band_hz: (f64, f64)) -> Self {
        Self {
            name: format!("gamma_{}_{}", band_hz.0, band_hz.1),
            band_hz: Some(band_hz),
            rate_hz: 512.0,
            lag_min_s: -0.050,
            lag_max_s: 0.150,
            background_s: (-0.050, -0.010),
            filter_order: 3,
        }
    }

    pub fn lf() -> Self {
        Self {
            name: "lf".into(),
            band_hz: None,
            rate_hz: 64.0,
            lag_min_s: -0.100,
            lag_max_s: 0.400,
            background_s: (-0.100, -0.020),
            filter_order: 3,
        }
    }
}

/// Result of a band analysis: the fitted TRF and its normalized GFP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandAnalysis {
    pub preset: TrfPreset,
    pub trf: Trf,
    pub gfp: GfpCurve,
}

/// Resamples to the preset rate, band-passes EEG and envelope, fits a TRF
/// with lambda selection, and normalizes its GFP.
pub fn analyze_band(
    eeg: &MultichannelSignal,
    envelope: &Envelope,
    preset: &TrfPreset,
    exec: Execution,
) -> Result<BandAnalysis> {
    let mut eeg = resample(eeg, preset.rate_hz, exec)?;
    let env_sig = resample(&envelope.to_signal(), preset.rate_hz, exec)?;
    let mut env: Vec<f64> = env_sig.into_vec();
    let n = eeg.samples().min(env.len());
    if eeg.samples() != n {
        eeg = eeg.window(0, n)?;
    }
    env.truncate(n);
    if let Some((lo, hi)) = preset.band_hz {
        let coeffs = design_bandpass(lo, hi, preset.filter_order, preset.rate_hz)?;
        eeg = crate::dsp::filter_zero_phase(&eeg, &coeffs, exec)?;
        env = filtfilt(&env, &coeffs);
    }
    let env = Envelope::new(env, preset.rate_hz)?;
    let mut trf = fit_trf_auto(&env, &eeg, preset.lag_min_s, preset.lag_max_s, exec)?;
    trf.band_hz = preset.band_hz;
    let curve = normalize_gfp(&gfp(&trf)?, preset.background_s)?;
    Ok(BandAnalysis {
        preset: preset.clone(),
        trf,
        gfp: curve,
    })
}

/// Averages GFP curves of several recordings/participants lag by lag and
/// renormalizes.
pub fn average_gfp(curves: &[GfpCurve], background_s: (f64, f64)) -> Result<GfpCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InsufficientData("no curves to average".into()))?;
    if curves.iter().any(|c| c.values.len() != first.values.len()) {
        return Err(Error::Shape("curves have different lag axes".into()));
    }
    let values = (0..first.values.len())
        .map(|k| curves.iter().map(|c| c.values[k]).sum::<f64>() / curves.len() as f64)
        .collect();
    normalize_gfp(
        &GfpCurve {
            lag_axis_s: first.lag_axis_s.clone(),
            values,
            normalization: 1.0,
            peak_snr: 0.0,
            peak_lag_s: 0.0,
        },
        background_s,
    )
}
