//! Forward model for synthetic cohorts: speech-like envelopes, EEG with
//! known low-frequency and gamma-band envelope responses, and 1/f noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::{Envelope, MultichannelSignal};
use crate::storage::manifest::{DatasetManifest, ParticipantEntry, RecordingEntry, Split};
use crate::storage::tensor::{write_tensor, DType};

/// Damped sinusoid `exp(-(tau - onset) / decay) * sin(2 pi f (tau - onset))`
/// on `[onset, end]`, zero elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelShape {
    pub freq_hz: f64,
    pub onset_s: f64,
    pub decay_s: f64,
    pub end_s: f64,
}

impl KernelShape {
    pub fn lf() -> Self {
        Self {
            freq_hz: 4.0,
            onset_s: 0.0,
            decay_s: 0.1,
            end_s: 0.4,
        }
    }

    pub fn gamma() -> Self {
        Self {
            freq_hz: 80.0,
            onset_s: 0.010,
            decay_s: 0.008,
            end_s: 0.040,
        }
    }

    pub fn value(&self, tau: f64) -> f64 {
        if tau < self.onset_s || tau > self.end_s {
            return 0.0;
        }
        let u = tau - self.onset_s;
        (-u / self.decay_s).exp() * (2.0 * PI * self.freq_hz * u).sin()
    }

    /// Kernel taps at lags `0, 1/rate, ...` up to `end_s`.
    pub fn sample(&self, rate_hz: f64) -> Vec<f64> {
        let n = (self.end_s * rate_hz).floor() as usize + 1;
        (0..n).map(|k| self.value(k as f64 / rate_hz)).collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.freq_hz, self.onset_s, self.decay_s, self.end_s]
            .iter()
            .all(|v| v.is_finite())
            && self.decay_s > 0.0
            && self.onset_s >= 0.0
            && self.end_s > self.onset_s;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid kernel {self:?}")))
        }
    }
}

/// Forward-model settings for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub lf_kernel: KernelShape,
    pub gamma_kernel: KernelShape,
    pub g_lf: f64,
    pub g_gamma: f64,
    /// Spectral exponent of the per-channel noise (power ~ 1/f^alpha).
    pub noise_exponent: f64,
    pub noise_level: f64,
    pub background_rank: usize,
    pub background_level: f64,
    /// `n_channels x 2` spatial patterns, row-major: column 0 LF, column 1 gamma.
    pub mixing: Vec<f64>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_channels: usize, g_lf: f64, g_gamma: f64, seed: u64) -> Self {
        Self {
            n_channels,
            lf_kernel: KernelShape::lf(),
            gamma_kernel: KernelShape::gamma(),
            g_lf,
            g_gamma,
            noise_exponent: 1.0,
            noise_level: 1.0,
            background_rank: 3,
            background_level: 0.5,
            mixing: base_patterns(n_channels, seed),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be positive".into()));
        }
        if !(self.g_lf >= 0.0 && self.g_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gains must be >= 0, got {} and {}",
                self.g_lf, self.g_gamma
            )));
        }
        if !(self.noise_level >= 0.0
            && self.background_level >= 0.0
            && self.noise_exponent.is_finite())
        {
            return Err(Error::Config(
                "noise settings must be finite and nonnegative".into(),
            ));
        }
        self.lf_kernel.validate()?;
        self.gamma_kernel.validate()?;
        if self.mixing.len() != 2 * self.n_channels || self.mixing.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "mixing must hold {} finite values, got {}",
                2 * self.n_channels,
                self.mixing.len()
            )));
        }
        // Full column rank: Gram determinant bounded away from zero.
        let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
        for row in self.mixing.chunks_exact(2) {
            aa += row[0] * row[0];
            bb += row[1] * row[1];
            ab += row[0] * row[1];
        }
        if aa * bb - ab * ab <= 1e-9 * aa.max(bb).max(1e-300).powi(2) {
            return Err(Error::Config("mixing matrix is rank deficient".into()));
        }
        Ok(())
    }
}

/// Sunflower layout of channel positions on the unit disc.
fn channel_positions(n: usize) -> Vec<(f64, f64)> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = ((i as f64 + 0.5) / n as f64).sqrt();
            let a = golden * i as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Smooth LF (fronto-central) and gamma (central) topographies with a small
/// seed-dependent shift, `n x 2` row-major.
pub fn base_patterns(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBA5E));
    let shift = |rng: &mut ChaCha8Rng| rng.random_range(-0.1..0.1);
    let lf_c = (shift(&mut rng), 0.3 + shift(&mut rng));
    let g_c = (shift(&mut rng), -0.2 + shift(&mut rng));
    let bump = |p: (f64, f64), c: (f64, f64), w: f64| {
        (-((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)) / (2.0 * w * w)).exp()
    };
    channel_positions(n)
        .into_iter()
        .flat_map(|p| [bump(p, lf_c, 0.45) - 0.3, bump(p, g_c, 0.35) - 0.2])
        .collect()
}

fn gaussian_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * scale);
}

/// Real-valued white noise reshaped by `gain(f)` in the frequency domain,
/// standardized to zero mean and unit variance.
fn shaped_noise(
    rng: &mut ChaCha8Rng,
    n: usize,
    rate_hz: f64,
    gain: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = gaussian_noise(rng, n)
        .into_iter()
        .map(|v| Complex64::new(v, 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = if k <= n / 2 { k } else { n - k };
        let f = bin as f64 * rate_hz / n as f64;
        *c *= if bin == 0 { 0.0 } else { gain(f) };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.into_iter().map(|c| c.re).collect();
    standardize(&mut out);
    out
}

fn pink(rng: &mut ChaCha8Rng, n: usize, rate_hz: f64, exponent: f64) -> Vec<f64> {
    shaped_noise(rng, n, rate_hz, |f| f.max(0.5).powf(-exponent / 2.0))
}

/// Speech-like envelope: log-normal syllabic modulation peaking near 4 Hz,
/// multiplied by a pitch-rate (45-140 Hz) periodicity.
pub fn synth_envelope(duration_s: f64, rate_hz: f64, seed: u64) -> Result<Envelope> {
    if !(duration_s > 0.0 && rate_hz > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration {duration_s} s and rate {rate_hz} Hz must be positive"
        )));
    }
    let n = (duration_s * rate_hz).round() as usize;
    if n < 4 {
        return Err(Error::InvalidParameter(
            "envelope shorter than 4 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllabic = shaped_noise(&mut rng, n, rate_hz, |f| {
        (-(f / 4.0).log2().powi(2) / (2.0 * 0.8 * 0.8)).exp()
    });
    let pitch_drift = shaped_noise(&mut rng, n, rate_hz, |f| if f < 0.5 { 1.0 } else { 0.0 });
    let mut phase = rng.random_range(0.0..2.0 * PI);
    let depth = 0.5;
    let data = syllabic
        .iter()
        .zip(&pitch_drift)
        .map(|(&s, &d)| {
            let f0 = (80.0 + 20.0 * d).clamp(45.0, 140.0);
            phase = (phase + 2.0 * PI * f0 / rate_hz) % (2.0 * PI);
            (0.9 * s).exp() * (1.0 + depth * phase.cos())
        })
        .collect();
    Envelope::new(data, rate_hz)
}

/// Causal convolution of the mean-removed envelope with `kernel`,
/// standardized to unit variance.
pub fn envelope_response(envelope: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mean = envelope.iter().sum::<f64>() / envelope.len() as f64;
    let centred: Vec<f64> = envelope.iter().map(|v| v - mean).collect();
    let mut out = vec![0.0; centred.len()];
    for (k, &h) in kernel.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for (o, &x) in out[k..].iter_mut().zip(&centred) {
            *o += h * x;
        }
    }
    standardize(&mut out);
    out
}

/// EEG = mixing . [g_lf (lf_kernel * env); g_gamma (gamma_kernel * env)]
/// + per-channel 1/f noise + a shared low-rank 1/f background.
pub fn synth_eeg(envelope: &Envelope, config: &SynthConfig) -> Result<MultichannelSignal> {
    config.validate()?;
    let rate = envelope.rate_hz();
    if rate < 512.0 {
        return Err(Error::InvalidParameter(format!(
            "envelope rate {rate} Hz below 512 Hz"
        )));
    }
    let n = envelope.samples();
    let r_lf = envelope_response(envelope.as_slice(), &config.lf_kernel.sample(rate));
    let r_g = envelope_response(envelope.as_slice(), &config.gamma_kernel.sample(rate));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xEE6));
    let background: Vec<Vec<f64>> = (0..config.background_rank)
        .map(|_| pink(&mut rng, n, rate, config.noise_exponent))
        .collect();
    let bg_mix: Vec<f64> = (0..config.n_channels * config.background_rank)
        .map(|_| {
            rng.sample::<f64, _>(StandardNormal) / (config.background_rank.max(1) as f64).sqrt()
        })
        .collect();
    let mut data = Vec::with_capacity(config.n_channels * n);
    for c in 0..config.n_channels {
        let noise = pink(&mut rng, n, rate, config.noise_exponent);
        let a_lf = config.g_lf * config.mixing[2 * c];
        let a_g = config.g_gamma * config.mixing[2 * c + 1];
        let start = data.len();
        data.extend((0..n).map(|t| a_lf * r_lf[t] + a_g * r_g[t] + config.noise_level * noise[t]));
        let row = &mut data[start..];
        for (j, bg) in background.iter().enumerate() {
            let w = config.background_level * bg_mix[c * config.background_rank + j];
            row.iter_mut().zip(bg).for_each(|(v, &b)| *v += w * b);
        }
    }
    MultichannelSignal::new(data, config.n_channels, rate)
}

/// Ranges from which per-participant settings are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_channels: usize,
    pub rate_hz: f64,
    pub duration_s: f64,
    pub recordings_per_participant: usize,
    pub g_lf_range: (f64, f64),
    pub g_gamma_range: (f64, f64),
    pub lf_kernel: KernelShape,
    pub gamma_kernel: KernelShape,
    pub noise_exponent: f64,
    pub noise_level: f64,
    pub background_rank: usize,
    pub background_level: f64,
    /// Per-participant Gaussian perturbation of the shared topographies.
    pub pattern_jitter: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_channels: 64,
            rate_hz: 512.0,
            duration_s: 300.0,
            recordings_per_participant: 1,
            g_lf_range: (0.05, 0.07),
            g_gamma_range: (0.03, 0.05),
            lf_kernel: KernelShape::lf(),
            gamma_kernel: KernelShape::gamma(),
            noise_exponent: 1.0,
            noise_level: 1.0,
            background_rank: 3,
            background_level: 0.5,
            pattern_jitter: 0.05,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo >= 0.0 && hi >= lo && hi.is_finite();
        if !range_ok(self.g_lf_range) || !range_ok(self.g_gamma_range) {
            return Err(Error::Config(
                "gain ranges must satisfy 0 <= lo <= hi".into(),
            ));
        }
        if !(self.duration_s > 0.0 && self.rate_hz >= 512.0 && self.recordings_per_participant >= 1)
        {
            return Err(Error::Config(
                "cohort needs positive duration, rate >= 512 Hz and >= 1 recording".into(),
            ));
        }
        Ok(())
    }

    /// Concrete forward model of participant `index` in a cohort drawn with
    /// `seed`.
    pub fn participant(&self, seed: u64, index: usize) -> SynthConfig {
        let pseed = derive_seed(seed, index as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(pseed);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let g_lf = draw(&mut rng, self.g_lf_range);
        let g_gamma = draw(&mut rng, self.g_gamma_range);
        let mixing = base_patterns(self.n_channels, seed)
            .into_iter()
            .map(|v| v + self.pattern_jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        SynthConfig {
            n_channels: self.n_channels,
            lf_kernel: self.lf_kernel,
            gamma_kernel: self.gamma_kernel,
            g_lf,
            g_gamma,
            noise_exponent: self.noise_exponent,
            noise_level: self.noise_level,
            background_rank: self.background_rank,
            background_level: self.background_level,
            mixing,
            seed: pseed,
        }
    }

    /// EEG and envelope for recording `rec` of participant `index`.
    pub fn recording(
        &self,
        seed: u64,
        index: usize,
        rec: usize,
    ) -> Result<(MultichannelSignal, Envelope)> {
        let mut cfg = self.participant(seed, index);
        let rseed = derive_seed(cfg.seed, 0x5EC0 + rec as u64);
        cfg.seed = rseed;
        let env = synth_envelope(self.duration_s, self.rate_hz, derive_seed(rseed, 1))?;
        let eeg = synth_eeg(&env, &cfg)?;
        Ok((eeg, env))
    }
}

/// Ground truth written next to a generated manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTruth {
    pub seed: u64,
    pub config: CohortConfig,
    pub participants: Vec<ParticipantTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub id: String,
    pub g_lf: f64,
    pub g_gamma: f64,
}

pub fn participant_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Writes a cohort under `dir` (`manifest.json`, `truth.json`, one
/// directory of tensors per participant) and returns the manifest.
pub fn generate_cohort(
    n_train: usize,
    n_heldout: usize,
    config: &CohortConfig,
    seed: u64,
    dir: &Path,
    exec: Execution,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_heldout == 0 {
        return Err(Error::InvalidParameter(
            "cohort needs at least one train and one heldout participant".into(),
        ));
    }
    config.validate()?;
    let total = n_train + n_heldout;
    let entries = exec.map_range(total, |i| -> Result<ParticipantEntry> {
        let id = participant_id(i);
        let mut recordings = Vec::new();
        for r in 0..config.recordings_per_participant {
            let (eeg, env) = config.recording(seed, i, r)?;
            let eeg_rel = format!("{id}/rec{r}_eeg.mmt");
            let env_rel = format!("{id}/rec{r}_env.mmt");
            write_tensor(
                dir.join(&eeg_rel),
                DType::F32,
                &[eeg.channels(), eeg.samples()],
                eeg.as_slice(),
            )?;
            write_tensor(
                dir.join(&env_rel),
                DType::F32,
                &[env.samples()],
                env.as_slice(),
            )?;
            recordings.push(RecordingEntry {
                id: format!("rec{r}"),
                eeg: eeg_rel.into(),
                eeg_rate_hz: eeg.rate_hz(),
                envelope: env_rel.into(),
                envelope_rate_hz: env.rate_hz(),
            });
        }
        Ok(ParticipantEntry {
            id,
            split: if i < n_train {
                Split::Train
            } else {
                Split::Heldout
            },
            recordings,
        })
    });
    let participants = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        participants,
        band: None,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.json"))?;
    let truth = CohortTruth {
        seed,
        config: config.clone(),
        participants: (0..total)
            .map(|i| {
                let p = config.participant(seed, i);
                ParticipantTruth {
                    id: participant_id(i),
                    g_lf: p.g_lf,
                    g_gamma: p.g_gamma,
                }
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&truth)? + "\n";
    std::fs::write(dir.join("truth.json"), text)
        .map_err(crate::error::io_err(dir.join("truth.json")))?;
    Ok(manifest)
}

/// Frequency of the largest non-DC periodogram bin of the envelope's
/// modulation spectrum (Welch average over 8 s Hann windows).
pub fn modulation_peak_hz(envelope: &Envelope, max_hz: f64) -> f64 {
    let rate = envelope.rate_hz();
    let x = envelope.as_slice();
    let win = ((8.0 * rate) as usize).min(x.len());
    let hop = win / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut psd = vec![0.0; win / 2 + 1];
    let mut start = 0;
    while start + win <= x.len() {
        let seg = &x[start..start + win];
        let mean = seg.iter().sum::<f64>() / win as f64;
        let mut buf: Vec<Complex64> = seg
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
                Complex64::new((v - mean) * w, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        psd.iter_mut()
            .zip(&buf)
            .for_each(|(p, c)| *p += c.norm_sqr());
        start += hop.max(1);
    }
    let df = rate / win as f64;
    let (best, _) = psd
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(k, _)| *k as f64 * df <= max_hz)
        .fold(
            (0, f64::MIN),
            |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc },
        );
    best as f64 * df
}
