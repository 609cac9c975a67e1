//! Band-specific preprocessing and the in-memory datasets the decoders
//! train and evaluate on.
//!
//! LF: broadband EEG and envelope resampled to the LF rate. Gamma: EEG
//! band-passed at its source rate, then both signals resampled to the gamma
//! rate (the envelope stays broadband).

use std::path::Path;

use crate::dsp::{design_bandpass, filter_zero_phase, resample};
use crate::error::{Error, Result};
use crate::signal::{Envelope, MultichannelSignal};
use crate::storage::{write_tensor, DType, DatasetManifest, PipelineConfig, RecordingEntry, Split};
use crate::synth::{participant_id, CohortConfig};
use crate::{Band, Execution};

/// Preprocessed recording, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRecording {
    pub id: String,
    pub channels: usize,
    pub samples: usize,
    /// `channels x samples`, row-major.
    pub eeg: Vec<f32>,
    pub envelope: Vec<f32>,
}

impl BandRecording {
    pub fn new(
        id: impl Into<String>,
        eeg: &MultichannelSignal,
        envelope: &Envelope,
    ) -> Result<Self> {
        let samples = eeg.samples().min(envelope.samples());
        if samples == 0 {
            return Err(Error::InsufficientData("empty recording".into()));
        }
        let mut data = Vec::with_capacity(eeg.channels() * samples);
        for row in eeg.rows() {
            data.extend(row[..samples].iter().map(|&v| v as f32));
        }
        Ok(Self {
            id: id.into(),
            channels: eeg.channels(),
            samples,
            eeg: data,
            envelope: envelope.as_slice()[..samples]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        })
    }

    /// Copies `len` samples of every channel starting at `start` into `out`
    /// (`channels x len`).
    pub fn eeg_window_into<T: crate::decoder::Scalar>(
        &self,
        start: usize,
        len: usize,
        out: &mut Vec<T>,
    ) {
        out.clear();
        for c in 0..self.channels {
            let row = &self.eeg[c * self.samples + start..c * self.samples + start + len];
            out.extend(row.iter().map(|&v| T::of(f64::from(v))));
        }
    }

    pub fn envelope_window_into<T: crate::decoder::Scalar>(
        &self,
        start: usize,
        len: usize,
        out: &mut Vec<T>,
    ) {
        out.clear();
        out.extend(
            self.envelope[start..start + len]
                .iter()
                .map(|&v| T::of(f64::from(v))),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandParticipant {
    pub id: String,
    pub split: Split,
    pub recordings: Vec<BandRecording>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandDataset {
    pub band: Band,
    pub rate_hz: f64,
    pub channels: usize,
    pub participants: Vec<BandParticipant>,
}

impl BandDataset {
    pub fn participants_in(&self, split: Split) -> impl Iterator<Item = (usize, &BandParticipant)> {
        self.participants
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(Error::InsufficientData(
                "dataset has no participants".into(),
            ));
        }
        for p in &self.participants {
            for r in &p.recordings {
                if r.channels != self.channels {
                    return Err(Error::Shape(format!(
                        "{}/{} has {} channels, dataset has {}",
                        p.id, r.id, r.channels, self.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Brings one raw recording to the decoder rate of `band`.
pub fn preprocess_recording(
    eeg: &MultichannelSignal,
    envelope: &Envelope,
    band: Band,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<(MultichannelSignal, Envelope)> {
    let target = config.rate(band);
    let eeg = match band {
        Band::Lf => resample(eeg, target, exec)?,
        Band::Gamma => {
            let (low, high) = config.gamma_band_hz;
            let coeffs = design_bandpass(low, high, config.filter_order, eeg.rate_hz())?;
            resample(&filter_zero_phase(eeg, &coeffs, exec)?, target, exec)?
        }
    };
    let envelope = resample(&envelope.to_signal(), target, exec)?;
    // Anti-alias ringing can dip a resampled envelope slightly below zero.
    let clamped = envelope
        .into_vec()
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    Ok((eeg, Envelope::new(clamped, target)?))
}

/// Loads every recording of `manifest` and preprocesses it for `band`.
/// Manifests already tagged with `band` are loaded as they are.
pub fn load_band_dataset(
    manifest: &DatasetManifest,
    band: Band,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<BandDataset> {
    if let Some(tag) = manifest.band {
        if tag != band {
            return Err(Error::Manifest(format!(
                "manifest was preprocessed for {tag}, not {band}"
            )));
        }
    }
    let target = config.rate(band);
    let mut participants = Vec::with_capacity(manifest.participants.len());
    let mut channels = None;
    for p in &manifest.participants {
        let mut recordings = Vec::with_capacity(p.recordings.len());
        for rec in &p.recordings {
            let (eeg, env) = manifest.load_recording(rec)?;
            let (eeg, env) = if manifest.band.is_some() {
                for rate in [eeg.rate_hz(), env.rate_hz()] {
                    if (rate - target).abs() > 1e-9 {
                        return Err(Error::RateMismatch {
                            expected: target,
                            found: rate,
                        });
                    }
                }
                (eeg, env)
            } else {
                preprocess_recording(&eeg, &env, band, config, exec)?
            };
            if *channels.get_or_insert(eeg.channels()) != eeg.channels() {
                return Err(Error::Shape(format!(
                    "{}/{} has {} channels",
                    p.id,
                    rec.id,
                    eeg.channels()
                )));
            }
            recordings.push(BandRecording::new(&rec.id, &eeg, &env)?);
        }
        participants.push(BandParticipant {
            id: p.id.clone(),
            split: p.split,
            recordings,
        });
    }
    let dataset = BandDataset {
        band,
        rate_hz: target,
        channels: channels.unwrap_or(0),
        participants,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Generates a synthetic cohort in memory and preprocesses it for both
/// bands, one participant at a time. Returns `(lf, gamma)`.
pub fn synthetic_datasets(
    cohort: &CohortConfig,
    n_train: usize,
    n_heldout: usize,
    seed: u64,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<(BandDataset, BandDataset)> {
    cohort.validate()?;
    let mut out = Band::BOTH.map(|band| BandDataset {
        band,
        rate_hz: config.rate(band),
        channels: cohort.n_channels,
        participants: Vec::new(),
    });
    for i in 0..n_train + n_heldout {
        let split = if i < n_train {
            Split::Train
        } else {
            Split::Heldout
        };
        let mut recs: [Vec<BandRecording>; 2] = [Vec::new(), Vec::new()];
        for r in 0..cohort.recordings_per_participant {
            let (eeg, env) = cohort.recording(seed, i, r)?;
            for (slot, band) in Band::BOTH.into_iter().enumerate() {
                let (e, v) = preprocess_recording(&eeg, &env, band, config, exec)?;
                recs[slot].push(BandRecording::new(format!("rec{r}"), &e, &v)?);
            }
        }
        for (d, recordings) in out.iter_mut().zip(recs) {
            d.participants.push(BandParticipant {
                id: participant_id(i),
                split,
                recordings,
            });
        }
    }
    let [lf, gamma] = out;
    Ok((lf, gamma))
}

/// Writes a preprocessed copy of `manifest` for `band` under `dir` and
/// returns the new (band-tagged) manifest.
pub fn write_preprocessed(
    manifest: &DatasetManifest,
    band: Band,
    config: &PipelineConfig,
    dir: &Path,
    exec: Execution,
) -> Result<DatasetManifest> {
    let dataset = load_band_dataset(manifest, band, config, exec)?;
    let mut out = manifest.clone();
    out.band = Some(band);
    out.root = dir.to_path_buf();
    for (entry, p) in out.participants.iter_mut().zip(&dataset.participants) {
        for (rec_entry, rec) in entry.recordings.iter_mut().zip(&p.recordings) {
            let eeg_rel = format!("{}/{}_eeg.mmt", p.id, rec.id);
            let env_rel = format!("{}/{}_env.mmt", p.id, rec.id);
            let eeg: Vec<f64> = rec.eeg.iter().map(|&v| f64::from(v)).collect();
            let env: Vec<f64> = rec.envelope.iter().map(|&v| f64::from(v)).collect();
            write_tensor(
                dir.join(&eeg_rel),
                DType::F32,
                &[rec.channels, rec.samples],
                &eeg,
            )?;
            write_tensor(dir.join(&env_rel), DType::F32, &[rec.samples], &env)?;
            *rec_entry = RecordingEntry {
                id: rec.id.clone(),
                eeg: eeg_rel.into(),
                eeg_rate_hz: dataset.rate_hz,
                envelope: env_rel.into(),
                envelope_rate_hz: dataset.rate_hz,
            };
        }
    }
    out.save(dir.join("manifest.json"))?;
    Ok(out)
}
