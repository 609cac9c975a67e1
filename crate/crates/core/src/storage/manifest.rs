//! Dataset manifests: participants, recordings and train/heldout split.
//!
//! Paths are relative to the directory holding the manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{probe_tensor, read_tensor};
use crate::error::{io_err, Error, Result};
use crate::signal::{Envelope, MultichannelSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub eeg: PathBuf,
    pub eeg_rate_hz: f64,
    pub envelope: PathBuf,
    pub envelope_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEntry {
    pub id: String,
    pub split: Split,
    pub recordings: Vec<RecordingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub participants: Vec<ParticipantEntry>,
    /// Set when the tensors were already preprocessed for one decoder band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<crate::Band>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self
            .participants
            .iter()
            .filter(|p| p.split == Split::Train)
            .count();
        (train, self.participants.len() - train)
    }

    pub fn participants_in(&self, split: Split) -> impl Iterator<Item = &ParticipantEntry> {
        self.participants.iter().filter(move |p| p.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_recording(&self, rec: &RecordingEntry) -> Result<(MultichannelSignal, Envelope)> {
        let eeg = read_tensor(self.resolve(&rec.eeg))?;
        let channels = match eeg.shape.as_slice() {
            [c, _] => *c,
            other => {
                return Err(Error::Manifest(format!(
                    "EEG tensor {:?} has shape {other:?}",
                    rec.eeg
                )))
            }
        };
        let eeg = MultichannelSignal::new(eeg.data.to_f64(), channels, rec.eeg_rate_hz)?;
        let env = read_tensor(self.resolve(&rec.envelope))?;
        let env = Envelope::new(env.data.to_f64(), rec.envelope_rate_hz)?;
        Ok((eeg, env))
    }

    /// Checks every manifest invariant, touching each referenced file.
    pub fn validate(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(Error::Manifest("participant list is empty".into()));
        }
        let mut ids = BTreeSet::new();
        for p in &self.participants {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate participant id {:?}",
                    p.id
                )));
            }
            if p.recordings.is_empty() {
                return Err(Error::Manifest(format!(
                    "participant {:?} has no recordings",
                    p.id
                )));
            }
            for rec in &p.recordings {
                self.validate_recording(&p.id, rec)?;
            }
        }
        Ok(())
    }

    fn validate_recording(&self, pid: &str, rec: &RecordingEntry) -> Result<()> {
        for rate in [rec.eeg_rate_hz, rec.envelope_rate_hz] {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::Manifest(format!(
                    "{pid}/{}: rate {rate} must be positive",
                    rec.id
                )));
            }
        }
        let (_, eeg_shape) = probe_tensor(self.resolve(&rec.eeg))?;
        let eeg_samples = match eeg_shape.as_slice() {
            [_, n] => *n,
            other => {
                return Err(Error::Manifest(format!(
                    "{pid}/{}: EEG tensor must be channels x samples, got {other:?}",
                    rec.id
                )))
            }
        };
        let (_, env_shape) = probe_tensor(self.resolve(&rec.envelope))?;
        let env_samples = match env_shape.as_slice() {
            [n] | [1, n] => *n,
            other => {
                return Err(Error::Manifest(format!(
                    "{pid}/{}: envelope tensor must be 1-D, got {other:?}",
                    rec.id
                )))
            }
        };
        let eeg_dur = eeg_samples as f64 / rec.eeg_rate_hz;
        let env_dur = env_samples as f64 / rec.envelope_rate_hz;
        let tolerance = 1.0 / rec.eeg_rate_hz.min(rec.envelope_rate_hz);
        if (eeg_dur - env_dur).abs() > tolerance + 1e-12 {
            return Err(Error::Manifest(format!(
                "{pid}/{}: duration mismatch, EEG {eeg_dur:.4} s vs envelope {env_dur:.4} s",
                rec.id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Reads and fully validates a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}
