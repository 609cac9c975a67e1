//! Run configuration (JSON). Every field has a default, so a config file
//! only needs the values it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::Architecture;
use crate::error::{io_err, Error, Result};
use crate::eval::EvalConfig;
use crate::synth::CohortConfig;
use crate::training::TrainConfig;
use crate::Band;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lf_rate_hz: f64,
    pub gamma_rate_hz: f64,
    pub gamma_band_hz: (f64, f64),
    pub alt_gamma_band_hz: (f64, f64),
    pub filter_order: usize,
    pub segment_seconds: f64,
    pub n_imposters: usize,
    /// Permits imposter counts other than 1 and 4.
    pub allow_arbitrary_imposters: bool,
    pub ensemble_size: usize,
    /// Fraction of each training recording (its tail) used for validation.
    pub validation_fraction: f64,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub cohort: CohortConfig,
    pub n_train: usize,
    pub n_heldout: usize,
    pub manifest: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lf_rate_hz: 64.0,
            gamma_rate_hz: 512.0,
            gamma_band_hz: (35.0, 150.0),
            alt_gamma_band_hz: (70.0, 220.0),
            filter_order: 3,
            segment_seconds: 5.0,
            n_imposters: 4,
            allow_arbitrary_imposters: false,
            ensemble_size: 16,
            validation_fraction: 0.2,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            cohort: CohortConfig::default(),
            n_train: 71,
            n_heldout: 14,
            manifest: None,
            seed: 0,
        }
    }
}

pub const ALLOWED_IMPOSTERS: [usize; 2] = [1, 4];

impl PipelineConfig {
    pub fn rate(&self, band: Band) -> f64 {
        match band {
            Band::Lf => self.lf_rate_hz,
            Band::Gamma => self.gamma_rate_hz,
        }
    }

    pub fn segment_samples(&self, band: Band) -> usize {
        (self.segment_seconds * self.rate(band)).round() as usize
    }

    pub fn check_imposters(&self, k: usize) -> Result<()> {
        if k == 0 || (!self.allow_arbitrary_imposters && !ALLOWED_IMPOSTERS.contains(&k)) {
            return Err(Error::Config(format!(
                "n_imposters = {k} is not allowed (allowed values: {ALLOWED_IMPOSTERS:?})"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("lf_rate_hz", self.lf_rate_hz),
            ("gamma_rate_hz", self.gamma_rate_hz),
        ] {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::Config(format!("{name} = {rate} must be positive")));
            }
        }
        for (name, (lo, hi)) in [
            ("gamma_band_hz", self.gamma_band_hz),
            ("alt_gamma_band_hz", self.alt_gamma_band_hz),
        ] {
            if !(lo > 0.0 && lo < hi && hi < self.gamma_rate_hz / 2.0) {
                return Err(Error::Config(format!(
                    "{name} = ({lo}, {hi}) must satisfy 0 < low < high < {}",
                    self.gamma_rate_hz / 2.0
                )));
            }
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        for band in Band::BOTH {
            let exact = self.segment_seconds * self.rate(band);
            if (exact - exact.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "segment is not a whole number of samples at {band}"
                )));
            }
        }
        if !(1..=8).contains(&self.filter_order) {
            return Err(Error::Config("filter_order must be in 1..=8".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(
                "validation_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        self.check_imposters(self.n_imposters)?;
        self.architecture.validate()?;
        self.train.validate()?;
        self.cohort.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Applies `a.b.c=value` overrides to a JSON document. Values parse as JSON
/// when possible and fall back to strings.
pub fn apply_overrides(doc: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path {key:?} crosses a non-object"))
            })?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), value.clone());
                break;
            }
            node = obj
                .entry((*part).to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}
