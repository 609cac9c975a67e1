//! Decoder checkpoints: an `MMT1` tensor of f64 parameters whose header
//! carries the metadata under `meta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor_file, TensorData, TensorFile};
use crate::decoder::{Architecture, DecoderParameters};
use crate::error::{Error, Result};
use crate::training::TrainHistory;
use crate::Band;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub band: Band,
    pub params: DecoderParameters,
    pub training_history: TrainHistory,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn new(params: DecoderParameters, training_history: TrainHistory, rng_seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            band: params.band,
            params,
            training_history,
            rng_seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    band: Band,
    rate_hz: f64,
    architecture: Architecture,
    training_history: TrainHistory,
    rng_seed: u64,
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let meta = Meta {
        format_version: checkpoint.format_version,
        band: checkpoint.band,
        rate_hz: checkpoint.params.rate_hz,
        architecture: checkpoint.params.architecture.clone(),
        training_history: checkpoint.training_history.clone(),
        rng_seed: checkpoint.rng_seed,
    };
    let mut tensor = TensorFile::new(
        vec![checkpoint.params.values.len()],
        TensorData::F64(checkpoint.params.values.clone()),
    )?;
    tensor.meta = Some(serde_json::to_value(meta)?);
    write_tensor_file(path, &tensor)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let tensor = read_tensor(path)?;
    let meta = tensor
        .meta
        .ok_or_else(|| Error::CorruptCheckpoint("header carries no checkpoint metadata".into()))?;
    let version = meta
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version as u32,
        });
    }
    let meta: Meta =
        serde_json::from_value(meta).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let TensorData::F64(values) = tensor.data else {
        return Err(Error::CorruptCheckpoint(
            "parameters must be stored as f64".into(),
        ));
    };
    meta.architecture
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let expected = meta.architecture.layout().total;
    if values.len() != expected || tensor.shape != [expected] {
        return Err(Error::CorruptCheckpoint(format!(
            "architecture needs {expected} parameters, payload has {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        format_version: meta.format_version,
        band: meta.band,
        params: DecoderParameters {
            architecture: meta.architecture,
            band: meta.band,
            rate_hz: meta.rate_hz,
            values,
        },
        training_history: meta.training_history,
        rng_seed: meta.rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_params;

    fn sample() -> Checkpoint {
        let params = init_params(11, Band::Gamma, Architecture::with_channels(4), 512.0).unwrap();
        Checkpoint::new(params, TrainHistory::default(), 11)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mmt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back
            .params
            .values
            .iter()
            .zip(&ck.params.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn newer_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mmt");
        let mut ck = sample();
        ck.format_version = CHECKPOINT_VERSION + 1;
        save_checkpoint(&path, &ck).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found, .. }) if found == CHECKPOINT_VERSION + 1
        ));
    }

    #[test]
    fn wrong_parameter_count_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mmt");
        let mut ck = sample();
        ck.params.values.pop();
        save_checkpoint(&path, &ck).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
        super::super::tensor::write_tensor(
            &path,
            super::super::tensor::DType::F64,
            &[3],
            &[1.0; 3],
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
