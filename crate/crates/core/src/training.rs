//! Match-mismatch training: balanced batches with randomly drawn mismatched
//! windows, Adam, plateau learning-rate halving, early stopping and
//! independently seeded ensembles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    init_params, normalize_segment, AdamConfig, AdamState, DecoderModel, DecoderParameters,
    Example, Scalar,
};
use crate::error::{Error, Result};
use crate::pipeline::BandDataset;
use crate::storage::{Checkpoint, PipelineConfig, Split};
use crate::{derive_seed, Execution};

/// Where the mismatched window of a pair comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchPolicy {
    /// Uniform over all non-overlapping windows of the same recording.
    #[default]
    Random,
    /// The window one segment length later (earlier when that runs off the end).
    FixedOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without a validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    /// Epochs without improvement before the learning rate is halved.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub mismatch: MismatchPolicy,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            adam: AdamConfig::default(),
            early_stop_patience: 5,
            plateau_patience: 2,
            lr_factor: 0.5,
            min_lr: 1e-5,
            max_epochs: 100,
            mismatch: MismatchPolicy::Random,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.batch_size >= 2
            && self.batch_size.is_multiple_of(2)
            && a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && self.early_stop_patience >= 1
            && self.plateau_patience >= 1
            && self.lr_factor > 0.0
            && self.lr_factor < 1.0
            && self.min_lr > 0.0
            && self.max_epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid training configuration: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub lr: Vec<f64>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

/// Contiguous part of one recording available to a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub participant: usize,
    pub recording: usize,
    pub start: usize,
    pub len: usize,
}

/// A matched segment: `offset` is relative to the span start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub span: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct SplitView<'a> {
    pub dataset: &'a BandDataset,
    pub spans: Vec<Span>,
    pub segment_len: usize,
}

impl<'a> SplitView<'a> {
    /// Training and validation views over the training participants: the
    /// last `validation_fraction` of each recording is held out.
    pub fn training(
        dataset: &'a BandDataset,
        segment_len: usize,
        validation_fraction: f64,
    ) -> Result<(Self, Self)> {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (pi, p) in dataset.participants_in(Split::Train) {
            for (ri, rec) in p.recordings.iter().enumerate() {
                let cut = ((1.0 - validation_fraction) * rec.samples as f64).round() as usize;
                for (start, len, out) in
                    [(0, cut, &mut train), (cut, rec.samples - cut, &mut valid)]
                {
                    if len >= 2 * segment_len {
                        out.push(Span {
                            participant: pi,
                            recording: ri,
                            start,
                            len,
                        });
                    }
                }
            }
        }
        if train.is_empty() || valid.is_empty() {
            return Err(Error::InsufficientData(format!(
                "training needs recordings with room for two {segment_len}-sample windows in both the training and validation parts"
            )));
        }
        Ok((
            Self {
                dataset,
                spans: train,
                segment_len,
            },
            Self {
                dataset,
                spans: valid,
                segment_len,
            },
        ))
    }

    /// Whole recordings of every participant in `split`.
    pub fn whole(dataset: &'a BandDataset, split: Split, segment_len: usize) -> Self {
        let spans = dataset
            .participants_in(split)
            .flat_map(|(pi, p)| {
                p.recordings.iter().enumerate().map(move |(ri, r)| Span {
                    participant: pi,
                    recording: ri,
                    start: 0,
                    len: r.samples,
                })
            })
            .filter(|s| s.len >= 2 * segment_len)
            .collect();
        Self {
            dataset,
            spans,
            segment_len,
        }
    }

    /// Matched segments with hop equal to the segment length.
    pub fn anchors(&self) -> Vec<Anchor> {
        self.spans
            .iter()
            .enumerate()
            .flat_map(|(span, s)| {
                (0..s.len / self.segment_len).map(move |k| Anchor {
                    span,
                    offset: k * self.segment_len,
                })
            })
            .collect()
    }

    /// Normalized example pairing the EEG at `anchor` with the envelope at
    /// `envelope_offset` of the same span.
    pub fn example<T: Scalar>(
        &self,
        anchor: Anchor,
        envelope_offset: usize,
        label: bool,
    ) -> Example<T> {
        let span = self.spans[anchor.span];
        let rec = &self.dataset.participants[span.participant].recordings[span.recording];
        let n = self.segment_len;
        let mut eeg = Vec::new();
        rec.eeg_window_into(span.start + anchor.offset, n, &mut eeg);
        let mut envelope = Vec::new();
        rec.envelope_window_into(span.start + envelope_offset, n, &mut envelope);
        normalize_segment(&mut eeg, n);
        normalize_segment(&mut envelope, n);
        Example {
            eeg,
            envelope,
            label,
        }
    }

    fn mismatch(
        &self,
        anchor: Anchor,
        policy: MismatchPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let len = self.spans[anchor.span].len;
        match policy {
            MismatchPolicy::Random => sample_mismatch(len, anchor.offset, self.segment_len, rng),
            MismatchPolicy::FixedOffset => fixed_mismatch(len, anchor.offset, self.segment_len),
        }
    }

    /// One matched and one mismatched example per anchor, interleaved.
    fn pairs<T: Scalar>(
        &self,
        anchors: &[Anchor],
        policy: MismatchPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Example<T>>> {
        let mut out = Vec::with_capacity(2 * anchors.len());
        for &a in anchors {
            let m = self.mismatch(a, policy, rng)?;
            out.push(self.example(a, a.offset, true));
            out.push(self.example(a, m, false));
        }
        Ok(out)
    }
}

/// Start of a window of `segment_len` samples drawn uniformly from all
/// starts in `0..=len - segment_len` that do not overlap the matched window.
pub fn sample_mismatch(
    len: usize,
    matched_start: usize,
    segment_len: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if segment_len == 0 || matched_start + segment_len > len {
        return Err(Error::InvalidParameter(format!(
            "matched window {matched_start}+{segment_len} does not fit in {len} samples"
        )));
    }
    let last = len - segment_len;
    // valid starts: [0, matched - seg] and [matched + seg, last]
    let left = (matched_start + 1).saturating_sub(segment_len);
    let right_first = matched_start + segment_len;
    let right = if right_first <= last {
        last - right_first + 1
    } else {
        0
    };
    if left + right == 0 {
        return Err(Error::InsufficientData(format!(
            "no window of {segment_len} samples avoids the matched one in {len} samples"
        )));
    }
    let k = rng.random_range(0..left + right);
    Ok(if k < left { k } else { right_first + k - left })
}

fn fixed_mismatch(len: usize, matched_start: usize, segment_len: usize) -> Result<usize> {
    if matched_start + 2 * segment_len <= len {
        Ok(matched_start + segment_len)
    } else if matched_start >= segment_len {
        Ok(matched_start - segment_len)
    } else {
        Err(Error::InsufficientData(
            "no fixed-offset mismatch fits".into(),
        ))
    }
}

/// A balanced batch: `batch_size / 2` matched segments drawn uniformly from
/// the view, each followed by its mismatched counterpart.
pub fn make_batch<T: Scalar>(
    view: &SplitView<'_>,
    batch_size: usize,
    policy: MismatchPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example<T>>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "batch size {batch_size} must be even and >= 2"
        )));
    }
    let anchors = view.anchors();
    if anchors.is_empty() {
        return Err(Error::InsufficientData("split holds no segments".into()));
    }
    let picked: Vec<Anchor> = (0..batch_size / 2)
        .map(|_| anchors[rng.random_range(0..anchors.len())])
        .collect();
    view.pairs(&picked, policy, rng)
}

/// Seed of ensemble member `index`; member 0 uses the base seed itself.
pub fn instance_seed(base: u64, index: usize) -> u64 {
    if index == 0 {
        base
    } else {
        derive_seed(base, index as u64)
    }
}

fn bce(z: f64, label: bool) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - if label { z } else { 0.0 }
}

struct Validation<'a> {
    view: SplitView<'a>,
    /// (anchor, envelope offset, label)
    items: Vec<(Anchor, usize, bool)>,
}

impl Validation<'_> {
    fn score<T: Scalar>(&self, model: &DecoderModel<T>, exec: Execution) -> Result<(f64, f64)> {
        let outcomes = exec.map(&self.items, |&(a, off, label)| {
            let ex: Example<T> = self.view.example(a, off, label);
            model.logit(&ex.eeg, &ex.envelope).map(|z| z.to())
        });
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (z, &(_, _, label)) in outcomes.into_iter().zip(&self.items) {
            let z = z?;
            loss += bce(z, label);
            correct += usize::from((z > 0.0) == label);
        }
        let n = self.items.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

/// Trains one decoder on the training participants of `dataset` with
/// `config.train.seed`; returns the best-validation-loss parameters.
pub fn train_decoder(
    dataset: &BandDataset,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<(Checkpoint, TrainHistory)> {
    match config.train.precision {
        Precision::F32 => train_impl::<f32>(dataset, config, exec),
        Precision::F64 => train_impl::<f64>(dataset, config, exec),
    }
}

fn train_impl<T: Scalar>(
    dataset: &BandDataset,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<(Checkpoint, TrainHistory)> {
    let tc = &config.train;
    tc.validate()?;
    let segment_len = config.segment_samples(dataset.band);
    let (train, valid) = SplitView::training(dataset, segment_len, config.validation_fraction)?;
    let architecture = crate::decoder::Architecture {
        channels: dataset.channels,
        ..config.architecture.clone()
    };
    let mut params: DecoderParameters =
        init_params(tc.seed, dataset.band, architecture, dataset.rate_hz)?;
    let mut adam = AdamState::new(params.len(), tc.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 1));
    let mut valid_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 2));
    let validation = {
        let mut items = Vec::new();
        for a in valid.anchors() {
            let m = valid.mismatch(a, tc.mismatch, &mut valid_rng)?;
            items.push((a, a.offset, true));
            items.push((a, m, false));
        }
        Validation { view: valid, items }
    };

    let mut anchors = train.anchors();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.values.clone());
    let mut since_best = 0usize;
    let mut since_lr_change = 0usize;
    for epoch in 0..tc.max_epochs {
        anchors.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in anchors.chunks(tc.batch_size / 2) {
            let batch: Vec<Example<T>> = train.pairs(chunk, tc.mismatch, &mut rng)?;
            let model = DecoderModel::<T>::new(&params);
            let out = model.batch_gradient(&batch, exec)?;
            let loss = out.loss.to();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}: batch loss {loss} at lr {} (step {})",
                    adam.config.lr, adam.t
                )));
            }
            let grad: Vec<f64> = out.grad.iter().map(|g| g.to()).collect();
            adam.step(&mut params.values, &grad)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += out
                .logits
                .iter()
                .zip(&batch)
                .filter(|(z, ex)| (z.to() > 0.0) == ex.label)
                .count();
        }
        let (val_loss, val_acc) = validation.score(&DecoderModel::<T>::new(&params), exec)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: validation loss {val_loss}"
            )));
        }
        history.train_loss.push(loss_sum / seen as f64);
        history.train_accuracy.push(correct as f64 / seen as f64);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        history.lr.push(adam.config.lr);
        history.stopped_epoch = epoch;
        log::debug!(
            "{} epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_acc:.3} lr {:.2e}",
            dataset.band,
            loss_sum / seen as f64,
            adam.config.lr
        );
        if val_loss < best.0 {
            best = (val_loss, params.values.clone());
            history.best_epoch = epoch;
            since_best = 0;
            since_lr_change = 0;
        } else {
            since_best += 1;
            since_lr_change += 1;
            if since_best >= tc.early_stop_patience {
                break;
            }
            if since_lr_change >= tc.plateau_patience {
                adam.config.lr = (adam.config.lr * tc.lr_factor).max(tc.min_lr);
                since_lr_change = 0;
            }
        }
    }
    params.values = best.1;
    Ok((Checkpoint::new(params, history.clone(), tc.seed), history))
}

/// Trains `n` instances that differ only in their seed (see
/// [`instance_seed`]).
pub fn train_ensemble(
    dataset: &BandDataset,
    config: &PipelineConfig,
    n: usize,
    exec: Execution,
) -> Result<Vec<Checkpoint>> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "ensemble needs at least one instance".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cfg = config.clone();
        cfg.train.seed = instance_seed(config.train.seed, i);
        out.push(train_decoder(dataset, &cfg, exec)?.0);
    }
    Ok(out)
}
