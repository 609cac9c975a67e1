//! Evaluation tasks (absolute decoding and k-imposter selection),
//! per-participant aggregation and confidence intervals.
//!
//! Trials are laid out on a common time grid (the lowest decoder rate) so
//! the LF and gamma decoders score exactly the same segments.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::composite::{argmax, LdaModel};
use crate::decoder::{normalize_segment, DecoderModel, LogitPair, Scalar};
use crate::error::{Error, Result};
use crate::pipeline::BandDataset;
use crate::storage::{Checkpoint, PipelineConfig, Split};
use crate::training::{sample_mismatch, Precision};
use crate::{derive_seed, Execution};

const TRIAL_STREAM: u64 = 0xE7A1;
const LDA_STREAM: u64 = 0x1DA0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImposterPolicy {
    /// Random windows of the same recording, disjoint from the matched
    /// window and from each other.
    #[default]
    Random,
    /// Windows at +1, -1, +2, -2, ... segment lengths from the matched one.
    FixedOffsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    #[default]
    T,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub imposter_policy: ImposterPolicy,
    pub interval: IntervalMethod,
    /// Caps the trials taken from each recording (all when `None`).
    pub max_trials_per_recording: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            imposter_policy: ImposterPolicy::Random,
            interval: IntervalMethod::T,
            max_trials_per_recording: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Absolute,
    Imposters(usize),
}

impl Task {
    pub const TABLE: [Task; 3] = [Task::Absolute, Task::Imposters(1), Task::Imposters(4)];

    /// Imposter candidates a trial must carry for this task.
    pub fn imposters_needed(self) -> usize {
        match self {
            Task::Absolute => 1,
            Task::Imposters(k) => k,
        }
    }

    pub fn chance(self) -> f64 {
        match self {
            Task::Absolute => 0.5,
            Task::Imposters(k) => 1.0 / (k as f64 + 1.0),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Absolute => f.write_str("absolute"),
            Task::Imposters(k) => write!(f, "imposter_{k}"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "absolute" {
            return Ok(Task::Absolute);
        }
        s.strip_prefix("imposter_")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(Task::Imposters)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown task {s:?}")))
    }
}

impl Serialize for Task {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Task {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// One EEG segment with its candidate envelope windows. `candidates[0]` is
/// the matched start; `order` is the presentation order of the candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub participant: usize,
    pub recording: usize,
    pub eeg_start: usize,
    pub candidates: Vec<usize>,
    pub order: Vec<usize>,
}

impl Trial {
    /// Presentation order restricted to the matched window and the first
    /// `k` imposters.
    pub fn presented(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().copied().filter(move |&c| c <= k)
    }
}

/// Imposter starts for a matched window at `matched` in a recording of
/// `len` samples.
pub fn draw_imposters(
    len: usize,
    matched: usize,
    segment_len: usize,
    k: usize,
    policy: ImposterPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if len < (k + 1) * segment_len {
        return Err(Error::InsufficientData(format!(
            "{len} samples cannot hold {k} imposters of {segment_len} samples besides the matched window"
        )));
    }
    let overlaps = |a: usize, b: usize| a < b + segment_len && b < a + segment_len;
    let mut out: Vec<usize> = Vec::with_capacity(k);
    match policy {
        ImposterPolicy::Random => {
            let mut attempts = 0;
            while out.len() < k {
                let s = sample_mismatch(len, matched, segment_len, rng)?;
                if out.iter().all(|&o| !overlaps(o, s)) {
                    out.push(s);
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::InsufficientData(format!(
                        "could not place {k} disjoint imposters in {len} samples"
                    )));
                }
            }
        }
        ImposterPolicy::FixedOffsets => {
            let mut step = 1;
            while out.len() < k {
                let shift = step * segment_len;
                if matched + shift + segment_len <= len {
                    out.push(matched + shift);
                }
                if out.len() < k && matched >= shift {
                    out.push(matched - shift);
                }
                if shift > len {
                    return Err(Error::InsufficientData("fixed offsets exhausted".into()));
                }
                step += 1;
            }
        }
    }
    Ok(out)
}

/// Trials for every non-overlapping segment of one recording.
pub fn build_trials(
    participant: usize,
    recording: usize,
    len: usize,
    segment_len: usize,
    k: usize,
    policy: ImposterPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trial>> {
    (0..len / segment_len)
        .map(|i| {
            let eeg_start = i * segment_len;
            let mut candidates = vec![eeg_start];
            candidates.extend(draw_imposters(len, eeg_start, segment_len, k, policy, rng)?);
            let mut order: Vec<usize> = (0..=k).collect();
            order.shuffle(rng);
            Ok(Trial {
                participant,
                recording,
                eeg_start,
                candidates,
                order,
            })
        })
        .collect()
}

/// Fraction of scores on the correct side of `threshold` (score above the
/// threshold means "matched").
pub fn absolute_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::InsufficientData(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Fraction of trials whose matched candidate wins among the matched window
/// and the first `k` imposters. `scores[t][c]` scores candidate `c` of
/// trial `t`; ties go to the first presented candidate.
pub fn imposter_accuracy(trials: &[Trial], scores: &[Vec<f64>], k: usize) -> Result<f64> {
    Ok(imposter_hits(trials, scores, k)? as f64 / trials.len() as f64)
}

pub fn imposter_hits(trials: &[Trial], scores: &[Vec<f64>], k: usize) -> Result<usize> {
    if trials.is_empty() || trials.len() != scores.len() {
        return Err(Error::InsufficientData("no trials to score".into()));
    }
    let mut hits = 0;
    for (trial, s) in trials.iter().zip(scores) {
        if trial.candidates.len() <= k {
            return Err(Error::InsufficientData(format!(
                "trial carries {} imposters, task needs {k}",
                trial.candidates.len() - 1
            )));
        }
        let presented: Vec<usize> = trial.presented(k).collect();
        let values: Vec<f64> = presented.iter().map(|&c| s[c]).collect();
        hits += usize::from(presented[argmax(&values)?.index] == 0);
    }
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub margin: f64,
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} \u{b1} {:.2}", self.mean, self.margin)
    }
}

/// Mean and 95 % half-width (`q * sd / sqrt(n)`, sample standard deviation).
pub fn confidence_interval(values: &[f64], method: IntervalMethod) -> Result<Interval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "confidence interval needs n >= 2, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let q = match method {
        IntervalMethod::T => StudentsT::new(0.0, 1.0, nf - 1.0)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .inverse_cdf(0.975),
        IntervalMethod::Normal => 1.959_963_984_540_054,
    };
    Ok(Interval {
        mean,
        margin: q * var.sqrt() / nf.sqrt(),
    })
}

/// A decoder band's data with the checkpoints of its ensemble.
#[derive(Debug, Clone, Copy)]
pub struct DecoderSet<'a> {
    pub dataset: &'a BandDataset,
    pub checkpoints: &'a [Checkpoint],
}

/// An EEG window and the envelope windows it is scored against, in grid
/// samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub participant: usize,
    pub recording: usize,
    pub eeg_start: usize,
    pub envelope_starts: Vec<usize>,
}

impl From<&Trial> for Query {
    fn from(t: &Trial) -> Self {
        Self {
            participant: t.participant,
            recording: t.recording,
            eeg_start: t.eeg_start,
            envelope_starts: t.candidates.clone(),
        }
    }
}

/// Common time grid of the decoders taking part in an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub rate_hz: f64,
    pub segment_len: usize,
}

impl Grid {
    pub fn new(sets: &[DecoderSet<'_>], segment_seconds: f64) -> Result<Self> {
        let rate_hz = sets
            .iter()
            .map(|s| s.dataset.rate_hz)
            .fold(f64::INFINITY, f64::min);
        if !rate_hz.is_finite() {
            return Err(Error::InvalidParameter("no decoder to evaluate".into()));
        }
        let grid = Self {
            rate_hz,
            segment_len: (segment_seconds * rate_hz).round() as usize,
        };
        for s in sets {
            grid.scale(s.dataset)?;
        }
        Ok(grid)
    }

    /// Integer factor from grid samples to `dataset` samples.
    pub fn scale(&self, dataset: &BandDataset) -> Result<usize> {
        let r = dataset.rate_hz / self.rate_hz;
        if (r - r.round()).abs() > 1e-9 || r < 1.0 {
            return Err(Error::RateMismatch {
                expected: self.rate_hz,
                found: dataset.rate_hz,
            });
        }
        Ok(r.round() as usize)
    }

    /// Length in grid samples of a recording present in every set.
    pub fn recording_len(
        &self,
        sets: &[DecoderSet<'_>],
        participant: usize,
        recording: usize,
    ) -> Result<usize> {
        let mut len = usize::MAX;
        for s in sets {
            let rec = s
                .dataset
                .participants
                .get(participant)
                .and_then(|p| p.recordings.get(recording))
                .ok_or_else(|| {
                    Error::Shape(format!(
                        "recording {participant}/{recording} missing from {} data",
                        s.dataset.band
                    ))
                })?;
            len = len.min(rec.samples / self.scale(s.dataset)?);
        }
        Ok(len)
    }
}

fn check_set(set: &DecoderSet<'_>) -> Result<()> {
    if set.checkpoints.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {} checkpoints",
            set.dataset.band
        )));
    }
    for ck in set.checkpoints {
        if ck.band != set.dataset.band
            || (ck.params.rate_hz - set.dataset.rate_hz).abs() > 1e-9
            || ck.params.architecture.channels != set.dataset.channels
        {
            return Err(Error::Shape(format!(
                "{} checkpoint at {} Hz with {} channels does not fit {} data at {} Hz with {} channels",
                ck.band, ck.params.rate_hz, ck.params.architecture.channels, set.dataset.band, set.dataset.rate_hz, set.dataset.channels
            )));
        }
    }
    Ok(())
}

/// Logits of every ensemble instance: `[instance][query][envelope]`.
pub fn instance_logits(
    set: &DecoderSet<'_>,
    grid: &Grid,
    queries: &[Query],
    precision: Precision,
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_set(set)?;
    match precision {
        Precision::F32 => instance_logits_impl::<f32>(set, grid, queries, exec),
        Precision::F64 => instance_logits_impl::<f64>(set, grid, queries, exec),
    }
}

fn instance_logits_impl<T: Scalar>(
    set: &DecoderSet<'_>,
    grid: &Grid,
    queries: &[Query],
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let scale = grid.scale(set.dataset)?;
    let n = grid.segment_len * scale;
    let mut out = Vec::with_capacity(set.checkpoints.len());
    for ck in set.checkpoints {
        let model = DecoderModel::<T>::new(&ck.params);
        let per_query = exec.map(queries, |q| -> Result<Vec<f64>> {
            let rec = &set.dataset.participants[q.participant].recordings[q.recording];
            let fits = |start: usize| (start + grid.segment_len) * scale <= rec.samples;
            if !fits(q.eeg_start) || !q.envelope_starts.iter().all(|&s| fits(s)) {
                return Err(Error::Shape(format!(
                    "query window beyond the end of {}/{}",
                    set.dataset.participants[q.participant].id, rec.id
                )));
            }
            let mut eeg = Vec::new();
            rec.eeg_window_into::<T>(q.eeg_start * scale, n, &mut eeg);
            normalize_segment(&mut eeg, n);
            let a = model.eeg_features(&eeg, n)?;
            let mut env = Vec::new();
            q.envelope_starts
                .iter()
                .map(|&s| {
                    rec.envelope_window_into::<T>(s * scale, n, &mut env);
                    normalize_segment(&mut env, n);
                    let b = model.stimulus_features(&env)?;
                    Ok(model.logit_from_features(&a, &b).to())
                })
                .collect()
        });
        out.push(per_query.into_iter().collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

/// Ensemble-averaged logits, `[query][envelope]`.
pub fn ensemble_logits(
    set: &DecoderSet<'_>,
    grid: &Grid,
    queries: &[Query],
    precision: Precision,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    Ok(average_instances(&instance_logits(
        set, grid, queries, precision, exec,
    )?))
}

/// Mean over the leading (instance) axis.
pub fn average_instances(per_instance: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = per_instance.len() as f64;
    let mut acc = per_instance[0].clone();
    for inst in &per_instance[1..] {
        for (row, r) in acc.iter_mut().zip(inst) {
            row.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    acc.iter_mut().flatten().for_each(|v| *v /= n);
    acc
}

/// Labelled logit pairs from the validation tails of the training
/// participants (matched and one random mismatch per segment), the data the
/// fusion stage is fitted on.
pub fn validation_pairs(
    lf: &DecoderSet<'_>,
    gamma: &DecoderSet<'_>,
    config: &PipelineConfig,
    exec: Execution,
) -> Result<Vec<LogitPair>> {
    let sets = [*lf, *gamma];
    let grid = Grid::new(&sets, config.segment_seconds)?;
    let seg = grid.segment_len;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, LDA_STREAM));
    let mut queries = Vec::new();
    for (pi, p) in lf.dataset.participants_in(Split::Train) {
        for ri in 0..p.recordings.len() {
            let len = grid.recording_len(&sets, pi, ri)?;
            let cut = ((1.0 - config.validation_fraction) * len as f64).round() as usize;
            let span = len - cut;
            if span < 2 * seg {
                continue;
            }
            for k in 0..span / seg {
                let m = sample_mismatch(span, k * seg, seg, &mut rng)?;
                queries.push(Query {
                    participant: pi,
                    recording: ri,
                    eeg_start: cut + k * seg,
                    envelope_starts: vec![cut + k * seg, cut + m],
                });
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::InsufficientData(
            "no validation segments for the fusion fit".into(),
        ));
    }
    let precision = config.train.precision;
    let l = ensemble_logits(lf, &grid, &queries, precision, exec)?;
    let g = ensemble_logits(gamma, &grid, &queries, precision, exec)?;
    let mut pairs = Vec::with_capacity(2 * queries.len());
    for (i, q) in queries.iter().enumerate() {
        for (c, &start) in q.envelope_starts.iter().enumerate() {
            pairs.push(LogitPair {
                lf_logit: l[i][c],
                gamma_logit: g[i][c],
                label: Some(c == 0),
                eeg_segment: q.eeg_start,
                stimulus_segment: start,
            });
        }
    }
    Ok(pairs)
}

/// Heldout trials on the grid, with the maximum imposter count any task
/// needs.
pub fn heldout_trials(
    sets: &[DecoderSet<'_>],
    grid: &Grid,
    k: usize,
    config: &PipelineConfig,
) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRIAL_STREAM));
    let mut trials = Vec::new();
    for (pi, p) in sets[0].dataset.participants_in(Split::Heldout) {
        for ri in 0..p.recordings.len() {
            let len = grid.recording_len(sets, pi, ri)?;
            let mut t = build_trials(
                pi,
                ri,
                len,
                grid.segment_len,
                k,
                config.eval.imposter_policy,
                &mut rng,
            )?;
            if let Some(cap) = config.eval.max_trials_per_recording {
                t.truncate(cap);
            }
            trials.extend(t);
        }
    }
    if trials.is_empty() {
        return Err(Error::InsufficientData(
            "heldout split yields no trials".into(),
        ));
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderResult {
    pub decoder: String,
    /// Accuracy in [0, 1], in participant order.
    pub per_participant: Vec<f64>,
    pub hits: usize,
    pub trials: usize,
    pub mean_pct: f64,
    pub margin_pct: f64,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: Task,
    pub decoders: Vec<DecoderResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub participants: Vec<String>,
    pub n_segments: Vec<usize>,
    pub interval: IntervalMethod,
    pub imposter_policy: ImposterPolicy,
    pub seed: u64,
    pub tasks: Vec<TaskResult>,
    pub config: PipelineConfig,
}

impl EvaluationReport {
    pub fn get(&self, task: Task, decoder: &str) -> Option<&DecoderResult> {
        self.tasks
            .iter()
            .find(|t| t.task == task)?
            .decoders
            .iter()
            .find(|d| d.decoder == decoder)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `task,decoder,participant,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,decoder,participant,accuracy\n");
        for t in &self.tasks {
            for d in &t.decoders {
                for (id, acc) in self.participants.iter().zip(&d.per_participant) {
                    out.push_str(&format!("{},{},{id},{acc:.6}\n", t.task, d.decoder));
                }
            }
        }
        out
    }
}

/// Per-trial candidate scores of each decoder; composite scores are the
/// fusion model's matched probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScores {
    pub trials: Vec<Trial>,
    /// `(decoder name, [trial][candidate] scores, absolute threshold)`.
    pub decoders: Vec<(String, Vec<Vec<f64>>, f64)>,
}

/// Scores the heldout trials with every available decoder.
pub fn score_heldout(
    lf: Option<DecoderSet<'_>>,
    gamma: Option<DecoderSet<'_>>,
    lda: Option<&LdaModel>,
    tasks: &[Task],
    config: &PipelineConfig,
    exec: Execution,
) -> Result<TrialScores> {
    let sets: Vec<DecoderSet<'_>> = [gamma, lf].into_iter().flatten().collect();
    let grid = Grid::new(&sets, config.segment_seconds)?;
    let k = tasks
        .iter()
        .map(|t| t.imposters_needed())
        .max()
        .unwrap_or(1);
    let trials = heldout_trials(&sets, &grid, k, config)?;
    let queries: Vec<Query> = trials.iter().map(Query::from).collect();
    let mut decoders = Vec::new();
    let precision = config.train.precision;
    let g = gamma
        .map(|s| ensemble_logits(&s, &grid, &queries, precision, exec))
        .transpose()?;
    let l = lf
        .map(|s| ensemble_logits(&s, &grid, &queries, precision, exec))
        .transpose()?;
    if let Some(g) = &g {
        decoders.push(("gamma".to_string(), g.clone(), 0.0));
    }
    if let Some(l) = &l {
        decoders.push(("lf".to_string(), l.clone(), 0.0));
    }
    if let (Some(l), Some(g), Some(lda)) = (&l, &g, lda) {
        let comp = l
            .iter()
            .zip(g)
            .map(|(lr, gr)| {
                lr.iter()
                    .zip(gr)
                    .map(|(&a, &b)| lda.predict_proba(&LogitPair::new(a, b, None)))
                    .collect()
            })
            .collect();
        decoders.push(("composite".to_string(), comp, 0.5));
    }
    Ok(TrialScores { trials, decoders })
}

/// Accuracy table over tasks x decoders with per-participant intervals.
pub fn build_report(
    scores: &TrialScores,
    tasks: &[Task],
    participant_ids: &[String],
    config: &PipelineConfig,
) -> Result<EvaluationReport> {
    let mut order: Vec<usize> = scores.trials.iter().map(|t| t.participant).collect();
    order.sort_unstable();
    order.dedup();
    let groups: Vec<Vec<usize>> = order
        .iter()
        .map(|&p| {
            (0..scores.trials.len())
                .filter(|&i| scores.trials[i].participant == p)
                .collect()
        })
        .collect();
    let mut results = Vec::new();
    for &task in tasks {
        let mut decoders = Vec::new();
        for (name, table, threshold) in &scores.decoders {
            let mut per_participant = Vec::new();
            let (mut hits, mut total) = (0usize, 0usize);
            for idx in &groups {
                let trials: Vec<Trial> = idx.iter().map(|&i| scores.trials[i].clone()).collect();
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| table[i].clone()).collect();
                let (h, n) = match task {
                    Task::Absolute => {
                        let s: Vec<f64> = rows.iter().flat_map(|r| [r[0], r[1]]).collect();
                        let labels: Vec<bool> = rows.iter().flat_map(|_| [true, false]).collect();
                        let acc = absolute_accuracy(&s, &labels, *threshold)?;
                        ((acc * s.len() as f64).round() as usize, s.len())
                    }
                    Task::Imposters(k) => (imposter_hits(&trials, &rows, k)?, trials.len()),
                };
                hits += h;
                total += n;
                per_participant.push(h as f64 / n as f64);
            }
            let pct: Vec<f64> = per_participant.iter().map(|a| 100.0 * a).collect();
            let ci = confidence_interval(&pct, config.eval.interval)?;
            decoders.push(DecoderResult {
                decoder: name.clone(),
                per_participant,
                hits,
                trials: total,
                mean_pct: ci.mean,
                margin_pct: ci.margin,
                summary: ci.to_string(),
            });
        }
        results.push(TaskResult { task, decoders });
    }
    Ok(EvaluationReport {
        participants: order.iter().map(|&p| participant_ids[p].clone()).collect(),
        n_segments: groups.iter().map(Vec::len).collect(),
        interval: config.eval.interval,
        imposter_policy: config.eval.imposter_policy,
        seed: config.seed,
        tasks: results,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn interval_hand_oracle() {
        let ci = confidence_interval(&[70.0, 80.0], IntervalMethod::T).unwrap();
        assert!((ci.mean - 75.0).abs() < 1e-12);
        let expected = 12.706_204_736_174_7 * (50f64.sqrt() / 2f64.sqrt());
        assert!((ci.margin - expected).abs() < 1e-6, "{}", ci.margin);
        assert_eq!(
            confidence_interval(&[5.0; 4], IntervalMethod::T)
                .unwrap()
                .margin,
            0.0
        );
        assert!(confidence_interval(&[1.0], IntervalMethod::T).is_err());
        let normal = confidence_interval(&[70.0, 80.0], IntervalMethod::Normal).unwrap();
        assert!(normal.margin < ci.margin);
    }

    #[test]
    fn interval_renders_two_decimals() {
        let ci = Interval {
            mean: 76.184,
            margin: 5.3712,
        };
        assert_eq!(ci.to_string(), "76.18 \u{b1} 5.37");
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::TABLE {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert_eq!(Task::Imposters(4).to_string(), "imposter_4");
        assert!("imposter_0".parse::<Task>().is_err());
        assert_eq!(
            serde_json::to_string(&Task::Absolute).unwrap(),
            "\"absolute\""
        );
    }

    #[test]
    fn absolute_accuracy_cases() {
        let labels = [true, false, true, true];
        let truth: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert_eq!(absolute_accuracy(&truth, &labels, 0.5).unwrap(), 1.0);
        assert_eq!(absolute_accuracy(&[1.0; 4], &labels, 0.5).unwrap(), 0.75);
        assert!(absolute_accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn imposters_are_disjoint_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for policy in [ImposterPolicy::Random, ImposterPolicy::FixedOffsets] {
            let trials = build_trials(0, 0, 3840, 320, 4, policy, &mut rng).unwrap();
            assert_eq!(trials.len(), 12);
            for t in &trials {
                assert_eq!(t.candidates.len(), 5);
                let mut sorted = t.order.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
                for (i, &a) in t.candidates.iter().enumerate() {
                    assert!(a + 320 <= 3840);
                    for &b in &t.candidates[i + 1..] {
                        assert!(a + 320 <= b || b + 320 <= a, "{:?}", t.candidates);
                    }
                }
            }
        }
        assert!(build_trials(0, 0, 1500, 320, 4, ImposterPolicy::Random, &mut rng).is_err());
    }

    #[test]
    fn oracle_scorer_is_perfect_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = build_trials(0, 0, 3840, 320, 4, ImposterPolicy::Random, &mut rng).unwrap();
        let oracle: Vec<Vec<f64>> = trials
            .iter()
            .map(|_| vec![1.0, 0.0, 0.0, 0.0, 0.0])
            .collect();
        assert_eq!(imposter_accuracy(&trials, &oracle, 4).unwrap(), 1.0);
        assert_eq!(imposter_accuracy(&trials, &oracle, 1).unwrap(), 1.0);
        let scores: Vec<Vec<f64>> = trials
            .iter()
            .map(|_| (0..5).map(|_| rng.random()).collect())
            .collect();
        let base = imposter_accuracy(&trials, &scores, 4).unwrap();
        let mut shuffled = trials.clone();
        for t in &mut shuffled {
            t.order.reverse();
        }
        assert_eq!(imposter_accuracy(&shuffled, &scores, 4).unwrap(), base);
    }
}
