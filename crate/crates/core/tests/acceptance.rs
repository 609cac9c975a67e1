//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! to stdout (uncaptured, so it shows in a plain `cargo test` run).
//!
//! The cohort-scale criteria (7, 8) train 10 x 2 and 10 x 16 decoders on
//! 64-channel, 300 s participants and take most of the suite's runtime.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::*;
use mmdecode::composite::fit_lda;
use mmdecode::decoder::LogitPair;
use mmdecode::dsp::{design_bandpass, filtfilt, resample};
use mmdecode::eval::{
    absolute_accuracy, build_report, build_trials, confidence_interval, heldout_trials,
    imposter_hits, instance_logits, score_heldout, validation_pairs, DecoderSet, Grid,
    ImposterPolicy, IntervalMethod, Query, Task, TrialScores,
};
use mmdecode::pipeline::{
    preprocess_recording, synthetic_datasets, BandDataset, BandParticipant, BandRecording,
};
use mmdecode::storage::{PipelineConfig, Split};
use mmdecode::synth::{
    participant_id, synth_eeg, synth_envelope, CohortConfig, KernelShape, SynthConfig,
};
use mmdecode::training::{train_decoder, train_ensemble};
use mmdecode::trf::{analyze_band, fit_trf, gfp, normalize_gfp, TrfPreset};
use mmdecode::{Band, Envelope, Execution, MultichannelSignal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "\ncriterion {criterion:>2} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // bypasses the test harness's output capture
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// The reference cohort of criteria 7 and 8 and the training settings used
/// on it (30 epochs bounds the run time; early stopping may end sooner).
fn reference_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        n_train: 8,
        n_heldout: 2,
        ..Default::default()
    };
    cfg.train.seed = seed;
    cfg.train.max_epochs = 30;
    cfg
}

const COHORT_SEEDS: std::ops::Range<u64> = 0..10;

#[test]
fn criterion_01_table_structure() {
    // The published accuracies need the real recordings; what can be
    // checked here is that a report carries the same table: three tasks by
    // three decoders, each as a per-participant mean with a 95 % margin.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trials = Vec::new();
    for p in 0..4 {
        trials
            .extend(build_trials(p, 0, 64 * 60, 320, 4, ImposterPolicy::Random, &mut rng).unwrap());
    }
    let table = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        trials
            .iter()
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let scores = TrialScores {
        trials: trials.clone(),
        decoders: vec![
            ("gamma".into(), table(&mut rng), 0.0),
            ("lf".into(), table(&mut rng), 0.0),
            ("composite".into(), table(&mut rng), 0.0),
        ],
    };
    let ids: Vec<String> = (0..4).map(participant_id).collect();
    let rep = build_report(&scores, &Task::TABLE, &ids, &PipelineConfig::default()).unwrap();
    let mut ok = rep.tasks.len() == 3;
    for task in Task::TABLE {
        for d in ["gamma", "lf", "composite"] {
            let r = rep.get(task, d);
            ok &= r.is_some_and(|r| {
                let parts: Vec<&str> = r.summary.split(" \u{b1} ").collect();
                r.per_participant.len() == 4
                    && parts.len() == 2
                    && parts
                        .iter()
                        .all(|p| p.split('.').nth(1).is_some_and(|f| f.len() == 2))
            });
        }
    }
    report(
        1,
        "accuracy table structure",
        ok,
        "absolute/imposter_1/imposter_4 x gamma/lf/composite rendered as mean \u{b1} margin; \
         published absolute accuracies are not reproducible without the challenge data and are \
         replaced by criteria 2-10",
    );
}

#[test]
fn criterion_02_gradient_check() {
    let t = Instant::now();
    let params = tiny_decoder(2, 4);
    let batch = random_batch(3, 4, 32, 4);
    let (err, at) = max_gradient_error(&params, &batch, 1e-5);
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        "gradient vs central differences",
        err < 1e-4 && secs < 60.0,
        &format!(
            "{} parameters, max relative error {err:.2e} (parameter {at}), {secs:.1} s",
            params.len()
        ),
    );
}

fn analytic_bandpass_db(f: f64, lo: f64, hi: f64, order: i32, rate: f64) -> f64 {
    let w = |x: f64| (std::f64::consts::PI * x / rate).tan();
    let (wl, wh, wf) = (w(lo), w(hi), w(f));
    let x = (wf * wf - wl * wh) / (wf * (wh - wl));
    -10.0 * (1.0 + x.powi(2 * order)).log10()
}

#[test]
fn criterion_03_filter_correctness() {
    let rate = 512.0;
    let mut worst_edge: f64 = 0.0;
    let mut worst_end: f64 = 0.0;
    let mut lags_ok = true;
    for (lo, hi) in [(35.0, 150.0), (70.0, 220.0)] {
        let bp = design_bandpass(lo, hi, 3, rate).unwrap();
        for f in [lo, hi] {
            worst_edge = worst_edge
                .max((bp.magnitude_db(f) - analytic_bandpass_db(f, lo, hi, 3, rate)).abs());
        }
        worst_end = worst_end
            .max(bp.magnitude(0.0))
            .max(bp.magnitude(rate / 2.0));
        for f in [lo + 10.0, (lo * hi).sqrt(), hi - 10.0] {
            let x: Vec<f64> = (0..4096)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / rate).sin())
                .collect();
            let y = filtfilt(&x, &bp);
            let lag = (-8isize..=8)
                .max_by(|&a, &b| {
                    let c = |l: isize| {
                        (512..3584)
                            .map(|i| x[i] * y[(i as isize + l) as usize])
                            .sum::<f64>()
                    };
                    c(a).total_cmp(&c(b))
                })
                .unwrap();
            lags_ok &= lag == 0;
        }
    }
    report(
        3,
        "Butterworth band-passes",
        worst_edge < 0.1 && worst_end < 1e-6 && lags_ok,
        &format!(
            "edge deviation {worst_edge:.2e} dB, DC/Nyquist magnitude {worst_end:.1e}, in-band lag 0: {lags_ok}"
        ),
    );
}

fn clean_lf_fit() -> f64 {
    let env = synth_envelope(60.0, 512.0, 1).unwrap();
    let env =
        Envelope::from_signal(resample(&env.to_signal(), 64.0, Execution::Sequential).unwrap())
            .unwrap();
    let kernel = KernelShape::lf().sample(64.0);
    let x = env.as_slice();
    let response: Vec<f64> = (0..x.len())
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .filter(|(j, _)| *j <= t)
                .map(|(j, h)| h * x[t - j])
                .sum()
        })
        .collect();
    let rows: Vec<Vec<f64>> = [1.0, -0.7, 0.3]
        .iter()
        .map(|g| response.iter().map(|v| g * v).collect())
        .collect();
    let eeg = MultichannelSignal::from_rows(&rows, 64.0).unwrap();
    let trf = fit_trf(&env, &eeg, -0.1, 0.4, 1e-8).unwrap();
    let truth: Vec<f64> = trf
        .lag_axis_s
        .iter()
        .map(|&tau| {
            if tau >= 0.0 {
                kernel
                    .get((tau * 64.0).round() as usize)
                    .copied()
                    .unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    (0..3)
        .map(|c| pearson(trf.channel(c), &truth).abs())
        .fold(1.0, f64::min)
}

#[test]
fn criterion_04_trf_recovery_and_gain_monotonicity() {
    let r = clean_lf_fit();

    // reference gamma gain and two doublings; below the reference the peak
    // statistic is dominated by the noise maximum over lags
    let preset = TrfPreset::gamma((35.0, 150.0));
    let gains = [0.04, 0.08, 0.16];
    let mut snr = Vec::new();
    let mut bg_err: f64 = 0.0;
    for seed in 0..10u64 {
        let env = synth_envelope(120.0, 512.0, 500 + seed).unwrap();
        let row: Vec<f64> = gains
            .iter()
            .map(|&g| {
                let eeg = synth_eeg(&env, &SynthConfig::new(64, 0.06, g, 500 + seed)).unwrap();
                let a = analyze_band(&eeg, &env, &preset, Execution::Parallel).unwrap();
                let raw = gfp(&a.trf).unwrap();
                let norm = normalize_gfp(&raw, preset.background_s).unwrap();
                let bg: Vec<f64> = norm
                    .lag_axis_s
                    .iter()
                    .zip(&norm.values)
                    .filter(|(&l, _)| {
                        l >= preset.background_s.0 - 1e-9 && l <= preset.background_s.1 + 1e-9
                    })
                    .map(|(_, &v)| v)
                    .collect();
                bg_err = bg_err.max((bg.iter().sum::<f64>() / bg.len() as f64 - 1.0).abs());
                norm.peak_snr
            })
            .collect();
        snr.push(row);
    }
    // sign test per adjacent gain pair: P(X >= k | 10, 1/2) < 0.05 needs k >= 9
    let mut p_values = Vec::new();
    for j in 0..gains.len() - 1 {
        let up = snr.iter().filter(|s| s[j + 1] > s[j]).count();
        p_values.push((up, binomial_upper_tail(up, 10, 0.5)));
    }
    let mean_snr: Vec<String> = (0..3)
        .map(|j| format!("{:.2}", snr.iter().map(|s| s[j]).sum::<f64>() / 10.0))
        .collect();
    let signs_ok = p_values.iter().all(|&(_, p)| p < 0.05);
    report(
        4,
        "TRF recovery, GFP normalization, SNR monotonic in gain",
        r > 0.999 && bg_err < 1e-12 && signs_ok,
        &format!(
            "noiseless r = {r:.6}, background mean error {bg_err:.1e}, mean SNR at g = {gains:?}: [{}], \
             increases per step {:?}",
            mean_snr.join(", "),
            p_values.iter().map(|(k, p)| format!("{k}/10 (p = {p:.4})")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_05_lda_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let pairs = random_pairs(1000 + seed);
        let m = fit_lda(&pairs).unwrap();
        let (w, b) = lda_oracle(&pairs);
        let rel = |a: f64, e: f64| (a - e).abs() / (1.0 + e.abs());
        worst = worst
            .max(rel(m.weights[0], w[0]))
            .max(rel(m.weights[1], w[1]))
            .max(rel(m.bias, b));
    }
    // symmetric classes: mirror images through the origin, equal priors
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sym = Vec::new();
    for _ in 0..50 {
        let x = [rng.random_range(0.0..2.0), rng.random_range(-1.0..3.0)];
        sym.push(LogitPair::new(x[0], x[1], Some(true)));
        sym.push(LogitPair::new(-x[0], -x[1], Some(false)));
    }
    let m = fit_lda(&sym).unwrap();
    let mid = [
        0.5 * (m.mean0[0] + m.mean1[0]),
        0.5 * (m.mean0[1] + m.mean1[1]),
    ];
    let p_mid = m.predict_proba(&LogitPair::new(mid[0], mid[1], None));
    report(
        5,
        "LDA matches closed form",
        worst < 1e-9 && (p_mid - 0.5).abs() < 1e-9,
        &format!("max relative deviation over 100 datasets {worst:.1e}, midpoint probability {p_mid:.12}"),
    );
}

#[test]
fn criterion_06_chance_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seg = 320;
    let mut trials = Vec::new();
    let mut rec = 0;
    while trials.len() < 10_000 {
        trials.extend(
            build_trials(0, rec, 40 * seg, seg, 4, ImposterPolicy::Random, &mut rng).unwrap(),
        );
        rec += 1;
    }
    trials.truncate(10_000);
    let n = trials.len();
    let scores: Vec<Vec<f64>> = trials
        .iter()
        .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
        .collect();
    let acc1 = imposter_hits(&trials, &scores, 1).unwrap() as f64 / n as f64;
    let acc4 = imposter_hits(&trials, &scores, 4).unwrap() as f64 / n as f64;
    let abs_scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let acc_abs = absolute_accuracy(&abs_scores, &labels, 0.5).unwrap();
    let inside = |acc: f64, p: f64| {
        let (lo, hi) = binomial_99(p, n);
        (lo..=hi).contains(&acc)
    };
    report(
        6,
        "random scorers sit at chance",
        inside(acc1, 0.5) && inside(acc4, 0.2) && inside(acc_abs, 0.5),
        &format!("n = {n}: one imposter {acc1:.4} (1/2), four imposters {acc4:.4} (1/5), absolute {acc_abs:.4} (1/2)"),
    );
}

#[test]
fn criterion_07_end_to_end_ordering() {
    let cohort = CohortConfig::default();
    let mut good = 0;
    let mut lines = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in COHORT_SEEDS {
        let t = Instant::now();
        let cfg = reference_config(seed);
        let (lf, gamma) = synthetic_datasets(
            &cohort,
            cfg.n_train,
            cfg.n_heldout,
            seed,
            &cfg,
            Execution::Parallel,
        )
        .unwrap();
        let lck = [train_decoder(&lf, &cfg, Execution::Parallel).unwrap().0];
        let gck = [train_decoder(&gamma, &cfg, Execution::Parallel).unwrap().0];
        let ls = DecoderSet {
            dataset: &lf,
            checkpoints: &lck,
        };
        let gs = DecoderSet {
            dataset: &gamma,
            checkpoints: &gck,
        };
        let lda = fit_lda(&validation_pairs(&ls, &gs, &cfg, Execution::Parallel).unwrap()).unwrap();
        let tasks = [Task::Imposters(4)];
        let scores = score_heldout(
            Some(ls),
            Some(gs),
            Some(&lda),
            &tasks,
            &cfg,
            Execution::Parallel,
        )
        .unwrap();
        let n = scores.trials.len();
        let hits: Vec<(String, usize)> = scores
            .decoders
            .iter()
            .map(|(name, table, _)| {
                (
                    name.clone(),
                    imposter_hits(&scores.trials, table, 4).unwrap(),
                )
            })
            .collect();
        let get = |name: &str| hits.iter().find(|(d, _)| d == name).unwrap().1;
        let (g, l, c) = (get("gamma"), get("lf"), get("composite"));
        let above_chance = [g, l, c]
            .iter()
            .all(|&h| binomial_upper_tail(h, n, 0.2) < 0.01);
        let ok = c >= l && c >= g && above_chance;
        good += usize::from(ok);
        let secs = t.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        lines.push(format!(
            "seed {seed}: lf {l}/{n} gamma {g}/{n} composite {c}/{n} ({secs:.0} s){}",
            if ok { "" } else { " x" }
        ));
    }
    for l in &lines {
        let _ = writeln!(std::io::stdout().lock(), "    {l}");
    }
    report(
        7,
        "composite >= each decoder > chance on the reference cohort",
        good >= 8 && slowest < 600.0,
        &format!("{good}/10 seeds satisfy the ordering; slowest run {slowest:.0} s"),
    );
}

/// LF-only preprocessing of the reference cohort (criterion 8 never needs
/// the gamma band).
fn lf_dataset(cohort: &CohortConfig, cfg: &PipelineConfig, seed: u64) -> BandDataset {
    let participants = (0..cfg.n_train + cfg.n_heldout)
        .map(|i| {
            let (eeg, env) = cohort.recording(seed, i, 0).unwrap();
            let (e, v) =
                preprocess_recording(&eeg, &env, Band::Lf, cfg, Execution::Parallel).unwrap();
            BandParticipant {
                id: participant_id(i),
                split: if i < cfg.n_train {
                    Split::Train
                } else {
                    Split::Heldout
                },
                recordings: vec![BandRecording::new("rec0", &e, &v).unwrap()],
            }
        })
        .collect();
    BandDataset {
        band: Band::Lf,
        rate_hz: cfg.lf_rate_hz,
        channels: cohort.n_channels,
        participants,
    }
}

fn mean_of(rows: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let owned: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| (*r).clone()).collect();
    mmdecode::eval::average_instances(&owned)
}

#[test]
fn criterion_08_ensemble_effect() {
    let cohort = CohortConfig::default();
    let mut good = 0;
    let (mut var_avg_sum, mut var_single_sum) = (0.0, 0.0);
    let mut lines = Vec::new();
    for seed in COHORT_SEEDS {
        let cfg = reference_config(seed);
        let data = lf_dataset(&cohort, &cfg, seed);
        let members = train_ensemble(&data, &cfg, 16, Execution::Parallel).unwrap();
        let set = DecoderSet {
            dataset: &data,
            checkpoints: &members,
        };
        let grid = Grid::new(&[set], cfg.segment_seconds).unwrap();
        let trials = heldout_trials(&[set], &grid, 4, &cfg).unwrap();
        let queries: Vec<Query> = trials.iter().map(Query::from).collect();
        let logits = instance_logits(
            &set,
            &grid,
            &queries,
            cfg.train.precision,
            Execution::Parallel,
        )
        .unwrap();
        let n = trials.len();

        // ensemble A = instances 0-7 is the decoder under test; B = 8-15 is
        // an independent replicate used only to measure its variance
        let a = mean_of(&logits[..8].iter().collect::<Vec<_>>());
        let b = mean_of(&logits[8..].iter().collect::<Vec<_>>());
        let acc_a = imposter_hits(&trials, &a, 4).unwrap();
        let mut singles: Vec<usize> = logits[..8]
            .iter()
            .map(|l| imposter_hits(&trials, l, 4).unwrap())
            .collect();
        singles.sort_unstable();
        let median = 0.5 * (singles[3] + singles[4]) as f64;
        let ok = acc_a as f64 >= median;
        good += usize::from(ok);

        let (mut va, mut vs, mut cells) = (0.0, 0.0, 0usize);
        for q in 0..n {
            for c in 0..5 {
                va += 0.5 * (a[q][c] - b[q][c]).powi(2);
                let xs: Vec<f64> = logits.iter().map(|l| l[q][c]).collect();
                let m = xs.iter().sum::<f64>() / 16.0;
                vs += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 15.0;
                cells += 1;
            }
        }
        var_avg_sum += va / cells as f64;
        var_single_sum += vs / cells as f64;
        lines.push(format!(
            "seed {seed}: averaged {acc_a}/{n}, single-instance median {median}/{n} (range {}-{}), variance ratio {:.3}{}",
            singles[0],
            singles[7],
            va / vs,
            if ok { "" } else { " x" }
        ));
    }
    for l in &lines {
        let _ = writeln!(std::io::stdout().lock(), "    {l}");
    }
    let ratio = var_avg_sum / var_single_sum;
    report(
        8,
        "8-instance logit averaging",
        good >= 8 && ratio <= 0.25,
        &format!("{good}/10 seeds at or above the single-instance median; variance ratio averaged/single {ratio:.3} (<= 0.25)"),
    );
}

fn cli(out: &Path, config: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mmdecode"))
        .args(args)
        .args(["--reproducible", "--seed", "17", "--out"])
        .arg(out)
        .arg("--config")
        .arg(config)
        .env_remove("MMDECODE_CONFIG")
        .env("RUST_LOG", "error")
        .status()
        .is_ok_and(|s| s.success())
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_09_determinism() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let stages: &[&[&str]] = &[
        &["synth"],
        &["preprocess"],
        &["trf", "--n", "2"],
        &["train", "--band", "lf"],
        &["train", "--band", "gamma"],
        &["train-ensemble", "--band", "lf", "--n", "2"],
        &["train-ensemble", "--band", "gamma", "--n", "2"],
        &["fit-composite"],
        &["evaluate"],
        &["export-plots", "--n", "2"],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut runs = Vec::new();
    let mut all_ok = true;
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        all_ok &= stages.iter().all(|s| cli(&out, &config, s));
        runs.push(files(&out));
    }
    let same_names = runs[0]
        .iter()
        .map(|f| &f.0)
        .eq(runs[1].iter().map(|f| &f.0));
    let differing: Vec<String> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    report(
        9,
        "--reproducible reruns are byte-identical",
        all_ok && same_names && differing.is_empty() && !runs[0].is_empty(),
        &format!(
            "{} stages, {} artifacts compared, differing: {:?}",
            stages.len(),
            runs[0].len(),
            differing
        ),
    );
}

#[test]
fn criterion_10_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..100);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let ci = confidence_interval(&values, IntervalMethod::T).unwrap();
        let (mean, margin) = t_interval_oracle(&values);
        worst = worst
            .max((ci.mean - mean).abs())
            .max((ci.margin - margin).abs());
    }
    let rendered = confidence_interval(&[70.81, 81.55], IntervalMethod::T)
        .unwrap()
        .to_string();
    let expected = {
        let (m, h) = t_interval_oracle(&[70.81, 81.55]);
        format!("{m:.2} \u{b1} {h:.2}")
    };
    report(
        10,
        "t-interval oracle and table format",
        worst < 1e-9 && rendered == expected && rendered == "76.18 \u{b1} 68.23",
        &format!("max deviation {worst:.1e} over 500 samples; renders \"{rendered}\""),
    );
}
