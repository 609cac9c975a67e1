//! Command-line front end. The config file is the source of truth; flags
//! override it. Every run records itself in `run-manifest.json` under the
//! output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::composite::{fit_lda, LdaModel};
use crate::error::{io_err, Error};
use crate::eval::{build_report, score_heldout, validation_pairs, DecoderSet, Task};
use crate::pipeline::{load_band_dataset, write_preprocessed, BandDataset};
use crate::storage::{
    apply_overrides, load_checkpoint, load_manifest, save_checkpoint, Checkpoint, DatasetManifest,
    PipelineConfig,
};
use crate::synth::generate_cohort;
use crate::training::{instance_seed, train_decoder};
use crate::trf::{analyze_band, average_gfp, GfpCurve, TrfPreset};
use crate::{parallel, Band, Execution};

pub const CONFIG_ENV: &str = "MMDECODE_CONFIG";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "mmdecode",
    version,
    about = "Auditory EEG match-mismatch decoding pipeline"
)]
pub struct Cli {
    /// JSON pipeline configuration (falls back to $MMDECODE_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.batch_size=32` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, order-deterministic run; wall time is not recorded.
    #[arg(long, global = true)]
    pub reproducible: bool,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Clone, Args)]
pub struct ManifestArg {
    /// Dataset manifest (defaults to the config's `manifest`, then
    /// `<out>/data/raw/manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Sub {
    /// Generate a synthetic cohort under `<out>/data/raw`.
    Synth {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_heldout: Option<usize>,
    },
    /// Preprocess a manifest for one or both decoder bands.
    Preprocess {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        band: Option<Band>,
    },
    /// TRF/GFP response analysis (lower-gamma, high-gamma and LF presets).
    Trf {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Analyse only the first N participants.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one decoder.
    Train {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        band: Band,
    },
    /// Train an ensemble of independently seeded decoders.
    TrainEnsemble {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        band: Band,
        /// Number of instances (defaults to the config's ensemble_size).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the LDA fusion on validation logits of both decoders.
    FitComposite {
        #[command(flatten)]
        manifest: ManifestArg,
    },
    /// Evaluate on the heldout participants.
    Evaluate {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        imposters: Option<usize>,
    },
    /// Write GFP curves and the fusion scatter for plotting.
    ExportPlots {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        n: Option<usize>,
    },
}

impl Sub {
    pub fn name(&self) -> &'static str {
        match self {
            Sub::Synth { .. } => "synth",
            Sub::Preprocess { .. } => "preprocess",
            Sub::Trf { .. } => "trf",
            Sub::Train { .. } => "train",
            Sub::TrainEnsemble { .. } => "train-ensemble",
            Sub::FitComposite { .. } => "fit-composite",
            Sub::Evaluate { .. } => "evaluate",
            Sub::ExportPlots { .. } => "export-plots",
        }
    }
}

/// A validated invocation.
#[derive(Debug, Clone)]
pub struct Command {
    pub sub: Sub,
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub reproducible: bool,
    pub args: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// Pipeline failure; exit code 1.
    Failed(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failed(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

/// Parses arguments and resolves the configuration.
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.render().to_string()))?;
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut doc = match &config_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => serde_json::to_value(PipelineConfig::default()).map_err(Error::from)?,
    };
    apply_overrides(&mut doc, &cli.overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut config: PipelineConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    match &cli.command {
        Sub::Evaluate {
            imposters: Some(k), ..
        } => config.n_imposters = *k,
        Sub::Synth { n_train, n_heldout } => {
            config.n_train = n_train.unwrap_or(config.n_train);
            config.n_heldout = n_heldout.unwrap_or(config.n_heldout);
        }
        Sub::TrainEnsemble { n: Some(n), .. } => config.ensemble_size = *n,
        _ => {}
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(Command {
        sub: cli.command,
        config,
        out: cli.out,
        threads: cli.threads,
        reproducible: cli.reproducible,
        args: argv
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
    })
}

/// Entry point used by the binary: parse, run, report, exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let help = argv
        .iter()
        .any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V");
    match parse_args(argv) {
        Ok(cmd) => execute(&cmd),
        Err(CliError::Usage(msg)) if help => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_string().trim_end());
            e.exit_code()
        }
    }
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cmd: &Command) -> i32 {
    if let Some(t) = cmd.threads {
        parallel::set_thread_budget(t);
    }
    if cmd.reproducible {
        parallel::set_thread_budget(1);
    }
    let started = Instant::now();
    let mut run = Run {
        cmd,
        exec: if cmd.reproducible {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        artifacts: Vec::new(),
    };
    let result = run
        .dispatch()
        .and_then(|()| run.write_run_manifest(started));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Run<'a> {
    cmd: &'a Command,
    exec: Execution,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    args: &'a [String],
    seed: u64,
    threads: Option<usize>,
    reproducible: bool,
    wall_time_s: Option<f64>,
    artifacts: &'a [String],
    config: &'a PipelineConfig,
}

impl Run<'_> {
    fn out(&self, rel: &str) -> PathBuf {
        self.cmd.out.join(rel)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.cmd.out).unwrap_or(path);
        self.artifacts
            .push(rel.to_string_lossy().replace('\\', "/"));
    }

    fn write_text(&mut self, rel: &str, text: &str) -> crate::Result<()> {
        let path = self.out(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        self.record(&path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> crate::Result<()> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_run_manifest(&self, started: Instant) -> crate::Result<()> {
        let path = self.out("run-manifest.json");
        let mut runs: BTreeMap<String, serde_json::Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        artifacts.dedup();
        let record = RunRecord {
            version: VERSION,
            args: &self.cmd.args,
            seed: self.cmd.config.seed,
            threads: self.cmd.threads,
            reproducible: self.cmd.reproducible,
            wall_time_s: (!self.cmd.reproducible).then(|| started.elapsed().as_secs_f64()),
            artifacts: &artifacts,
            config: &self.cmd.config,
        };
        runs.insert(
            self.cmd.sub.name().to_string(),
            serde_json::to_value(record)?,
        );
        fs::create_dir_all(&self.cmd.out).map_err(io_err(&self.cmd.out))?;
        fs::write(&path, serde_json::to_string_pretty(&runs)? + "\n").map_err(io_err(&path))
    }

    fn raw_manifest_path(&self, arg: &ManifestArg) -> PathBuf {
        arg.manifest
            .clone()
            .or_else(|| self.cmd.config.manifest.clone())
            .unwrap_or_else(|| self.out("data/raw/manifest.json"))
    }

    fn raw_manifest(&self, arg: &ManifestArg) -> crate::Result<DatasetManifest> {
        load_manifest(self.raw_manifest_path(arg))
    }

    /// Preprocessed data for `band`, reading `<out>/data/<band>` when
    /// `preprocess` has run.
    fn band_dataset(&self, arg: &ManifestArg, band: Band) -> crate::Result<BandDataset> {
        let pre = self.out(&format!("data/{band}/manifest.json"));
        let manifest = if arg.manifest.is_none() && pre.exists() {
            load_manifest(pre)?
        } else {
            self.raw_manifest(arg)?
        };
        load_band_dataset(&manifest, band, &self.cmd.config, self.exec)
    }

    fn checkpoints(&self, band: Band) -> crate::Result<Vec<Checkpoint>> {
        let dir = self.out(&format!("checkpoints/{band}_ensemble"));
        if dir.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "mmt"))
                .collect();
            paths.sort();
            if !paths.is_empty() {
                return paths.iter().map(load_checkpoint).collect();
            }
        }
        let single = self.out(&format!("checkpoints/{band}.mmt"));
        if !single.exists() {
            return Err(Error::InsufficientData(format!(
                "no {band} checkpoints under {} (run train or train-ensemble first)",
                self.out("checkpoints").display()
            )));
        }
        Ok(vec![load_checkpoint(single)?])
    }

    fn lda(&self) -> crate::Result<LdaModel> {
        let path = self.out("checkpoints/lda.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn dispatch(&mut self) -> crate::Result<()> {
        let cfg = &self.cmd.config;
        match &self.cmd.sub {
            Sub::Synth { .. } => {
                let dir = self.out("data/raw");
                generate_cohort(
                    cfg.n_train,
                    cfg.n_heldout,
                    &cfg.cohort,
                    cfg.seed,
                    &dir,
                    self.exec,
                )?;
                let entries: Vec<PathBuf> = walk(&dir)?;
                for p in entries {
                    self.record(&p);
                }
            }
            Sub::Preprocess { manifest, band } => {
                let raw = self.raw_manifest(manifest)?;
                let bands: Vec<Band> = band.map_or(Band::BOTH.to_vec(), |b| vec![b]);
                for b in bands {
                    let dir = self.out(&format!("data/{b}"));
                    write_preprocessed(&raw, b, cfg, &dir, self.exec)?;
                    for p in walk(&dir)? {
                        self.record(&p);
                    }
                }
            }
            Sub::Trf { manifest, n } => {
                let raw = self.raw_manifest(manifest)?;
                self.trf_outputs(&raw, *n)?;
            }
            Sub::Train { manifest, band } => {
                let data = self.band_dataset(manifest, *band)?;
                let (ck, history) = train_decoder(&data, cfg, self.exec)?;
                let path = self.out(&format!("checkpoints/{band}.mmt"));
                save_checkpoint(&path, &ck)?;
                self.record(&path);
                self.write_json(&format!("reports/{band}_history.json"), &history)?;
            }
            Sub::TrainEnsemble { manifest, band, .. } => {
                let data = self.band_dataset(manifest, *band)?;
                for i in 0..cfg.ensemble_size {
                    let mut c = cfg.clone();
                    c.train.seed = instance_seed(cfg.train.seed, i);
                    let (ck, history) = train_decoder(&data, &c, self.exec)?;
                    let path = self.out(&format!("checkpoints/{band}_ensemble/{i:02}.mmt"));
                    save_checkpoint(&path, &ck)?;
                    self.record(&path);
                    self.write_json(
                        &format!("reports/{band}_ensemble/{i:02}_history.json"),
                        &history,
                    )?;
                }
            }
            Sub::FitComposite { manifest } => {
                let pairs = self.validation_pairs(manifest)?;
                let lda = fit_lda(&pairs)?;
                self.write_json("checkpoints/lda.json", &lda)?;
            }
            Sub::Evaluate { manifest, .. } => {
                let lf = self.band_dataset(manifest, Band::Lf)?;
                let gamma = self.band_dataset(manifest, Band::Gamma)?;
                let (lck, gck) = (self.checkpoints(Band::Lf)?, self.checkpoints(Band::Gamma)?);
                let lda = self.lda()?;
                let mut tasks = vec![
                    Task::Absolute,
                    Task::Imposters(1),
                    Task::Imposters(cfg.n_imposters),
                ];
                tasks.dedup();
                let scores = score_heldout(
                    Some(DecoderSet {
                        dataset: &lf,
                        checkpoints: &lck,
                    }),
                    Some(DecoderSet {
                        dataset: &gamma,
                        checkpoints: &gck,
                    }),
                    Some(&lda),
                    &tasks,
                    cfg,
                    self.exec,
                )?;
                let ids: Vec<String> = lf.participants.iter().map(|p| p.id.clone()).collect();
                let report = build_report(&scores, &tasks, &ids, cfg)?;
                self.write_text("reports/evaluation.json", &report.to_json()?)?;
                self.write_text("reports/accuracy.csv", &report.to_csv())?;
                for t in &report.tasks {
                    for d in &t.decoders {
                        println!("{:<12} {:<10} {}", t.task, d.decoder, d.summary);
                    }
                }
            }
            Sub::ExportPlots { manifest, n } => {
                let raw = self.raw_manifest(manifest)?;
                self.trf_outputs(&raw, *n)?;
                let pairs = self.validation_pairs(manifest)?;
                let mut csv = String::from("lf_logit,gamma_logit,label\n");
                for p in &pairs {
                    csv.push_str(&format!(
                        "{:.9},{:.9},{}\n",
                        p.lf_logit,
                        p.gamma_logit,
                        u8::from(p.label == Some(true))
                    ));
                }
                self.write_text("plots/logits.csv", &csv)?;
                let lda = match self.lda() {
                    Ok(m) => m,
                    Err(_) => fit_lda(&pairs)?,
                };
                self.write_json(
                    "plots/lda_line.json",
                    &serde_json::json!({
                        "w_lf": lda.weights[0],
                        "w_gamma": lda.weights[1],
                        "b": lda.bias,
                        "equation": "w_lf * lf_logit + w_gamma * gamma_logit + b = 0",
                    }),
                )?;
            }
        }
        Ok(())
    }

    fn validation_pairs(
        &self,
        manifest: &ManifestArg,
    ) -> crate::Result<Vec<crate::decoder::LogitPair>> {
        let lf = self.band_dataset(manifest, Band::Lf)?;
        let gamma = self.band_dataset(manifest, Band::Gamma)?;
        let (lck, gck) = (self.checkpoints(Band::Lf)?, self.checkpoints(Band::Gamma)?);
        validation_pairs(
            &DecoderSet {
                dataset: &lf,
                checkpoints: &lck,
            },
            &DecoderSet {
                dataset: &gamma,
                checkpoints: &gck,
            },
            &self.cmd.config,
            self.exec,
        )
    }

    fn trf_outputs(&mut self, raw: &DatasetManifest, n: Option<usize>) -> crate::Result<()> {
        let cfg = &self.cmd.config;
        let presets = [
            ("lower_gamma", TrfPreset::gamma(cfg.gamma_band_hz)),
            ("high_gamma", TrfPreset::gamma(cfg.alt_gamma_band_hz)),
            ("lf", TrfPreset::lf()),
        ];
        let mut curves: Vec<Vec<GfpCurve>> = vec![Vec::new(); presets.len()];
        let take = n.unwrap_or(raw.participants.len());
        for p in raw.participants.iter().take(take) {
            for rec in &p.recordings {
                let (eeg, env) = raw.load_recording(rec)?;
                for (slot, (_, preset)) in presets.iter().enumerate() {
                    curves[slot].push(analyze_band(&eeg, &env, preset, self.exec)?.gfp);
                }
            }
        }
        let mut summary = Vec::new();
        for ((name, preset), c) in presets.iter().zip(&curves) {
            let avg = average_gfp(c, preset.background_s)?;
            let mut csv = String::from("lag_s,gfp\n");
            for (l, v) in avg.lag_axis_s.iter().zip(&avg.values) {
                csv.push_str(&format!("{l:.6},{v:.9}\n"));
            }
            self.write_text(&format!("plots/gfp_{name}.csv"), &csv)?;
            summary.push(serde_json::json!({
                "band": name,
                "band_hz": preset.band_hz,
                "peak_snr": avg.peak_snr,
                "peak_lag_s": avg.peak_lag_s,
                "recordings": c.len(),
            }));
        }
        self.write_json("reports/trf_summary.json", &summary)
    }
}

fn walk(dir: &Path) -> crate::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
