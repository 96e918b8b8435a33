//! Batch command-line front end.

mod config;

pub use config::{parse_config, EncoderSettings, Overrides, Profile, RunConfig, PRESET_EPOCHS, USUAL_SEQUENCE_LENGTHS};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{
    load_movies, load_track_dir, split_dataset, synth_generate, write_text, write_track_dir, DatasetManifest,
    EmotionTrack, FloatFormat, SynthSpec, TrackSet,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{ensemble_average, evaluate_run, Aggregation, Correlation, EvalReport};
use crate::model::{train, EpochLog, Model};
use crate::parallel::{with_threads, Execution};
use crate::smoothing::{butter_design, SmootherSpec};

#[derive(Debug, Parser)]
#[command(name = "affectseq", version, about = "Continuous valence/arousal prediction from per-second feature tracks")]
struct Cli {
    /// Worker threads for data-parallel work; 1 keeps everything on the calling thread.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known latent trajectory.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint.txt, train_log.csv and resolved_config.txt.
    Train(TrainArgs),
    /// Predict per-second valence/arousal for the movies of a split.
    Predict(PredictArgs),
    /// Low-pass filter prediction tracks.
    Smooth(SmoothArgs),
    /// Average several prediction directories.
    Ensemble(EnsembleArgs),
    /// Score predictions against annotations.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    movies: usize,
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// Comma-separated name:dimension pairs.
    #[arg(long, default_value = "image:8,audio:8")]
    modalities: String,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Validation movies listed in the manifest [default: min(13, movies / 3)].
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Train,
    Validation,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
}

#[derive(Debug, Args)]
struct SmoothArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Take the smoother settings from a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single forward pass instead of zero-phase filtering.
    #[arg(long)]
    causal: bool,
    #[arg(long, conflicts_with = "moving_average")]
    order: Option<usize>,
    #[arg(long, conflicts_with = "moving_average")]
    wn: Option<f64>,
    /// Comma-separated moving-average weights (odd count).
    #[arg(long, value_name = "W,...")]
    moving_average: Option<String>,
    /// Also write the Butterworth coefficients as CSV to this file.
    #[arg(long)]
    coefficients: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    annotations: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Validation, requires = "manifest")]
    split: Split,
    /// Seed for the default validation draw when the manifest lists none.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_aggregation, default_value = "macro_per_movie")]
    aggregation: Aggregation,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage, 2 data/configuration, 3 numeric.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.parallel.unwrap_or(1);
    let exec = if threads > 1 { Execution::Parallel } else { Execution::Sequential };
    let result = with_threads(threads, move || dispatch(cli.command, exec));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, exec),
        Command::Predict(a) => cmd_predict(a, exec),
        Command::Smooth(a) => cmd_smooth(a, exec),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn parse_modalities(s: &str) -> Result<Vec<(String, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (name, d) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("modality {p:?} must be name:dimension")))?;
            let d = d
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("modality {p:?} has a bad dimension")))?;
            Ok((name.trim().to_string(), d))
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.movies, a.length, parse_modalities(&a.modalities)?);
    spec.noise = a.noise;
    spec.validation = a.validation.unwrap_or((a.movies / 3).min(13));
    let manifest = synth_generate(&spec, &a.out, a.seed)?;
    println!(
        "wrote {} movies × {} s to {}",
        manifest.movies.len(),
        a.length,
        a.out.join("manifest.txt").display()
    );
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::load(&cfg.manifest)?;
    if let Some(tf) = cfg.train_fraction {
        manifest.train_fraction = tf;
    }
    Ok(manifest)
}

fn csv_correlation(c: Correlation) -> String {
    c.to_string()
}

/// Training-log CSV header.
pub const TRAIN_LOG_HEADER: &str =
    "epoch,train_loss,val_valence_mse,val_valence_pcc,val_arousal_mse,val_arousal_pcc";

fn log_row(log: &EpochLog) -> String {
    let mut row = format!("{},{}", log.epoch, log.train_loss);
    match &log.validation {
        Some(r) => {
            let _ = write!(
                row,
                ",{},{},{},{}",
                r.mse[0],
                csv_correlation(r.pcc[0]),
                r.mse[1],
                csv_correlation(r.pcc[1])
            );
        }
        None => row.push_str(",,,,"),
    }
    row
}

fn cmd_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let overrides = Overrides {
        profile: a.profile,
        seed: a.seed,
        out: a.out,
    };
    let cfg = RunConfig::load(&a.config, &overrides)?;
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory (set `out` or pass --out)".into()))?;
    let manifest = load_manifest(&cfg)?;
    let split = split_dataset(&manifest, cfg.seed)?;
    let train_movies = load_movies(&manifest, &split.train, true, exec)?;
    let val_movies = load_movies(&manifest, &split.validation, true, exec)?;
    let mut model = Model::init(cfg.model_config(&manifest)?, cfg.seed)?;
    write_text(&out.join("resolved_config.txt"), &cfg.resolved_text())?;

    let mut tc = cfg.train_config();
    tc.exec = exec;
    let log_path = out.join("train_log.csv");
    let mut log_text = format!("{TRAIN_LOG_HEADER}\n");
    write_text(&log_path, &log_text)?;
    let logs = train(&mut model, &train_movies, &val_movies, &tc, |_, log| {
        log_text.push_str(&log_row(log));
        log_text.push('\n');
        write_text(&log_path, &log_text).map(|()| ControlFlow::Continue(()))
    })?;
    model.save(&out.join("checkpoint.txt"))?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} epochs on {} movies; final loss {:.6}; outputs in {}",
            logs.len(),
            split.train.len(),
            last.train_loss,
            out.display()
        );
    }
    Ok(())
}

fn split_ids(manifest: &DatasetManifest, split: Split, seed: u64) -> Result<Vec<String>> {
    Ok(match split {
        Split::All => manifest.movie_ids(),
        Split::Train => split_dataset(manifest, seed)?.train,
        Split::Validation => {
            let v = split_dataset(manifest, seed)?.validation;
            if v.is_empty() {
                return Err(Error::Config("the validation split is empty".into()));
            }
            v
        }
    })
}

fn cmd_predict(a: PredictArgs, exec: Execution) -> Result<()> {
    let cfg = RunConfig::load(&a.config, &Overrides::default())?;
    let manifest = load_manifest(&cfg)?;
    let model = Model::load(cfg.model_config(&manifest)?, &a.checkpoint)?;
    let ids = split_ids(&manifest, a.split, cfg.seed)?;
    let movies = load_movies(&manifest, &ids, false, exec)?;
    let preds = model.predict_movies(&movies, cfg.batch_size, exec)?;
    write_track_dir(&a.out, &preds, FloatFormat::Decimal)?;
    println!("wrote predictions for {} movies to {}", preds.len(), a.out.display());
    Ok(())
}

fn smoother_from_args(a: &SmoothArgs) -> Result<SmootherSpec> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p, &Overrides::default())?.smoother,
        None => SmootherSpec::default(),
    };
    if let Some(w) = &a.moving_average {
        let weights = w
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad moving-average weights {w:?}")))?;
        return SmootherSpec::MovingAverage(weights).validated();
    }
    if a.order.is_some() || a.wn.is_some() {
        let (order, wn) = match base {
            SmootherSpec::Butterworth { order, wn } => (order, wn),
            _ => (2, 0.05),
        };
        return SmootherSpec::Butterworth {
            order: a.order.unwrap_or(order),
            wn: a.wn.unwrap_or(wn),
        }
        .validated();
    }
    base.validated()
}

/// Filters valence and arousal of every track independently.
pub fn smooth_tracks(tracks: &TrackSet, spec: &SmootherSpec, causal: bool, exec: Execution) -> Result<TrackSet> {
    let items: Vec<&EmotionTrack> = tracks.values().collect();
    exec.map(&items, |t| -> Result<(String, EmotionTrack)> {
        let v = spec.apply(&t.valence, causal)?;
        let a = spec.apply(&t.arousal, causal)?;
        if let Some(w) = v.warning {
            log::warn!("movie {}: {w}", t.movie_id);
        }
        Ok((
            t.movie_id.clone(),
            EmotionTrack {
                movie_id: t.movie_id.clone(),
                valence: v.values,
                arousal: a.values,
            },
        ))
    })
    .into_iter()
    .collect()
}

fn cmd_smooth(a: SmoothArgs, exec: Execution) -> Result<()> {
    let spec = smoother_from_args(&a)?;
    if let (Some(path), SmootherSpec::Butterworth { order, wn }) = (&a.coefficients, &spec) {
        write_text(path, &butter_design(*order, *wn)?.to_csv())?;
    }
    let tracks = load_track_dir(&a.input)?;
    let smoothed = smooth_tracks(&tracks, &spec, a.causal, exec)?;
    write_track_dir(&a.out, &smoothed, FloatFormat::Decimal)?;
    println!("smoothed {} movies ({spec}) into {}", smoothed.len(), a.out.display());
    Ok(())
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let runs = a.runs.iter().map(|p| load_track_dir(p)).collect::<Result<Vec<_>>>()?;
    let avg = ensemble_average(&runs)?;
    write_track_dir(&a.out, &avg, FloatFormat::Decimal)?;
    println!("averaged {} runs into {}", runs.len(), a.out.display());
    Ok(())
}

/// Writes `report.csv`, `report.txt` and `per_movie.csv`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("report.txt"), &report.render())?;
    write_text(&dir.join("per_movie.csv"), &report.per_movie_csv())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let annotations = match (&a.annotations, &a.manifest) {
        (Some(dir), _) => load_track_dir(dir)?,
        (None, Some(m)) => {
            let manifest = DatasetManifest::load(m)?;
            let ids = split_ids(&manifest, a.split, a.seed)?;
            load_movies_annotations(&manifest, &ids)?
        }
        (None, None) => return Err(Error::Config("pass --annotations or --manifest".into())),
    };
    let preds = load_track_dir(&a.predictions)?;
    let report = evaluate_run(&preds, &annotations, a.aggregation)?;
    if let Some(out) = &a.out {
        write_report(out, &report)?;
    }
    print!("{}", report.render());
    Ok(())
}

fn load_movies_annotations(manifest: &DatasetManifest, ids: &[String]) -> Result<TrackSet> {
    let mut set = TrackSet::new();
    for id in ids {
        let track = crate::dataio::load_track(&manifest.annotation_path(id))?;
        let (lo, hi) = manifest.annotation_range;
        track.check_range(lo, hi)?;
        set.insert(id.clone(), track);
    }
    Ok(set)
}

/// Parsed row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<([f64; 2], [Correlation; 2])>,
}

/// Reads a training log written by `train`.
pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let text = crate::dataio::read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_LOG_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected training-log header".into(),
        });
    }
    let bad = |line: usize| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: "malformed training-log row".into(),
    };
    let corr = |s: &str| -> Option<Correlation> {
        if s == "undefined" {
            Some(Correlation::Undefined)
        } else {
            s.parse().ok().map(Correlation::Defined)
        }
    };
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2));
            }
            let validation = if f[2].is_empty() {
                None
            } else {
                let mse = [f[2].parse().map_err(|_| bad(i + 2))?, f[4].parse().map_err(|_| bad(i + 2))?];
                let pcc = [corr(f[3]).ok_or_else(|| bad(i + 2))?, corr(f[5]).ok_or_else(|| bad(i + 2))?];
                Some((mse, pcc))
            };
            Ok(TrainLogRow {
                epoch: f[0].parse().map_err(|_| bad(i + 2))?,
                train_loss: f[1].parse().map_err(|_| bad(i + 2))?,
                validation,
            })
        })
        .collect()
}
