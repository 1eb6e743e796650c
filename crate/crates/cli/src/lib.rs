//! `invtrans` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use invtrans_core::checkpoint::Checkpoint;
use invtrans_core::datagen::{
    generate_corpus, read_frames, read_label_csv, write_frames, write_label_csv, CorpusSpec, FrameLabel, FramesFile,
    PROBE_FILE,
};
use invtrans_core::evaluation::{
    concept_probe, denoise, encode, framewise_prf, predict_labels, probe_heatmap, resynthesize, roundtrip_report,
    sample_frames, write_pgm, write_prf_csv, write_probe_csv, DEFAULT_ACTIVITY_THRESHOLD, DEFAULT_PROBE_SAMPLES,
    PROBE_QUANTILES,
};
use invtrans_core::training::{grad_check, train, GradCheckConfig, TrainConfig};
use invtrans_core::{DimSpec, Error, InnModel, Mat, RngState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "invtrans",
    version,
    about = "Invertible networks for framewise transcription"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and probe reference
    GenData(Flags),
    /// Train a model on a frames file
    Train(Flags),
    /// Forward pass to a label CSV, optionally denoised
    Transcribe(Flags),
    /// Resynthesize frames from an edited label CSV
    Invert(Flags),
    /// Draw frames for given labels
    Sample(Flags),
    /// Single-note concept probe against a reference file
    Probe(Flags),
    /// Framewise precision, recall and F1
    Eval(Flags),
    /// Compare analytic gradients with central differences
    GradCheck(Flags),
    /// Forward-inverse reconstruction error on a frames file
    Roundtrip(Flags),
}

#[derive(Debug, Clone, Default, Args)]
struct Flags {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Denoise threshold for transcribe/invert/sample, activity threshold
    /// for eval
    #[arg(long)]
    threshold: Option<f64>,
    /// Frames file (FRM1)
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Validation frames for train
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Label CSV (frame,key,phase,velocity)
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    key: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
}

/// Evaluation settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Denoise threshold applied to predictions before export; 0 keeps
    /// them as they are.
    pub threshold: f64,
    pub activity_threshold: f64,
    pub n_samples: usize,
    pub probe_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            n_samples: DEFAULT_PROBE_SAMPLES,
            probe_bins: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub frames: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run reads from its configuration file. Command-line flags
/// override file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for corpus generation, training and sampling. Overrides
    /// `train.seed` when set.
    pub seed: Option<u64>,
    pub key: Option<usize>,
    pub dims: DimSpec,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn validate(&self) -> invtrans_core::Result<()> {
        self.dims.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if !(self.eval.threshold >= 0.0) {
            return Err(Error::InvalidArgument("eval.threshold must be >= 0".into()));
        }
        if self.eval.n_samples == 0 || self.eval.probe_bins == 0 {
            return Err(Error::InvalidArgument(
                "eval.n_samples and eval.probe_bins must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::InvalidArgument(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome<i32> {
    match cmd {
        Command::GenData(f) => gen_data(&resolve(&f)?),
        Command::Train(f) => train_cmd(&resolve(&f)?),
        Command::Transcribe(f) => transcribe(&resolve(&f)?),
        Command::Invert(f) => invert(&resolve(&f)?),
        Command::Sample(f) => sample(&resolve(&f)?, f.n_samples),
        Command::Probe(f) => probe(&resolve(&f)?),
        Command::Eval(f) => eval(&resolve(&f)?),
        Command::GradCheck(f) => grad_check_cmd(&resolve(&f)?, f.seed),
        Command::Roundtrip(f) => roundtrip(&resolve(&f)?),
    }
}

/// Loads the config file, applies flags and validates.
fn resolve(f: &Flags) -> Outcome<RunConfig> {
    let mut cfg = match &f.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if f.seed.is_some() {
        cfg.seed = f.seed;
    }
    cfg.train.seed = cfg.seed();
    cfg.seed = Some(cfg.train.seed);
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.frames, &f.frames),
        (&mut p.valid, &f.valid),
        (&mut p.labels, &f.labels),
        (&mut p.checkpoint, &f.checkpoint),
        (&mut p.out, &f.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(k) = f.key {
        cfg.key = Some(k);
    }
    if let Some(n) = f.n_samples {
        cfg.eval.n_samples = n;
    }
    if let Some(t) = f.threshold {
        cfg.eval.threshold = t;
        cfg.eval.activity_threshold = t;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Outcome<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

/// Creates the output directory and records the resolved config in it.
fn out_dir(cfg: &RunConfig) -> Outcome<&Path> {
    let dir = required(&cfg.paths.out, "out")?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    Ok(dir)
}

fn load_model(cfg: &RunConfig) -> Outcome<InnModel> {
    Ok(Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?.model)
}

fn load_frames(cfg: &RunConfig, model: &InnModel) -> Outcome<FramesFile> {
    let path = required(&cfg.paths.frames, "frames")?;
    let file = read_frames(path)?;
    let spec = model.spec();
    if file.header.d_x != spec.d_x {
        return Err(Error::Dimension(format!(
            "{}: d_x {} but the model expects {}",
            path.display(),
            file.header.d_x,
            spec.d_x
        ))
        .into());
    }
    Ok(file)
}

fn instruments_of(y: &Mat) -> Outcome<Vec<usize>> {
    (0..y.rows())
        .map(|r| Ok(FrameLabel::from_row(y.row(r))?.instrument))
        .collect()
}

/// Features as a `bins x frames` image, low bins at the bottom.
fn spectrogram_image(x: &Mat) -> Mat {
    Mat::from_fn(x.cols(), x.rows(), |r, c| x.get(c, x.cols() - 1 - r)).expect("finite features")
}

fn gen_data(cfg: &RunConfig) -> Outcome<i32> {
    let dir = out_dir(cfg)?;
    for path in generate_corpus(&cfg.corpus, cfg.seed(), dir)? {
        println!("{}", path.display());
    }
    Ok(EXIT_OK)
}

fn train_cmd(cfg: &RunConfig) -> Outcome<i32> {
    let frames = required(&cfg.paths.frames, "frames")?;
    let valid = match &cfg.paths.valid {
        Some(v) => v.clone(),
        None => frames.with_file_name("valid.frm"),
    };
    let dir = out_dir(cfg)?;
    let report = train(&cfg.train, cfg.dims, frames, &valid, dir)?;
    for r in &report.history {
        println!("epoch {:>3}  val L_y {:.6}  val F1 {:.4}", r.epoch, r.val_l_y, r.val_f1);
    }
    println!(
        "best epoch {} -> {}",
        report.best_epoch,
        report.best_checkpoint.display()
    );
    println!("final -> {}", report.final_checkpoint.display());
    Ok(EXIT_OK)
}

fn transcribe(cfg: &RunConfig) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let file = load_frames(cfg, &model)?;
    let dir = out_dir(cfg)?;
    let mut y = predict_labels(&model, &file.x)?;
    if cfg.eval.threshold > 0.0 {
        y = denoise(&y, cfg.eval.threshold)?;
    }
    let path = dir.join("labels.csv");
    write_label_csv(&path, &y)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn invert(cfg: &RunConfig) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let file = load_frames(cfg, &model)?;
    let labels = required(&cfg.paths.labels, "labels")?;
    let dir = out_dir(cfg)?;
    let out = encode(&model, &file.x)?;
    let y = read_label_csv(labels, &instruments_of(&out.y)?)?;
    let x = resynthesize(&model, &out.z, &y)?;
    let inverted = FramesFile::from_pieces(
        vec![(instruments_of(&y)?.first().copied().unwrap_or(0), x, y)],
        file.header.fps,
        cfg.seed(),
    )?;
    let path = dir.join("inverted.frm");
    write_frames(&path, &inverted)?;
    write_pgm(&dir.join("inverted.pgm"), &spectrogram_image(&inverted.x))?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn sample(cfg: &RunConfig, n_flag: Option<usize>) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let file = load_frames(cfg, &model)?;
    let dir = out_dir(cfg)?;
    let y = match &cfg.paths.labels {
        Some(l) => read_label_csv(l, &instruments_of(&file.y)?)?,
        None => file.y.clone(),
    };
    let mut rng = RngState::new(cfg.seed());
    let n = n_flag.unwrap_or(1);
    let mut pieces = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_frames(&model, &y, &mut rng)?;
        pieces.push((instruments_of(&y)?.first().copied().unwrap_or(0), x, y.clone()));
    }
    let first = spectrogram_image(&pieces[0].1);
    let samples = FramesFile::from_pieces(pieces, file.header.fps, cfg.seed())?;
    let path = dir.join("samples.frm");
    write_frames(&path, &samples)?;
    write_pgm(&dir.join("samples.pgm"), &first)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn probe(cfg: &RunConfig) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let reference = match &cfg.paths.frames {
        Some(_) => load_frames(cfg, &model)?,
        None => {
            return Err(Failure::Usage(format!(
                "--frames is required (e.g. the generated {PROBE_FILE})"
            )))
        }
    };
    let dir = out_dir(cfg)?;
    let mut rng = RngState::new(cfg.seed());
    let n = cfg.eval.n_samples;
    if let Some(key) = cfg.key {
        let report = concept_probe(&model, key, &reference, n, &mut rng)?;
        write_probe_csv(&dir.join(format!("probe_key{key:02}.csv")), &report)?;
        write_pgm(
            &dir.join(format!("probe_key{key:02}.pgm")),
            &probe_heatmap(&report, cfg.eval.probe_bins)?,
        )?;
        println!("key {key}: pooled median distance {:.6}", report.median());
        return Ok(EXIT_OK);
    }
    let mut summary = String::from("key");
    for p in PROBE_QUANTILES {
        summary.push_str(&format!(",q{:02}", (p * 100.0).round() as usize));
    }
    summary.push('\n');
    for key in 0..invtrans_core::datagen::N_KEYS {
        match concept_probe(&model, key, &reference, n, &mut rng) {
            Ok(r) => {
                let q = r.pooled;
                summary.push_str(&format!("{key},{},{},{},{},{}\n", q[0], q[1], q[2], q[3], q[4]));
            }
            Err(Error::KeyAbsent { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let path = dir.join("probe_summary.csv");
    fs::write(&path, summary)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn eval(cfg: &RunConfig) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let file = load_frames(cfg, &model)?;
    if file.header.d_y != model.spec().d_y {
        return Err(Error::Dimension(format!(
            "frames d_y {} but the model emits {}",
            file.header.d_y,
            model.spec().d_y
        ))
        .into());
    }
    let pred = predict_labels(&model, &file.x)?;
    let report = framewise_prf(&pred, &file.y, &file.piece_ranges(), cfg.eval.activity_threshold)?;
    if cfg.paths.out.is_some() {
        write_prf_csv(&out_dir(cfg)?.join("prf.csv"), &report)?;
    }
    let m = report.mean;
    println!(
        "P {:.4}  R {:.4}  F1 {:.4}  over {} pieces",
        m.precision,
        m.recall,
        m.f1,
        report.per_piece.len()
    );
    Ok(EXIT_OK)
}

fn grad_check_cmd(cfg: &RunConfig, seed_flag: Option<u64>) -> Outcome<i32> {
    let seeds = match seed_flag.or(cfg.seed) {
        Some(s) if seed_flag.is_some() => vec![s],
        _ => vec![1, 2, 3],
    };
    let mut ok = true;
    for seed in seeds {
        let r = grad_check(&GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        })?;
        println!(
            "seed {seed}: {} parameters, max relative error {:.3e} (tolerance {:.0e}) {}",
            r.n_params,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        ok &= r.passed;
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
}

fn roundtrip(cfg: &RunConfig) -> Outcome<i32> {
    let model = load_model(cfg)?;
    let file = load_frames(cfg, &model)?;
    let r = roundtrip_report(&model, &file.x)?;
    println!(
        "max |x - x^| = {:.3e} (tolerance {:.0e}) {}",
        r.max_abs_diff,
        r.tolerance,
        if r.flagged { "FLAGGED" } else { "ok" }
    );
    Ok(if r.flagged { EXIT_NUMERICAL } else { EXIT_OK })
}
