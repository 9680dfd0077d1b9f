//! `glottal` command-line pipeline: synthesize cohorts, analyze recordings
//! into paired flow features, fit model parameters, train and cross-validate
//! the classifier, and render attention traces.
//!
//! Exit codes: 0 success, 1 partial failure or runtime error, 2 invalid
//! input or configuration.

pub mod config;
pub mod features;
pub mod viz;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use glottal_core::adles::write_fit_csv;
use glottal_core::evaluation::cross_validate;
use glottal_core::exec::{self, Exec};
use glottal_core::pipeline::analyze_recording;
use glottal_core::s2ap::{s2ap_forward, train, write_trace_csv, Architecture, Checkpoint, FramePair, Pooling};
use glottal_core::signal_io::{load_entry, load_wav, read_manifest};
use glottal_core::synth::generate_cohort;
use glottal_core::Label;

use config::PipelineConfig;
use features::{read_feature_dir, read_features, write_features, write_index, IndexRow};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files.
    Invalid(String),
    /// Some inputs failed; the rest were processed.
    Partial(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Partial(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Partial(m) => write!(f, "partial failure: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

fn is_input_error(e: &glottal_core::Error) -> bool {
    use glottal_core::Error as E;
    match e {
        E::Unreadable { .. }
        | E::UnsupportedEncoding { .. }
        | E::EmptyAudio { .. }
        | E::Malformed { .. }
        | E::InvalidArgument(_)
        | E::LengthMismatch { .. }
        | E::Shape(_)
        | E::SingleClass
        | E::TooFewSpeakers { .. }
        | E::Csv(_) => true,
        E::Frame { source, .. } | E::Fold { source, .. } => is_input_error(source),
        _ => false,
    }
}

impl From<glottal_core::Error> for CliError {
    fn from(e: glottal_core::Error) -> Self {
        if is_input_error(&e) {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Failed(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "glottal", version, about = "Glottal flow analysis and voice anomaly classification")]
struct Cli {
    /// TOML config file with `section.key` settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set fit.max_iters=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ClassifierFlags {
    /// Feature extractor as layers,kernel,filters.
    #[arg(long)]
    arch: Option<Architecture>,
    /// s2ap or 2ap.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Feed the flows straight to the attention steps.
    #[arg(long)]
    no_extractor: bool,
    /// Sets train.seed and eval.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic cohort (WAVs, manifest.csv, ground_truth.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of speakers.
        #[arg(long)]
        n: Option<usize>,
        /// Positive fraction.
        #[arg(long)]
        pos: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Inverse filter and fit every recording of a manifest; writes one
    /// feature file and one fit CSV per recording plus features.csv.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the fold model to every frame of one WAV file.
    Fit {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every analyzed recording and save a checkpoint.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        classifier: ClassifierFlags,
    },
    /// Speaker-stratified cross-validation; writes a JSON report.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of folds.
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        classifier: ClassifierFlags,
    },
    /// Render one frame's attention trace as SVG and CSV.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        recording: String,
        /// Frame index within the recording.
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let command = Cli::command().after_help(config::key_table());
    let cli = match command.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &cli.config {
        config.merge_file(path)?;
    }
    for setting in &cli.set {
        let (k, v) = setting
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, got {setting:?}")))?;
        config.set(k.trim(), v)?;
    }
    Ok(config)
}

fn apply_classifier_flags(config: &mut PipelineConfig, flags: &ClassifierFlags) {
    if let Some(arch) = flags.arch {
        config.train.architecture = arch;
    }
    if let Some(pooling) = flags.pooling {
        config.train.pooling = pooling;
    }
    if flags.no_extractor {
        config.train.extractor = false;
    }
    if let Some(seed) = flags.seed {
        config.train.seed = seed;
        config.eval_seed = seed;
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Synth { n, pos, seed, .. } => {
            if let Some(n) = n {
                config.synth.n_speakers = *n;
            }
            if let Some(p) = pos {
                config.synth.positive_fraction = *p;
            }
            if let Some(s) = seed {
                config.synth.seed = *s;
            }
        }
        Command::Train { classifier, .. } => apply_classifier_flags(&mut config, classifier),
        Command::Eval { classifier, folds, .. } => {
            apply_classifier_flags(&mut config, classifier);
            if let Some(k) = folds {
                config.eval_folds = *k;
            }
        }
        _ => {}
    }
    config.validate()?;
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Invalid("--jobs must be at least 1".into()));
    }
    let exec = if jobs == 1 { Exec::Sequential } else { Exec::Parallel };
    exec::with_threads(jobs, || dispatch(&cli.command, &config, exec))
}

fn dispatch(command: &Command, config: &PipelineConfig, exec: Exec) -> Result<(), CliError> {
    match command {
        Command::Synth { out, .. } => cmd_synth(config, out, exec),
        Command::Analyze { manifest, out } => cmd_analyze(config, manifest, out, exec),
        Command::Fit { wav, out } => cmd_fit(config, wav, out, exec),
        Command::Train { features, out, .. } => cmd_train(config, features, out, exec),
        Command::Eval { features, out, .. } => cmd_eval(config, features, out, exec),
        Command::Viz {
            checkpoint,
            features,
            recording,
            frame,
            svg,
            csv,
        } => cmd_viz(checkpoint, features, recording, *frame, svg, csv),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Invalid(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_synth(config: &PipelineConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    create_dir(out)?;
    let manifest = generate_cohort(&config.synth, out, exec)?;
    let positives = manifest.iter().filter(|e| e.label == Label::Positive).count();
    log::info!(
        "wrote {} recordings ({positives} positive) to {}",
        manifest.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_analyze(config: &PipelineConfig, manifest: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let entries = read_manifest(manifest)?;
    create_dir(out)?;
    let results = exec::map(exec, &entries, |entry| -> Result<IndexRow, CliError> {
        let recording = load_entry(entry)?;
        let analysis = analyze_recording(&recording, &config.analysis, exec)?;
        let features = PathBuf::from(format!("{}.gfw", recording.id));
        let fits = PathBuf::from(format!("{}.fit.csv", recording.id));
        write_features(&out.join(&features), &analysis.pairs, recording.sample_rate)?;
        let mut buf = Vec::new();
        write_fit_csv(&mut buf, &analysis.fits)?;
        write_file(&out.join(&fits), &buf)?;
        Ok(IndexRow {
            recording_id: recording.id,
            speaker_id: recording.speaker_id,
            label: recording.label,
            features,
            fits,
            frames: analysis.fits.len(),
            skipped: analysis.skipped.len(),
        })
    });
    let mut rows = Vec::new();
    let mut failed = 0;
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok(row) => {
                if rows.iter().any(|r: &IndexRow| r.recording_id == row.recording_id) {
                    return Err(CliError::Invalid(format!("duplicate recording id {}", row.recording_id)));
                }
                rows.push(row);
            }
            Err(e) => {
                log::error!("{}: {e}", entry.recording_path.display());
                failed += 1;
            }
        }
    }
    write_index(out, &rows)?;
    log::info!("analyzed {} of {} recordings", rows.len(), entries.len());
    if failed > 0 {
        return Err(CliError::Partial(format!("{failed} of {} recordings failed", entries.len())));
    }
    Ok(())
}

pub fn cmd_fit(config: &PipelineConfig, wav: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let recording = load_wav(wav)?;
    let analysis = analyze_recording(&recording, &config.analysis, exec)?;
    let mut buf = Vec::new();
    write_fit_csv(&mut buf, &analysis.fits)?;
    write_file(out, &buf)
}

fn labeled_frames(dir: &Path) -> Result<Vec<glottal_core::evaluation::RecordingFrames>, CliError> {
    let data = read_feature_dir(dir)?;
    if let Some(r) = data.iter().find(|r| r.label == Label::Unknown) {
        return Err(CliError::Invalid(format!("recording {} has no label", r.recording_id)));
    }
    Ok(data)
}

pub fn cmd_train(config: &PipelineConfig, features: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let data = labeled_frames(features)?;
    let frames: Vec<FramePair> = data.into_iter().flat_map(|r| r.frames).collect();
    let model = train(&frames, &config.train, exec)?;
    Checkpoint::new(config.train.clone(), model).save(out)?;
    log::info!("trained on {} frames; checkpoint {}", frames.len(), out.display());
    Ok(())
}

pub fn cmd_eval(config: &PipelineConfig, features: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let data = labeled_frames(features)?;
    let report = cross_validate(&data, &config.train, config.eval_folds, config.eval_seed, exec)?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(e.to_string()))?;
    json.push('\n');
    write_file(out, json.as_bytes())?;
    println!(
        "frame AUC {:.4} ± {:.4}, recording AUC {:.4} ± {:.4}",
        report.frame.mean_auc, report.frame.std_auc, report.recording.mean_auc, report.recording.std_auc
    );
    Ok(())
}

pub fn cmd_viz(checkpoint: &Path, features: &Path, recording: &str, frame: usize, svg: &Path, csv: &Path) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(checkpoint)?;
    let index = features::read_index(features)?;
    let row = index
        .iter()
        .find(|r| r.recording_id == recording)
        .ok_or_else(|| CliError::Invalid(format!("recording {recording} is not in {}", features.display())))?;
    let file = read_features(&features.join(&row.features))?;
    let pair = file
        .recording
        .frames
        .iter()
        .find(|p| p.frame_index == frame)
        .ok_or_else(|| CliError::Invalid(format!("recording {recording} has no analyzed frame {frame}")))?;
    let (_, trace) = s2ap_forward(pair, &checkpoint.model)?;
    write_file(svg, viz::render_svg(&trace, &format!("{recording} frame {frame}")).as_bytes())?;
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &trace)?;
    write_file(csv, &buf)
}
