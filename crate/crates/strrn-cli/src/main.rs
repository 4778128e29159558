//! Command-line pipeline: synthetic corpus generation, detector training,
//! annotation distillation, tracking and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use strrn::dataio::{
    load_corpus, load_sequence, mix_seed, read_pts, save_checkpoint, write_corpus,
    write_distilled_manifest, write_pts, DistilledRecord, LoadedSequence, SequenceManifest,
    SyntheticConfig,
};
use strrn::distill::{
    labeled_subset, run_rounds, Destination, Detector, DetectorTrainConfig, DistillConfig,
    FrameRef, OracleDetector, SeedMode, SimpleRegressorDetector, TrackerTrainConfig,
};
use strrn::eval::{ced_csv, ced_curve, sequence_errors, series_csv, summary_csv};
use strrn::shape::LandmarkShape;
use strrn::spatial::SpatialConfig;
use strrn::tracker::{Direction, HeadKind, PredictionMode, TrackerConfig, TrackerInit, TrackerModel};

#[derive(Parser)]
#[command(
    name = "strrn",
    about = "Relational landmark tracking: synthesize corpora, distill annotations from unlabeled sequences, track and evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with exact ground truth.
    Synth(SynthArgs),
    /// Train the dense regression detector on labeled frames.
    TrainDetector(TrainDetectorArgs),
    /// Run the distillation rounds: gate, retrain, track, report.
    Distill(DistillArgs),
    /// Track sequences with a saved model, writing per-frame PTS files.
    Track(TrackArgs),
    /// Evaluate predictions: per-frame series, CED curve, AUC summary.
    Eval(EvalArgs),
}

/// Optional JSON configuration file; command-line flags win over file values.
/// Unknown keys are rejected.
#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seqs: Option<usize>,
    frames: Option<usize>,
    size: Option<usize>,
    landmarks: Option<usize>,
    seed: Option<u64>,
    noise: Option<f64>,
    blob_sigma: Option<f64>,
    rot_amp: Option<f64>,
    scale_step: Option<f64>,
    trans_step: Option<f64>,
    drift_x: Option<f64>,
    drift_y: Option<f64>,
    lambda: Option<f64>,
    thresh: Option<f64>,
    rounds: Option<usize>,
    holdout: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    jobs: Option<usize>,
    patch: Option<usize>,
    appearance_dim: Option<usize>,
    geometry_dim: Option<usize>,
    hidden: Option<usize>,
    labeled_fraction: Option<f64>,
    det_epochs: Option<usize>,
    det_lr: Option<f64>,
    input_size: Option<usize>,
    det_hidden: Option<usize>,
    ced_max: Option<f64>,
    ced_points: Option<usize>,
    detector: Option<DetectorKind>,
    head: Option<HeadChoice>,
    seed_mode: Option<SeedModeChoice>,
    init: Option<InitChoice>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, String> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let content = fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&content).map_err(|e| format!("bad config {}: {e}", p.display()))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DetectorKind {
    Oracle,
    Regressor,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum HeadChoice {
    Dense,
    Conv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SeedModeChoice {
    Detection,
    Tracked,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum InitChoice {
    /// Ground-truth annotation of the first frame.
    Gt,
    /// First-frame ground truth plus Gaussian noise.
    Oracle,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the corpus.
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences [default: 20].
    #[arg(long)]
    seqs: Option<usize>,
    /// Frames per sequence [default: 30].
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Landmarks per face: 68 or any count >= 8 [default: 10].
    #[arg(long)]
    landmarks: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Additive pixel noise sigma [default: 0.01].
    #[arg(long)]
    noise: Option<f64>,
    /// Landmark blob radius in pixels [default: 1.2].
    #[arg(long)]
    blob_sigma: Option<f64>,
    /// Per-frame rotation walk bound in radians [default: 0.01].
    #[arg(long)]
    rot_amp: Option<f64>,
    /// Per-frame log-scale walk bound [default: 0.002].
    #[arg(long)]
    scale_step: Option<f64>,
    /// Per-frame translation walk bound in pixels [default: 0.25].
    #[arg(long)]
    trans_step: Option<f64>,
    /// Deterministic per-frame x drift in pixels [default: 0].
    #[arg(long)]
    drift_x: Option<f64>,
    /// Deterministic per-frame y drift in pixels [default: 0].
    #[arg(long)]
    drift_y: Option<f64>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDetectorArgs {
    /// Corpus manifest path.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of labeled frames used, seeded subset [default: 1.0].
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Training epochs [default: 60].
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 2e-6].
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for subset selection and shuffling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Downscaled input side fed to the network [default: 16].
    #[arg(long)]
    input_size: Option<usize>,
    /// Hidden layer width [default: 64].
    #[arg(long)]
    hidden: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Corpus manifest path.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Backbone detector [default: oracle].
    #[arg(long, value_enum)]
    detector: Option<DetectorKind>,
    /// Oracle detector noise sigma in pixels [default: 1.0].
    #[arg(long)]
    noise: Option<f64>,
    /// Regressor detector checkpoint to start from.
    #[arg(long)]
    detector_ckpt: Option<PathBuf>,
    /// Tracker checkpoint to start from (fresh identity tracker otherwise).
    #[arg(long)]
    tracker_ckpt: Option<PathBuf>,
    /// Ensemble weight of the detector-agreement terms [default: 0.4].
    #[arg(long)]
    lambda: Option<f64>,
    /// Reliability gate threshold on normalized RMSE [default: 0.02].
    #[arg(long)]
    thresh: Option<f64>,
    /// Distillation rounds [default: 2].
    #[arg(long)]
    rounds: Option<usize>,
    /// Seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing sequences held out for metrics [default: 0].
    #[arg(long)]
    holdout: Option<usize>,
    /// Tracker training epochs per round [default: 6].
    #[arg(long)]
    epochs: Option<usize>,
    /// Tracker learning rate [default: 2e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Sequence-level parallelism of the distillation pass [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
    /// Patch side in pixels, odd [default: 15].
    #[arg(long)]
    patch: Option<usize>,
    /// Appearance embedding width [default: 32].
    #[arg(long)]
    appearance_dim: Option<usize>,
    /// Geometry embedding width [default: 16].
    #[arg(long)]
    geometry_dim: Option<usize>,
    /// Tracking head hidden width [default: 128].
    #[arg(long)]
    hidden: Option<usize>,
    /// Tracking head kind [default: dense].
    #[arg(long, value_enum)]
    head: Option<HeadChoice>,
    /// Forward-track seeding inside the distillation pass [default: detection].
    #[arg(long, value_enum)]
    seed_mode: Option<SeedModeChoice>,
    /// Fraction of labeled frames available to detector retraining [default: 0].
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Detector retraining epochs per round [default: 20].
    #[arg(long)]
    det_epochs: Option<usize>,
    /// Detector learning rate [default: 1e-6].
    #[arg(long)]
    det_lr: Option<f64>,
    /// Regressor input side [default: 16].
    #[arg(long)]
    input_size: Option<usize>,
    /// Regressor hidden width [default: 64].
    #[arg(long)]
    det_hidden: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    /// Corpus manifest path.
    #[arg(long)]
    corpus: PathBuf,
    /// Tracker checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for per-frame PTS predictions.
    #[arg(long)]
    out: PathBuf,
    /// Track only this sequence id.
    #[arg(long)]
    seq: Option<String>,
    /// First-frame initialization [default: gt].
    #[arg(long, value_enum)]
    init: Option<InitChoice>,
    /// Oracle-init noise sigma in pixels [default: 1.0].
    #[arg(long)]
    noise: Option<f64>,
    /// Seed for the oracle init [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Patch side in pixels, odd; must match the checkpoint [default: 15].
    #[arg(long)]
    patch: Option<usize>,
    /// Appearance embedding width; must match the checkpoint [default: 32].
    #[arg(long)]
    appearance_dim: Option<usize>,
    /// Geometry embedding width; must match the checkpoint [default: 16].
    #[arg(long)]
    geometry_dim: Option<usize>,
    /// Head hidden width; must match the checkpoint [default: 128].
    #[arg(long)]
    hidden: Option<usize>,
    /// Head kind; must match the checkpoint [default: dense].
    #[arg(long, value_enum)]
    head: Option<HeadChoice>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus manifest path (ground truth).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding per-sequence prediction PTS files.
    #[arg(long)]
    pred: PathBuf,
    /// Output directory for the CSV reports.
    #[arg(long)]
    out: PathBuf,
    /// Upper CED threshold [default: 0.08].
    #[arg(long)]
    ced_max: Option<f64>,
    /// Number of CED sample points [default: 40].
    #[arg(long)]
    ced_points: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<strrn::Error> for CliError {
    fn from(e: strrn::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::TrainDetector(args) => cmd_train_detector(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config).map_err(config_err)?;
    let size = pick(args.size, file.size, 64);
    let cfg = SyntheticConfig {
        landmarks: pick(args.landmarks, file.landmarks, 10),
        width: size,
        height: size,
        frames: pick(args.frames, file.frames, 30),
        rot_amplitude: pick(args.rot_amp, file.rot_amp, 0.01),
        scale_step: pick(args.scale_step, file.scale_step, 0.002),
        translation_step: pick(args.trans_step, file.trans_step, 0.25),
        translation_drift: (
            pick(args.drift_x, file.drift_x, 0.0),
            pick(args.drift_y, file.drift_y, 0.0),
        ),
        blob_sigma: pick(args.blob_sigma, file.blob_sigma, 1.2),
        pixel_noise: pick(args.noise, file.noise, 0.01),
        seed: pick(args.seed, file.seed, 0),
        ..SyntheticConfig::default()
    };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    let seqs = pick(args.seqs, file.seqs, 20);
    if seqs == 0 {
        return Err(config_err("--seqs must be positive"));
    }
    let manifest = write_corpus(&cfg, seqs, &args.out)?;
    println!("wrote {seqs} sequences under {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared loading helpers
// ---------------------------------------------------------------------------

fn load_validated_corpus(
    path: &Path,
) -> Result<(Vec<SequenceManifest>, Vec<LoadedSequence>), CliError> {
    // Accept either the manifest file or the corpus directory holding it.
    let path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let path = path.as_path();
    if !path.exists() {
        return Err(config_err(format!(
            "corpus manifest {} does not exist",
            path.display()
        )));
    }
    let manifests = load_corpus(path).map_err(|e| config_err(e.to_string()))?;
    if manifests.is_empty() {
        return Err(config_err("corpus is empty"));
    }
    let loaded = manifests
        .iter()
        .map(load_sequence)
        .collect::<strrn::Result<Vec<_>>>()?;
    Ok((manifests, loaded))
}

fn corpus_landmark_count(loaded: &[LoadedSequence]) -> Result<usize, CliError> {
    loaded
        .iter()
        .flat_map(|s| s.annotations.iter().flatten())
        .map(LandmarkShape::landmark_count)
        .next()
        .ok_or_else(|| config_err("corpus carries no annotations to infer the landmark count"))
}

fn tracker_config(
    patch: usize,
    appearance_dim: usize,
    geometry_dim: usize,
    hidden: usize,
    head: HeadChoice,
) -> TrackerConfig {
    TrackerConfig {
        spatial: SpatialConfig {
            patch_size: patch,
            appearance_dim,
            geometry_dim,
            log_eps: 1e-3,
        },
        head: match head {
            HeadChoice::Dense => HeadKind::Dense { hidden },
            HeadChoice::Conv => HeadKind::Conv { channels: 8 },
        },
        mode: PredictionMode::Offset,
    }
}

// ---------------------------------------------------------------------------
// train-detector
// ---------------------------------------------------------------------------

fn cmd_train_detector(args: TrainDetectorArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config).map_err(config_err)?;
    let fraction = pick(args.labeled_fraction, file.labeled_fraction, 1.0);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err("--labeled-fraction must be in [0, 1]"));
    }
    let epochs = pick(args.epochs, file.det_epochs.or(file.epochs), 60);
    let lr = pick(args.lr, file.det_lr.or(file.lr), 2e-6);
    if lr <= 0.0 {
        return Err(config_err("--lr must be positive"));
    }
    let seed = pick(args.seed, file.seed, 0);
    let input_size = pick(args.input_size, file.input_size, 16);
    let hidden = pick(args.hidden, file.det_hidden.or(file.hidden), 64);

    let (_, loaded) = load_validated_corpus(&args.corpus)?;
    let landmarks = corpus_landmark_count(&loaded)?;
    let subset = labeled_subset(&loaded, fraction, seed);
    if subset.is_empty() {
        return Err(config_err("no labeled frames selected for training"));
    }
    let frame_size = (loaded[0].frames[0].width(), loaded[0].frames[0].height());

    let mut detector = SimpleRegressorDetector::new(landmarks, input_size, hidden, frame_size, seed)
        .map_err(|e| config_err(e.to_string()))?;
    let items: Vec<(&strrn::GrayImage, &LandmarkShape)> = subset
        .iter()
        .map(|&(s, t)| (&loaded[s].frames[t], loaded[s].annotations[t].as_ref().unwrap()))
        .collect();
    detector.retrain(&items, &DetectorTrainConfig { lr, epochs, seed })?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::Runtime(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    save_checkpoint(&args.out, detector.params())?;
    println!(
        "trained on {} of {} labeled frames, wrote {}",
        items.len(),
        loaded.iter().map(|s| s.len()).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

fn cmd_distill(args: DistillArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config).map_err(config_err)?;
    let lambda = pick(args.lambda, file.lambda, 0.4);
    if lambda < 0.0 {
        return Err(config_err("--lambda must be non-negative"));
    }
    let thresh = pick(args.thresh, file.thresh, 0.02);
    if thresh <= 0.0 {
        return Err(config_err("--thresh must be positive"));
    }
    let rounds = pick(args.rounds, file.rounds, 2);
    if rounds == 0 {
        return Err(config_err("--rounds must be positive"));
    }
    let seed = pick(args.seed, file.seed, 0);
    let holdout = pick(args.holdout, file.holdout, 0);
    let jobs = pick(args.jobs, file.jobs, 1);
    if jobs == 0 {
        return Err(config_err("--jobs must be positive"));
    }
    let noise = pick(args.noise, file.noise, 1.0);
    if noise < 0.0 {
        return Err(config_err("--noise must be non-negative"));
    }
    let fraction = pick(args.labeled_fraction, file.labeled_fraction, 0.0);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err("--labeled-fraction must be in [0, 1]"));
    }
    let detector_kind = pick(args.detector, file.detector, DetectorKind::Oracle);
    let head = pick(args.head, file.head, HeadChoice::Dense);
    let patch = pick(args.patch, file.patch, 15);
    let appearance_dim = pick(args.appearance_dim, file.appearance_dim, 32);
    let geometry_dim = pick(args.geometry_dim, file.geometry_dim, 16);
    let hidden = pick(args.hidden, file.hidden, 128);
    let epochs = pick(args.epochs, file.epochs, 6);
    let lr = pick(args.lr, file.lr, 2e-4);
    if lr <= 0.0 {
        return Err(config_err("--lr must be positive"));
    }
    let input_size = pick(args.input_size, file.input_size, 16);
    let det_hidden = pick(args.det_hidden, file.det_hidden, 64);
    let det_epochs = pick(args.det_epochs, file.det_epochs, 20);
    let det_lr = pick(args.det_lr, file.det_lr, 1e-6);
    let seed_mode = match pick(args.seed_mode, file.seed_mode, SeedModeChoice::Detection) {
        SeedModeChoice::Detection => SeedMode::Detection,
        SeedModeChoice::Tracked => SeedMode::Tracked,
    };

    let (manifests, loaded) = load_validated_corpus(&args.corpus)?;
    if holdout >= loaded.len() {
        return Err(config_err(format!(
            "--holdout {holdout} swallows the whole corpus of {}",
            loaded.len()
        )));
    }
    let landmarks = corpus_landmark_count(&loaded)?;
    let partition =
        strrn::dataio::partition_for(landmarks).map_err(|e| config_err(e.to_string()))?;

    let t_config = tracker_config(patch, appearance_dim, geometry_dim, hidden, head);
    t_config
        .spatial
        .validate()
        .map_err(|e| config_err(e.to_string()))?;
    let mut tracker = match &args.tracker_ckpt {
        Some(path) => {
            let params = strrn::dataio::load_checkpoint(path)?;
            TrackerModel::from_params(t_config, partition.clone(), &params)?
        }
        None => TrackerModel::new(
            t_config,
            partition.clone(),
            mix_seed(seed, 0x7AC, 0),
            TrackerInit::Identity,
        )?,
    };

    enum CliDetector {
        Oracle(OracleDetector),
        Regressor(SimpleRegressorDetector),
    }
    let mut detector = match detector_kind {
        DetectorKind::Oracle => CliDetector::Oracle(
            OracleDetector::from_corpus(&loaded, noise, mix_seed(seed, 0xDE7, 0))
                .map_err(|e| config_err(e.to_string()))?,
        ),
        DetectorKind::Regressor => {
            let frame_size = (loaded[0].frames[0].width(), loaded[0].frames[0].height());
            CliDetector::Regressor(match &args.detector_ckpt {
                Some(path) => {
                    let params = strrn::dataio::load_checkpoint(path)?;
                    SimpleRegressorDetector::from_params(landmarks, input_size, det_hidden, &params)?
                }
                None => SimpleRegressorDetector::new(
                    landmarks,
                    input_size,
                    det_hidden,
                    frame_size,
                    mix_seed(seed, 0xD, 1),
                )
                .map_err(|e| config_err(e.to_string()))?,
            })
        }
    };

    let labeled = labeled_subset(&loaded[..loaded.len() - holdout], fraction, seed);

    let cfg = DistillConfig {
        lambda,
        threshold: thresh,
        rounds,
        seed,
        holdout,
        seed_mode,
        tracker: TrackerTrainConfig {
            lr,
            epochs,
            seed,
            ..TrackerTrainConfig::default()
        },
        detector: DetectorTrainConfig {
            lr: det_lr,
            epochs: det_epochs,
            seed,
        },
        jobs,
    };

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let outcome = match &mut detector {
        CliDetector::Oracle(d) => run_rounds(&loaded, &labeled, d, &mut tracker, &cfg)?,
        CliDetector::Regressor(d) => run_rounds(&loaded, &labeled, d, &mut tracker, &cfg)?,
    };

    // Distilled annotations and manifests, one JSONL per round.
    let ann_dir = args.out.join("annotations");
    fs::create_dir_all(&ann_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", ann_dir.display())))?;
    let corpus_base = args.corpus.parent().unwrap_or_else(|| Path::new("."));
    for (sets, round) in outcome.history.iter().zip(1..) {
        let mut records = Vec::with_capacity(sets.entries.len());
        for e in &sets.entries {
            let frame_abs = &manifests[e.frame.sequence].frames[e.frame.frame];
            let frame_rel = frame_abs
                .strip_prefix(corpus_base)
                .unwrap_or(frame_abs)
                .to_string_lossy()
                .into_owned();
            let pts_name = format!(
                "annotations/round{round}_{}_{:03}.pts",
                manifests[e.frame.sequence].id, e.frame.frame
            );
            write_pts(args.out.join(&pts_name), &e.annotation)?;
            records.push(DistilledRecord {
                frame: frame_rel,
                pts: pts_name,
                dest: match e.destination {
                    Destination::DetectorPool => "det".into(),
                    Destination::TrackerPool => "tck".into(),
                },
                l_det: e.l_det,
                l_tck: e.l_tck,
                round,
            });
        }
        write_distilled_manifest(
            args.out.join(format!("distilled_round{round}.jsonl")),
            &records,
        )?;
    }

    // Round metrics CSV.
    let mut csv = String::from(
        "round,eligible,accepted_det,accepted_tck,train_initial_loss,train_final_loss,holdout_detector_nrmse,holdout_tracker_nrmse\n",
    );
    for m in &outcome.metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.round,
            m.eligible,
            m.accepted_detector_pool,
            m.accepted_tracker_pool,
            m.train_initial_loss,
            m.train_final_loss,
            m.holdout_detector_nrmse
                .map_or(String::new(), |v| v.to_string()),
            m.holdout_tracker_nrmse
                .map_or(String::new(), |v| v.to_string()),
        ));
    }
    fs::write(args.out.join("rounds.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("cannot write rounds.csv: {e}")))?;

    save_checkpoint(args.out.join("tracker.ckpt.json"), tracker.params())?;
    if let CliDetector::Regressor(d) = &detector {
        save_checkpoint(args.out.join("detector.ckpt.json"), d.params())?;
    }

    for m in &outcome.metrics {
        println!(
            "round {}: accepted {}+{} of {} eligible, train loss {:.2} -> {:.2}{}",
            m.round,
            m.accepted_detector_pool,
            m.accepted_tracker_pool,
            m.eligible,
            m.train_initial_loss,
            m.train_final_loss,
            match (m.holdout_detector_nrmse, m.holdout_tracker_nrmse) {
                (Some(d), Some(t)) => format!(", holdout nrmse detector {d:.4} tracker {t:.4}"),
                _ => String::new(),
            }
        );
    }
    println!("outputs under {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

fn cmd_track(args: TrackArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config).map_err(config_err)?;
    let init_choice = pick(args.init, file.init, InitChoice::Gt);
    let noise = pick(args.noise, file.noise, 1.0);
    let seed = pick(args.seed, file.seed, 0);
    let patch = pick(args.patch, file.patch, 15);
    let appearance_dim = pick(args.appearance_dim, file.appearance_dim, 32);
    let geometry_dim = pick(args.geometry_dim, file.geometry_dim, 16);
    let hidden = pick(args.hidden, file.hidden, 128);
    let head = pick(args.head, file.head, HeadChoice::Dense);
    if !args.ckpt.exists() {
        return Err(config_err(format!(
            "checkpoint {} does not exist",
            args.ckpt.display()
        )));
    }

    let (manifests, loaded) = load_validated_corpus(&args.corpus)?;
    let landmarks = corpus_landmark_count(&loaded)?;
    let partition =
        strrn::dataio::partition_for(landmarks).map_err(|e| config_err(e.to_string()))?;
    let params = strrn::dataio::load_checkpoint(&args.ckpt)?;
    let tracker = TrackerModel::from_params(
        tracker_config(patch, appearance_dim, geometry_dim, hidden, head),
        partition,
        &params,
    )?;

    let selected: Vec<usize> = match &args.seq {
        None => (0..loaded.len()).collect(),
        Some(id) => {
            let idx = manifests
                .iter()
                .position(|m| &m.id == id)
                .ok_or_else(|| config_err(format!("sequence {id:?} not in the corpus")))?;
            vec![idx]
        }
    };

    let oracle = match init_choice {
        InitChoice::Oracle => Some(
            OracleDetector::from_corpus(&loaded, noise, mix_seed(seed, 0xDE7, 0))
                .map_err(|e| config_err(e.to_string()))?,
        ),
        InitChoice::Gt => None,
    };

    for &s in &selected {
        let seq = &loaded[s];
        let init = match init_choice {
            InitChoice::Gt => seq.annotations[0].clone().ok_or_else(|| {
                config_err(format!(
                    "sequence {:?} frame 0 lacks ground truth for --init gt",
                    seq.id
                ))
            })?,
            InitChoice::Oracle => oracle.as_ref().unwrap().detect(
                &seq.frames[0],
                FrameRef {
                    sequence: s,
                    frame: 0,
                },
            )?,
        };
        let steps = tracker.track_sequence(&seq.frames, &init, Direction::Forward)?;
        let seq_dir = args.out.join(&manifests[s].id);
        fs::create_dir_all(&seq_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", seq_dir.display())))?;
        for step in &steps {
            write_pts(
                seq_dir.join(format!("frame{:03}.pts", step.frame_index)),
                &step.predicted,
            )?;
        }
    }
    println!(
        "tracked {} sequence(s) into {}",
        selected.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config).map_err(config_err)?;
    let ced_max = pick(args.ced_max, file.ced_max, 0.08);
    if ced_max <= 0.0 {
        return Err(config_err("--ced-max must be positive"));
    }
    let ced_points = pick(args.ced_points, file.ced_points, 40);
    if ced_points < 2 {
        return Err(config_err("--ced-points must be at least 2"));
    }
    if !args.pred.exists() {
        return Err(config_err(format!(
            "prediction directory {} does not exist",
            args.pred.display()
        )));
    }

    let (manifests, loaded) = load_validated_corpus(&args.corpus)?;
    let landmarks = corpus_landmark_count(&loaded)?;
    let partition =
        strrn::dataio::partition_for(landmarks).map_err(|e| config_err(e.to_string()))?;

    // Validate the prediction layout before any work starts.
    let mut jobs = Vec::new();
    for (s, seq) in loaded.iter().enumerate() {
        let seq_dir = args.pred.join(&manifests[s].id);
        if !seq_dir.exists() {
            continue;
        }
        let mut preds = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let p = seq_dir.join(format!("frame{t:03}.pts"));
            if !p.exists() {
                return Err(config_err(format!(
                    "prediction {} is missing ({} has {} frames)",
                    p.display(),
                    manifests[s].id,
                    seq.len()
                )));
            }
            preds.push(p);
        }
        // A stray extra frame means the counts do not match either.
        let extra = seq_dir.join(format!("frame{:03}.pts", seq.len()));
        if extra.exists() {
            return Err(config_err(format!(
                "prediction {} exceeds the corpus frame count {}",
                extra.display(),
                seq.len()
            )));
        }
        jobs.push((s, preds));
    }
    if jobs.is_empty() {
        return Err(config_err("no predictions found for any corpus sequence"));
    }

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;

    let mut pooled: Vec<f64> = Vec::new();
    for (s, pred_paths) in &jobs {
        let seq = &loaded[*s];
        let preds = pred_paths
            .iter()
            .map(read_pts)
            .collect::<strrn::Result<Vec<_>>>()?;
        let gts = seq
            .annotations
            .iter()
            .enumerate()
            .map(|(t, a)| {
                a.clone().ok_or_else(|| {
                    strrn::Error::Input(format!(
                        "sequence {:?} frame {t} lacks ground truth",
                        seq.id
                    ))
                })
            })
            .collect::<strrn::Result<Vec<_>>>()?;
        let series = sequence_errors(&preds, &gts, &partition, manifests[*s].id.clone())?;
        fs::write(
            args.out.join(format!("series_{}.csv", manifests[*s].id)),
            series_csv(&series),
        )
        .map_err(|e| CliError::Runtime(format!("cannot write series csv: {e}")))?;
        pooled.extend_from_slice(&series.values);
    }

    let thresholds: Vec<f64> = (0..=ced_points)
        .map(|i| ced_max * i as f64 / ced_points as f64)
        .collect();
    let curve = ced_curve(&pooled, &thresholds)?;
    fs::write(args.out.join("ced.csv"), ced_csv(&curve))
        .map_err(|e| CliError::Runtime(format!("cannot write ced.csv: {e}")))?;
    let summary = summary_csv(&pooled)?;
    fs::write(args.out.join("summary.csv"), &summary)
        .map_err(|e| CliError::Runtime(format!("cannot write summary.csv: {e}")))?;
    print!("{summary}");
    Ok(())
}
