use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use stagekit::ensemble::{ensemble, EnsembleConfig, EnsembleError, MergeMode, Strategy};
use stagekit::io::{
    load_ground_truth, load_predictions, prediction_bytes, read_json, to_json_bytes, write_all_atomic,
    write_atomic, ClassificationFile, IoError, LabelFile, LoadError,
};
use stagekit::metrics::{
    classification_metrics, evaluate_grounding, EvalReport, MetricsError, DEFAULT_MAX_DETS,
    POSITIVE_CLASS,
};
use stagekit::pipeline::{parse_config, run_pipeline, ConfigError, PipelineError};
use stagekit::swa::{average_archives, ArchiveError, TensorArchive};
use stagekit::tta::ClassificationOutput;

const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Post-processing for two-stage bleeding detection: evaluation, ensembling,
/// weight averaging and the gated pipeline.
#[derive(Parser)]
#[command(name = "stagekit", version)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against ground truth.
    Evaluate {
        /// Ground-truth file.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction file.
        #[arg(long)]
        pred: PathBuf,
        /// Also score masks (segmentation rows).
        #[arg(long)]
        mask: bool,
        /// Image-level class labels; needs --cls-pred.
        #[arg(long, requires = "cls_pred")]
        cls_labels: Option<PathBuf>,
        /// Classification outputs to score against --cls-labels.
        #[arg(long, requires = "cls_labels")]
        cls_pred: Option<PathBuf>,
        /// Detections kept per image and category.
        #[arg(long, default_value_t = DEFAULT_MAX_DETS)]
        max_dets: usize,
        /// Write the JSON report here and the text report next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse prediction files from several models.
    Ensemble {
        /// Output prediction file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Affirmative)]
        strategy: StrategyArg,
        /// IoU at which detections join a cluster.
        #[arg(long, default_value_t = 0.5)]
        cluster_iou: f64,
        #[arg(long, value_enum, default_value_t = MergeArg::Nms)]
        merge: MergeArg,
        /// IoU threshold for the nms merge mode.
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        /// One prediction file per model.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Average weight archives elementwise.
    SwaAverage {
        /// Output archive; a .manifest.json sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Input archives.
        #[arg(required = true)]
        archives: Vec<PathBuf>,
    },
    /// Run classification gating, grounding and evaluation from a config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Load and check everything, write nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Check a prediction (or, with --gt, ground-truth) file.
    Validate {
        file: PathBuf,
        /// Treat FILE as ground truth.
        #[arg(long)]
        gt: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Affirmative,
    Consensus,
    Unanimous,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MergeArg {
    Nms,
    WeightedAverage,
    MaxScore,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }

    fn at(self, path: &Path) -> Self {
        Failure {
            code: self.code,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::new(EXIT_IO, e)
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(e) => e.into(),
            e @ LoadError::Invalid { .. } => Failure::new(EXIT_INVALID, e),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::new(EXIT_INVALID, e)
    }
}

impl From<EnsembleError> for Failure {
    fn from(e: EnsembleError) -> Self {
        Failure::new(EXIT_INVALID, e)
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Io(e) => e.into(),
            e @ (ArchiveError::Header(_) | ArchiveError::Length { .. }) => Failure::new(EXIT_IO, e),
            e => Failure::new(EXIT_INVALID, e),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => e.into(),
            e => Failure::new(EXIT_INVALID, e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => e.into(),
            PipelineError::Io(e) => e.into(),
            PipelineError::Load(e) => e.into(),
            e => Failure::new(EXIT_INVALID, e),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| IoError::io(path, e).into())
}

fn evaluate(
    gt: &Path,
    pred: &Path,
    mask: bool,
    cls: Option<(&Path, &Path)>,
    max_dets: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let gt = load_ground_truth(gt)?;
    let preds = load_predictions(pred)?;
    let mut report = EvalReport::new(max_dets);
    evaluate_grounding(&preds, &gt, mask, max_dets, &mut report)?;
    if let Some((cls_pred, cls_labels)) = cls {
        let file: ClassificationFile = read_json(cls_pred)?;
        let outputs = file
            .outputs
            .into_iter()
            .map(|r| ClassificationOutput::new(r.image_id, r.probs))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::new(EXIT_INVALID, e).at(cls_pred))?;
        let labels: LabelFile = read_json(cls_labels)?;
        let labels = labels
            .to_map()
            .map_err(|r| Failure::new(EXIT_INVALID, r).at(cls_labels))?;
        report.classification = Some(classification_metrics(&outputs, &labels, POSITIVE_CLASS)?);
    }
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = out {
        write_all_atomic(&[
            (out.to_path_buf(), to_json_bytes(&report)),
            (out.with_extension("txt"), text.into_bytes()),
        ])?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn run_ensemble(files: &[PathBuf], cfg: EnsembleConfig, out: &Path) -> Result<(), Failure> {
    cfg.validate()?;
    let sets = files
        .iter()
        .map(|f| load_predictions(f))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = ensemble(&sets, &cfg)?;
    if fused.detections().is_empty() {
        warn!("ensemble produced no detections");
    }
    write_atomic(out, &prediction_bytes(&fused))?;
    println!(
        "{} detections from {} sources written to {}",
        fused.detections().len(),
        sets.len(),
        out.display()
    );
    Ok(())
}

fn swa_average(archives: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut inputs = Vec::with_capacity(archives.len());
    let mut parsed = Vec::with_capacity(archives.len());
    for path in archives {
        let bytes = read_bytes(path)?;
        parsed.push(
            TensorArchive::from_bytes(&bytes)
                .map_err(|e| Failure::from(e).at(path))?,
        );
        inputs.push((path, bytes));
    }
    let averaged = average_archives(&parsed)?;
    // a single input is copied verbatim so its bytes survive unchanged
    let bytes = if inputs.len() == 1 {
        inputs[0].1.clone()
    } else {
        averaged.to_bytes()
    };
    let manifest = json!({
        "tool": format!("stagekit {}", env!("CARGO_PKG_VERSION")),
        "inputs": inputs
            .iter()
            .map(|(p, b)| json!({"path": p.display().to_string(), "sha256": sha256_hex(b)}))
            .collect::<Vec<_>>(),
        "output": {"path": out.display().to_string(), "sha256": sha256_hex(&bytes)},
        "tensors": averaged.len(),
        "accumulation": "f64 sum, divided by the archive count, rounded to f32 once",
    });
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".manifest.json");
    write_all_atomic(&[(out.to_path_buf(), bytes), (PathBuf::from(sidecar), to_json_bytes(&manifest))])?;
    println!("averaged {} archives ({} tensors) into {}", inputs.len(), averaged.len(), out.display());
    Ok(())
}

fn pipeline(config: &Path, out_dir: Option<&Path>, dry_run: bool) -> Result<(), Failure> {
    let cfg = parse_config(config)?;
    let output = run_pipeline(&cfg)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_path());
    let gated = output.decisions.iter().filter(|d| d.bleeding).count();
    println!(
        "{gated} of {} images gated in, {} final detections",
        output.decisions.len(),
        output.predictions.detections().len()
    );
    if dry_run {
        for (name, _) in output.files() {
            println!("would write {}", dir.join(name).display());
        }
        return Ok(());
    }
    output.write_to(&dir)?;
    if let Some(report) = &output.report {
        print!("{}", report.to_text());
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn validate(file: &Path, gt: bool) -> Result<(), Failure> {
    let (images, items, what) = if gt {
        let g = load_ground_truth(file)?;
        (g.images().len(), g.annotations().len(), "annotations")
    } else {
        let p = load_predictions(file)?;
        (p.images().len(), p.detections().len(), "detections")
    };
    println!("{}: ok, {images} images, {items} {what}", file.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new(EXIT_INVALID, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(EXIT_INTERNAL, e))?;
    }
    match cli.command {
        Command::Evaluate {
            gt,
            pred,
            mask,
            cls_labels,
            cls_pred,
            max_dets,
            out,
        } => {
            let cls = cls_pred.as_deref().zip(cls_labels.as_deref());
            evaluate(&gt, &pred, mask, cls, max_dets, out.as_deref())
        }
        Command::Ensemble {
            out,
            strategy,
            cluster_iou,
            merge,
            nms_iou,
            files,
        } => {
            let cfg = EnsembleConfig {
                strategy: match strategy {
                    StrategyArg::Affirmative => Strategy::Affirmative,
                    StrategyArg::Consensus => Strategy::Consensus,
                    StrategyArg::Unanimous => Strategy::Unanimous,
                },
                cluster_iou,
                merge_mode: match merge {
                    MergeArg::Nms => MergeMode::Nms,
                    MergeArg::WeightedAverage => MergeMode::WeightedAverage,
                    MergeArg::MaxScore => MergeMode::MaxScore,
                },
                nms_iou,
            };
            run_ensemble(&files, cfg, &out)
        }
        Command::SwaAverage { out, archives } => swa_average(&archives, &out),
        Command::Pipeline {
            config,
            out_dir,
            dry_run,
        } => pipeline(&config, out_dir.as_deref(), dry_run),
        Command::Validate { file, gt } => validate(&file, gt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STAGEKIT_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
