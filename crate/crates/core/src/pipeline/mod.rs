//! Two-stage orchestration: classify, gate, then ground only the gated-in
//! images.
//!
//! 1. Classification views are aggregated per image ([`aggregate_classification`]).
//! 2. Each image is gated in or out ([`gate`]).
//! 3. For every grounding source its views are pooled back into the original
//!    frames ([`pool_views`]); detections on gated-out images are dropped.
//! 4. Sources are fused with [`ensemble`].
//! 5. Optionally everything is evaluated against ground truth over all images,
//!    so gated-out images count their annotations as misses.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    parse_config, parse_config_bytes, ConfigError, EvaluationConfig, GateRule, GroundingSource,
    PipelineConfig, ViewInput,
};

use crate::ensemble::{ensemble, EnsembleError};
use crate::io::{
    load_ground_truth, load_predictions, prediction_bytes, read_json, to_json_bytes, write_all_atomic,
    ClassificationFile, IoError, LabelFile, LoadError,
};
use crate::metrics::{classification_metrics, evaluate_grounding, EvalReport, MetricsError};
use crate::model::{DetectionSet, ImageId, ImageMeta};
use crate::tta::{aggregate_classification, pool_views, ClassificationOutput, TtaError};
use crate::validate::ValidationReport;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const GATES_FILE: &str = "gates.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{}: {source}", path.display())]
    Classification {
        path: PathBuf,
        #[source]
        source: TtaError,
    },
    #[error("{}: {message}", path.display())]
    Coverage { path: PathBuf, message: String },
    #[error("{}: {report}", path.display())]
    Labels { path: PathBuf, report: ValidationReport },
    #[error("grounding source {source_id:?}: {error}")]
    Pooling { source_id: String, error: TtaError },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("evaluation: {0}")]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub image_id: ImageId,
    pub bleeding: bool,
    pub aggregated_probs: Vec<f64>,
}

/// Decide per image whether the grounding stage runs.
pub fn gate(outputs: &[ClassificationOutput], rule: GateRule, positive_class: usize) -> Vec<GateDecision> {
    outputs
        .iter()
        .map(|o| {
            let p = o.probs.get(positive_class).copied().unwrap_or(0.0);
            let bleeding = match rule {
                GateRule::Argmax => o
                    .probs
                    .iter()
                    .enumerate()
                    .all(|(i, &q)| i == positive_class || p > q),
                GateRule::Threshold { threshold } => p >= threshold,
            };
            GateDecision {
                image_id: o.image_id.clone(),
                bleeding,
                aggregated_probs: o.probs.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct GatesDoc<'a> {
    rule: GateRule,
    positive_class: usize,
    gated_in: usize,
    total: usize,
    decisions: &'a [GateDecision],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of a run. Contains no timestamps, so identical runs produce
/// identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
    pub rules: Vec<String>,
    pub gate_rule: GateRule,
    pub tta_aggregation: crate::tta::Aggregation,
    pub ensemble: crate::ensemble::EnsembleConfig,
    pub images: usize,
    pub gated_in: usize,
    pub final_detections: usize,
    pub outputs: Vec<String>,
}

/// Tie-break and convention rules in effect, recorded in every manifest.
pub fn rules_in_effect() -> Vec<String> {
    [
        "ranking: score descending, then box (x1, y1, x2, y2) ascending",
        "gate argmax: a tie between the positive class and another class gates the image out",
        "tta mean: probability vectors are averaged elementwise and renormalized",
        "tta majority_vote: argmax ties and vote ties go to the lower class index",
        "tta pooling: scores pass through unchanged; boxes are clipped to the original frame",
        "ensemble clustering: greedy by rank, join the first cluster whose seed has IoU >= cluster_iou",
        "ensemble weighted_average: mask is the pixelwise majority, ties go to foreground",
        "evaluation: gated-out images have no detections, their annotations count as misses",
        "evaluation: greedy matching by rank, highest IoU >= threshold, earlier annotation on ties",
        "evaluation: 101 recall points, thresholds 0.50:0.05:0.95",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub predictions: DetectionSet,
    pub decisions: Vec<GateDecision>,
    pub report: Option<EvalReport>,
    pub manifest: Manifest,
    files: Vec<(String, Vec<u8>)>,
}

impl PipelineOutput {
    /// Output file names and contents.
    pub fn files(&self) -> &[(String, Vec<u8>)] {
        &self.files
    }

    /// Write every output into `dir` all-or-nothing.
    pub fn write_to(&self, dir: &Path) -> Result<(), IoError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        let files: Vec<(PathBuf, Vec<u8>)> = self.files.iter().map(|(n, b)| (dir.join(n), b.clone())).collect();
        write_all_atomic(&files)
    }
}

fn read_frames(path: &Path) -> Result<Vec<ImageMeta>, PipelineError> {
    #[derive(Deserialize)]
    struct Frames {
        images: Vec<crate::io::ImageRecord>,
    }
    let doc: Frames = read_json(path)?;
    Ok(doc.images.iter().map(ImageMeta::from).collect())
}

fn load_classification(
    path: &Path,
    frames: &BTreeSet<&ImageId>,
) -> Result<BTreeMap<ImageId, ClassificationOutput>, PipelineError> {
    let doc: ClassificationFile = read_json(path)?;
    let mut out = BTreeMap::new();
    for r in doc.outputs {
        let o = ClassificationOutput::new(r.image_id, r.probs).map_err(|source| PipelineError::Classification {
            path: path.to_path_buf(),
            source,
        })?;
        if !frames.contains(&o.image_id) {
            return Err(PipelineError::Coverage {
                path: path.to_path_buf(),
                message: format!("image {} is not among the frames", o.image_id),
            });
        }
        let id = o.image_id.clone();
        if out.insert(id.clone(), o).is_some() {
            return Err(PipelineError::Coverage {
                path: path.to_path_buf(),
                message: format!("image {id} appears twice"),
            });
        }
    }
    if let Some(missing) = frames.iter().find(|id| !out.contains_key(**id)) {
        return Err(PipelineError::Coverage {
            path: path.to_path_buf(),
            message: format!("no classification output for image {missing}"),
        });
    }
    Ok(out)
}

fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn display_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Run the whole pipeline in memory. Nothing is written; see
/// [`PipelineOutput::write_to`].
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let frames = read_frames(&cfg.resolve(&cfg.frames))?;
    let frame_ids: BTreeSet<&ImageId> = frames.iter().map(|f| &f.id).collect();

    // stage 1: classification TTA and gating
    let mut per_image: BTreeMap<ImageId, Vec<ClassificationOutput>> = BTreeMap::new();
    for input in &cfg.classification_inputs {
        for (id, o) in load_classification(&cfg.resolve(&input.file), &frame_ids)? {
            per_image.entry(id).or_default().push(o);
        }
    }
    let first_cls = cfg.resolve(&cfg.classification_inputs[0].file);
    let aggregated = per_image
        .values()
        .map(|outs| aggregate_classification(outs, cfg.tta_aggregation))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| PipelineError::Classification {
            path: first_cls.clone(),
            source,
        })?;
    let decisions = gate(&aggregated, cfg.gate_rule, cfg.positive_class);
    let gated_in: BTreeSet<&ImageId> = decisions.iter().filter(|d| d.bleeding).map(|d| &d.image_id).collect();

    // stage 2: grounding on gated-in images
    let mut sources = Vec::with_capacity(cfg.grounding_inputs.len());
    for src in &cfg.grounding_inputs {
        let mut views = Vec::with_capacity(src.views.len());
        for v in &src.views {
            views.push((v.view, load_predictions(&cfg.resolve(&v.file))?));
        }
        let pooled = pool_views(&views, &frames).map_err(|error| PipelineError::Pooling {
            source_id: src.source.clone(),
            error,
        })?;
        let (images, dets) = pooled.into_parts();
        let kept = dets.into_iter().filter(|d| gated_in.contains(&d.image_id)).collect();
        sources.push(DetectionSet::from_checked(images, kept));
    }
    let predictions = ensemble(&sources, &cfg.ensemble)?;

    let report = match &cfg.evaluation {
        None => None,
        Some(e) => {
            let gt = load_ground_truth(&cfg.resolve(&e.gt))?;
            let mut report = EvalReport::new(e.max_dets);
            report.notes.push(format!(
                "classification views aggregated by {} over probability vectors",
                match cfg.tta_aggregation {
                    crate::tta::Aggregation::Mean => "mean",
                    crate::tta::Aggregation::MajorityVote => "majority_vote",
                }
            ));
            report
                .notes
                .push(format!("{} of {} images gated in", gated_in.len(), decisions.len()));
            evaluate_grounding(&predictions, &gt, e.mask, e.max_dets, &mut report)?;
            if let Some(labels_path) = &e.cls_labels {
                let path = cfg.resolve(labels_path);
                let labels: LabelFile = read_json(&path)?;
                let labels = labels.to_map().map_err(|report| PipelineError::Labels {
                    path: path.clone(),
                    report,
                })?;
                report.classification = Some(classification_metrics(&aggregated, &labels, cfg.positive_class)?);
            }
            Some(report)
        }
    };

    let mut inputs = Vec::new();
    for p in cfg.input_files() {
        inputs.push(InputDigest {
            path: display_path(&p),
            sha256: sha256_file(&cfg.resolve(&p))?,
        });
    }
    let mut outputs = vec![PREDICTIONS_FILE.to_string(), GATES_FILE.to_string()];
    if report.is_some() {
        outputs.push(REPORT_JSON_FILE.to_string());
        outputs.push(REPORT_TEXT_FILE.to_string());
    }
    outputs.push(MANIFEST_FILE.to_string());
    let manifest = Manifest {
        tool: format!("stagekit {}", env!("CARGO_PKG_VERSION")),
        config_sha256: cfg.digest.clone(),
        inputs,
        rules: rules_in_effect(),
        gate_rule: cfg.gate_rule,
        tta_aggregation: cfg.tta_aggregation,
        ensemble: cfg.ensemble,
        images: frames.len(),
        gated_in: gated_in.len(),
        final_detections: predictions.detections().len(),
        outputs,
    };

    let mut files = vec![
        (PREDICTIONS_FILE.to_string(), prediction_bytes(&predictions)),
        (
            GATES_FILE.to_string(),
            to_json_bytes(&GatesDoc {
                rule: cfg.gate_rule,
                positive_class: cfg.positive_class,
                gated_in: gated_in.len(),
                total: decisions.len(),
                decisions: &decisions,
            }),
        ),
    ];
    if let Some(r) = &report {
        files.push((REPORT_JSON_FILE.to_string(), to_json_bytes(r)));
        files.push((REPORT_TEXT_FILE.to_string(), r.to_text().into_bytes()));
    }
    files.push((MANIFEST_FILE.to_string(), to_json_bytes(&manifest)));

    Ok(PipelineOutput {
        predictions,
        decisions,
        report,
        manifest,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(p: &[f64]) -> ClassificationOutput {
        ClassificationOutput::new(1.into(), p.to_vec()).unwrap()
    }

    #[test]
    fn gate_examples() {
        let d = gate(&[out(&[1.0, 0.0])], GateRule::Argmax, 0);
        assert!(d[0].bleeding);
        let d = gate(&[out(&[0.5, 0.5])], GateRule::Argmax, 0);
        assert!(!d[0].bleeding);
        let d = gate(&[out(&[0.55, 0.45])], GateRule::Threshold { threshold: 0.6 }, 0);
        assert!(!d[0].bleeding);
        let d = gate(&[out(&[0.6, 0.4])], GateRule::Threshold { threshold: 0.6 }, 0);
        assert!(d[0].bleeding);
        assert_eq!(d[0].aggregated_probs, vec![0.6, 0.4]);
    }

    #[test]
    fn manifest_paths_use_forward_slashes() {
        assert_eq!(display_path(Path::new("a/b/c.json")), "a/b/c.json");
    }
}
