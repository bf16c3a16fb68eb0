//! Per-class average precision, mAP, and the pairwise/global weight sweep.
//!
//! Matching follows the VOC protocol: detections are ranked by confidence,
//! each is matched greedily against the highest-IoU ground-truth box of its
//! class in its image, and every ground-truth box can satisfy at most one
//! detection. Difficult ground truth neither counts toward recall nor turns
//! detections into false positives.

use alloc::string::String;
use alloc::vec::Vec;

use crate::annotations::GroundTruthSet;
use crate::categories::CategorySpace;
use crate::context_stats::PairwiseModel;
use crate::crf::{rescore, CrfError, CrfWeights, InferenceConfig, ProposalSet};
use crate::geometry::{iou, BoundingBox};
use crate::scene_prior::{SceneFeature, ScenePriorModel};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Default marginal threshold when flattening score matrices to detections.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;

/// One scored, labeled box: the unit of evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    /// Foreground label, 1-based.
    pub label: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    /// Index of the proposal this record came from; part of the
    /// deterministic ranking tie-break.
    pub proposal_index: usize,
}

/// Precision interpolation scheme for AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// VOC2007: mean of the max precision at recalls `0.0, 0.1, ..., 1.0`.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope at every recall change.
    AllPoints,
}

/// Evaluation outcome for one foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub label: usize,
    /// `None` when the class has no non-difficult ground truth; such classes
    /// are excluded from mAP.
    pub ap: Option<f64>,
    pub true_positives: u64,
    pub false_positives: u64,
    /// Non-difficult ground-truth instances of the class.
    pub ground_truth: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// One entry per foreground label, ascending.
    pub classes: Vec<ClassEval>,
    /// Arithmetic mean over classes with a defined AP; 0 when none is
    /// defined.
    pub map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            interpolation: Interpolation::ElevenPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::BadConfig {
                name: "iou_threshold",
                value: self.iou_threshold,
            });
        }
        Ok(())
    }
}

/// Flattens a proposal set into one record per (proposal, foreground label)
/// whose score reaches `threshold`. Output order is (proposal index, label),
/// both ascending.
pub fn extract_detections(set: &ProposalSet, threshold: f64) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for i in 0..set.len() {
        for label in 1..set.label_count() {
            let confidence = set.score(i, label);
            if confidence >= threshold {
                out.push(DetectionRecord {
                    image_id: String::from(set.image_id()),
                    label,
                    bbox: *set.bbox(i),
                    confidence,
                    proposal_index: i,
                });
            }
        }
    }
    out
}

/// Ranking order: confidence descending, then image id, then proposal
/// index, then label, all ascending. Total and deterministic.
fn rank_order(a: &DetectionRecord, b: &DetectionRecord) -> core::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.proposal_index.cmp(&b.proposal_index))
        .then_with(|| a.label.cmp(&b.label))
}

/// Average precision of one class.
///
/// All records must carry `label`. Each ranked detection is compared against
/// the ground-truth boxes of its class in its image: the highest-IoU box
/// wins (ties to the lowest index). A match at or above `iou_threshold`
/// counts as a true positive if that box is non-difficult and unmatched, is
/// ignored entirely if the box is difficult, and otherwise is a false
/// positive, as is any detection without a qualifying match.
pub fn average_precision(
    detections: &[DetectionRecord],
    truth: &GroundTruthSet,
    label: usize,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<ClassEval, EvalError> {
    if let Some(stray) = detections.iter().find(|d| d.label != label) {
        return Err(EvalError::MixedLabels {
            expected: label,
            found: stray.label,
        });
    }

    struct GtEntry {
        bbox: BoundingBox,
        difficult: bool,
        matched: bool,
    }
    let mut by_image: Vec<(&str, Vec<GtEntry>)> = Vec::new();
    let mut ground_truth = 0u64;
    for image in &truth.images {
        let entries: Vec<GtEntry> = image
            .objects
            .iter()
            .filter(|o| o.label == label)
            .map(|o| {
                if !o.difficult {
                    ground_truth += 1;
                }
                GtEntry {
                    bbox: o.bbox,
                    difficult: o.difficult,
                    matched: false,
                }
            })
            .collect();
        if !entries.is_empty() {
            by_image.push((image.image_id.as_str(), entries));
        }
    }
    by_image.sort_by(|a, b| a.0.cmp(b.0));

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| rank_order(&detections[a], &detections[b]));

    let mut true_positives = 0u64;
    let mut false_positives = 0u64;
    let mut recalls = Vec::new();
    let mut precisions = Vec::new();
    for &d in &order {
        let det = &detections[d];
        let slot = by_image
            .binary_search_by(|probe| probe.0.cmp(det.image_id.as_str()))
            .ok();
        let mut best: Option<(usize, f64)> = None;
        if let Some(s) = slot {
            for (gi, entry) in by_image[s].1.iter().enumerate() {
                let overlap = iou(&det.bbox, &entry.bbox);
                if best.is_none_or(|(_, v)| overlap > v) {
                    best = Some((gi, overlap));
                }
            }
        }
        match (slot, best) {
            (Some(s), Some((gi, overlap))) if overlap >= iou_threshold => {
                let entry = &mut by_image[s].1[gi];
                if entry.difficult {
                    // difficult ground truth: the detection simply does not
                    // participate in the ranking
                    continue;
                }
                if entry.matched {
                    false_positives += 1;
                } else {
                    entry.matched = true;
                    true_positives += 1;
                }
            }
            _ => false_positives += 1,
        }
        if ground_truth > 0 {
            recalls.push(true_positives as f64 / ground_truth as f64);
        } else {
            recalls.push(0.0);
        }
        precisions.push(true_positives as f64 / (true_positives + false_positives) as f64);
    }

    let ap = if ground_truth == 0 {
        None
    } else {
        Some(match interpolation {
            Interpolation::ElevenPoint => {
                let mut sum = 0.0;
                for step in 0..=10 {
                    let t = step as f64 / 10.0;
                    let mut peak = 0.0f64;
                    for (r, p) in recalls.iter().zip(&precisions) {
                        if *r >= t && *p > peak {
                            peak = *p;
                        }
                    }
                    sum += peak;
                }
                sum / 11.0
            }
            Interpolation::AllPoints => {
                let mut envelope = precisions.clone();
                for i in (0..envelope.len().saturating_sub(1)).rev() {
                    envelope[i] = envelope[i].max(envelope[i + 1]);
                }
                let mut area = 0.0;
                let mut prev = 0.0;
                for (r, p) in recalls.iter().zip(&envelope) {
                    if *r > prev {
                        area += (r - prev) * p;
                        prev = *r;
                    }
                }
                area
            }
        })
    };

    Ok(ClassEval {
        label,
        ap,
        true_positives,
        false_positives,
        ground_truth,
    })
}

/// Per-class AP for every foreground category plus their mean.
pub fn mean_average_precision(
    detections: &[DetectionRecord],
    truth: &GroundTruthSet,
    categories: &CategorySpace,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let k = categories.foreground_count();
    for image in &truth.images {
        for o in &image.objects {
            if o.label == 0 || o.label > k {
                return Err(EvalError::BadLabel {
                    image_id: image.image_id.clone(),
                    label: o.label,
                    max: k,
                });
            }
        }
    }
    for d in detections {
        if d.label == 0 || d.label > k {
            return Err(EvalError::BadLabel {
                image_id: d.image_id.clone(),
                label: d.label,
                max: k,
            });
        }
    }
    let mut classes = Vec::with_capacity(k);
    for label in 1..=k {
        let class_dets: Vec<DetectionRecord> = detections
            .iter()
            .filter(|d| d.label == label)
            .cloned()
            .collect();
        classes.push(average_precision(
            &class_dets,
            truth,
            label,
            config.iou_threshold,
            config.interpolation,
        )?);
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalReport {
        iou_threshold: config.iou_threshold,
        interpolation: config.interpolation,
        classes,
        map,
    })
}

/// Everything a sweep grid point needs, bundled once.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub sets: &'a [ProposalSet],
    /// Scene feature of `sets[i]`, aligned by index.
    pub features: &'a [SceneFeature],
    pub truth: &'a GroundTruthSet,
    pub pairwise: &'a PairwiseModel,
    pub scene: &'a ScenePriorModel,
    pub categories: &'a CategorySpace,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    /// Threshold for flattening rescored marginals into detections.
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega_p: f64,
    pub omega_g: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the best row: maximum mAP, ties to the smaller `omega_p`,
    /// then the smaller `omega_g`.
    pub best: usize,
}

/// Rescores every image at one `(omega_p, omega_g)` and evaluates the
/// result. Pure and deterministic, so grid points may run in any order or
/// in parallel as long as the caller assembles rows in grid order.
pub fn evaluate_grid_point(
    inputs: &SweepInputs<'_>,
    omega_p: f64,
    omega_g: f64,
) -> Result<SweepRow, EvalError> {
    if inputs.sets.len() != inputs.features.len() {
        return Err(EvalError::LengthMismatch {
            sets: inputs.sets.len(),
            features: inputs.features.len(),
        });
    }
    let weights = CrfWeights::new(omega_p, omega_g)?;
    let mut detections = Vec::new();
    for (set, feature) in inputs.sets.iter().zip(inputs.features) {
        let out = rescore(
            set,
            inputs.pairwise,
            inputs.scene,
            feature,
            weights,
            &inputs.inference,
        )?;
        detections.extend(extract_detections(&out.set, inputs.score_threshold));
    }
    let report =
        mean_average_precision(&detections, inputs.truth, inputs.categories, &inputs.eval)?;
    Ok(SweepRow {
        omega_p,
        omega_g,
        per_class_ap: report.classes.iter().map(|c| c.ap).collect(),
        map: report.map,
    })
}

/// Index of the winning row under the deterministic tie-break, or `None`
/// for an empty table.
pub fn select_best_row(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &rows[b];
                match row.map.total_cmp(&cur.map) {
                    core::cmp::Ordering::Greater => true,
                    core::cmp::Ordering::Less => false,
                    core::cmp::Ordering::Equal => {
                        match row.omega_p.total_cmp(&cur.omega_p) {
                            core::cmp::Ordering::Less => true,
                            core::cmp::Ordering::Greater => false,
                            core::cmp::Ordering::Equal => {
                                row.omega_g.total_cmp(&cur.omega_g) == core::cmp::Ordering::Less
                            }
                        }
                    }
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Evaluates every grid point sequentially and selects the best row.
pub fn sweep_weights(
    inputs: &SweepInputs<'_>,
    grid: &[(f64, f64)],
) -> Result<SweepTable, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(omega_p, omega_g) in grid {
        rows.push(evaluate_grid_point(inputs, omega_p, omega_g)?);
    }
    let best = select_best_row(&rows).expect("nonempty grid has a best row");
    Ok(SweepTable { rows, best })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    MixedLabels { expected: usize, found: usize },
    BadLabel { image_id: String, label: usize, max: usize },
    BadConfig { name: &'static str, value: f64 },
    LengthMismatch { sets: usize, features: usize },
    EmptyGrid,
    Crf(CrfError),
}

impl From<CrfError> for EvalError {
    fn from(e: CrfError) -> Self {
        EvalError::Crf(e)
    }
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::MixedLabels { expected, found } => write!(
                f,
                "detection list for class {expected} contains a record of class {found}"
            ),
            EvalError::BadLabel {
                image_id,
                label,
                max,
            } => write!(
                f,
                "image \"{image_id}\" carries label {label}, outside 1..={max}"
            ),
            EvalError::BadConfig { name, value } => {
                write!(f, "invalid evaluation parameter {name} = {value}")
            }
            EvalError::LengthMismatch { sets, features } => write!(
                f,
                "{sets} proposal sets but {features} scene features"
            ),
            EvalError::EmptyGrid => write!(f, "weight grid is empty"),
            EvalError::Crf(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}
