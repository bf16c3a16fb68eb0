//! Versioned, validated file formats: the single place where external bytes
//! become domain types. `formats.md` at the repository root is the normative
//! schema reference; keep both in sync.
//!
//! Line-oriented data (detections, annotations, features) is JSON-lines with
//! a header on line 1 carrying `kind` and `version`. Models and reports are
//! single JSON documents. Every floating-point value is written with 17
//! significant digits so a read of our own output reproduces each f64
//! bit-exactly. All writers are atomic: a temp file in the target directory
//! is renamed over the destination only after a complete, flushed write.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ctxcrf_core::annotations::{GroundTruthImage, GroundTruthObject, GroundTruthSet};
use ctxcrf_core::categories::CategorySpace;
use ctxcrf_core::context_stats::PairwiseModel;
use ctxcrf_core::crf::ProposalSet;
use ctxcrf_core::eval::{ClassEval, EvalReport, Interpolation, SweepTable};
use ctxcrf_core::geometry::{BoundingBox, ImageFrame, SpatialRelation};
use ctxcrf_core::scene_prior::{SceneFeature, ScenePriorModel};
use ctxcrf_core::synth::{Archetype, PlantedRule, SynthConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// serialization plumbing

/// Compact JSON formatter that writes every f64 with 17 significant digits
/// (scientific notation), the smallest count that round-trips all doubles.
struct SciFloats;

impl serde_json::ser::Formatter for SciFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFloats);
    value
        .serialize(&mut ser)
        .expect("serialization of validated in-memory values cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Writes `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so readers never observe a partial file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io_err = |source: io::Error| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut file = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir.unwrap_or(Path::new(".")))
        .map_err(io_err)?;
    file.write_all(bytes).map_err(io_err)?;
    file.flush().map_err(io_err)?;
    file.persist(path)
        .map_err(|e| io_err(e.error))
        .map(|_| ())
}

fn read_to_string(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: DeserializeOwned>(
    path: &Path,
    line: usize,
    text: &str,
) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Malformed {
        path: path.to_path_buf(),
        line,
        detail: e.to_string(),
    })
}

/// Lenient first-pass header so a wrong-kind file is reported as such
/// instead of failing the strict schema of the expected format.
#[derive(Deserialize)]
struct KindProbe {
    kind: String,
    version: u32,
}

fn check_header(path: &Path, text: &str, expected: &str) -> Result<(), FormatError> {
    let probe: KindProbe = parse_json(path, 1, text)?;
    if probe.kind != expected {
        return Err(FormatError::WrongKind {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            got: probe.kind,
        });
    }
    if probe.version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            path: path.to_path_buf(),
            got: probe.version,
        });
    }
    Ok(())
}

fn core_invalid(path: &Path, line: Option<usize>, err: impl fmt::Display) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        line,
        detail: err.to_string(),
    }
}

/// JSONL body writer: emits `header`, then one line per record, returning the
/// byte offset of each record's first byte (for manifests).
fn write_jsonl<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: impl Iterator<Item = R>,
) -> Result<Vec<u64>, FormatError> {
    let mut out = to_json_line(header);
    out.push('\n');
    let mut offsets = Vec::new();
    for record in records {
        offsets.push(out.len() as u64);
        out.push_str(&to_json_line(&record));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(offsets)
}

/// Iterates the non-header lines of a JSONL file, skipping blank lines, with
/// 1-based line numbers. The header (line 1) is parsed by the caller.
fn body_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
}

fn header_line<'a>(path: &Path, text: &'a str) -> Result<&'a str, FormatError> {
    text.lines()
        .next()
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| FormatError::MissingHeader {
            path: path.to_path_buf(),
        })
}

// ---------------------------------------------------------------------------
// detections

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsHeader {
    kind: String,
    version: u32,
    categories: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsRecord {
    image_id: String,
    width: f64,
    height: f64,
    boxes: Vec<[f64; 4]>,
    scores: Vec<Vec<f64>>,
}

/// Detections plus the category space they are scored against.
#[derive(Debug)]
pub struct ReadDetections {
    pub sets: Vec<ProposalSet>,
    pub categories: CategorySpace,
    /// Rows dropped because their box had no positive area inside the frame.
    pub dropped_rows: usize,
}

pub fn read_detections(path: &Path) -> Result<ReadDetections, FormatError> {
    let text = read_to_string(path)?;
    let head = header_line(path, &text)?;
    check_header(path, head, "detections")?;
    let header: DetectionsHeader = parse_json(path, 1, head)?;
    let categories =
        CategorySpace::new(header.categories).map_err(|e| core_invalid(path, Some(1), e))?;
    let label_count = categories.label_count();

    let mut sets = Vec::new();
    let mut dropped_rows = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for (line, raw) in body_lines(&text) {
        let rec: DetectionsRecord = parse_json(path, line, raw)?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(FormatError::DuplicateImage {
                path: path.to_path_buf(),
                line,
                image_id: rec.image_id,
            });
        }
        let frame = ImageFrame::new(rec.width, rec.height)
            .map_err(|e| core_invalid(path, Some(line), e))?;
        if rec.boxes.len() != rec.scores.len() {
            return Err(FormatError::Invalid {
                path: path.to_path_buf(),
                line: Some(line),
                detail: format!(
                    "image '{}' has {} boxes but {} score rows",
                    rec.image_id,
                    rec.boxes.len(),
                    rec.scores.len()
                ),
            });
        }
        let mut boxes = Vec::with_capacity(rec.boxes.len());
        let mut rows = Vec::with_capacity(rec.scores.len());
        for ([x0, y0, x1, y1], row) in rec.boxes.into_iter().zip(rec.scores) {
            // a box with no positive area inside the frame drops its row
            let kept = BoundingBox::new(x0, y0, x1, y1)
                .ok()
                .and_then(|b| b.clip(&frame));
            match kept {
                Some(b) => {
                    boxes.push(b);
                    rows.push(row);
                }
                None => dropped_rows += 1,
            }
        }
        let set = ProposalSet::new(rec.image_id, frame, boxes, rows, label_count)
            .map_err(|e| core_invalid(path, Some(line), e))?;
        sets.push(set);
    }
    Ok(ReadDetections {
        sets,
        categories,
        dropped_rows,
    })
}

pub fn write_detections(
    path: &Path,
    sets: &[ProposalSet],
    categories: &CategorySpace,
) -> Result<Vec<u64>, FormatError> {
    let header = DetectionsHeader {
        kind: "detections".to_string(),
        version: FORMAT_VERSION,
        categories: categories.names().to_vec(),
    };
    write_jsonl(
        path,
        &header,
        sets.iter().map(|set| DetectionsRecord {
            image_id: set.image_id().to_string(),
            width: set.frame().width(),
            height: set.frame().height(),
            boxes: set
                .boxes()
                .iter()
                .map(|b| [b.x_min(), b.y_min(), b.x_max(), b.y_max()])
                .collect(),
            scores: (0..set.len()).map(|i| set.scores_row(i).to_vec()).collect(),
        }),
    )
}

// ---------------------------------------------------------------------------
// annotations

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationsHeader {
    kind: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationObject {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    difficult: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationsRecord {
    image_id: String,
    width: f64,
    height: f64,
    objects: Vec<AnnotationObject>,
}

/// Reads ground truth. The category space comes from `given` when supplied
/// (it must then agree with any header list), else from the file header.
pub fn read_annotations(
    path: &Path,
    given: Option<&CategorySpace>,
) -> Result<(GroundTruthSet, CategorySpace), FormatError> {
    let text = read_to_string(path)?;
    let head = header_line(path, &text)?;
    check_header(path, head, "annotations")?;
    let header: AnnotationsHeader = parse_json(path, 1, head)?;
    let categories = match (given, header.categories) {
        (Some(space), Some(listed)) => {
            if space.names() != listed.as_slice() {
                return Err(FormatError::CategoryMismatch {
                    path: path.to_path_buf(),
                    given: space.names().to_vec(),
                    listed,
                });
            }
            space.clone()
        }
        (Some(space), None) => space.clone(),
        (None, Some(listed)) => {
            CategorySpace::new(listed).map_err(|e| core_invalid(path, Some(1), e))?
        }
        (None, None) => {
            return Err(FormatError::NoCategories {
                path: path.to_path_buf(),
            })
        }
    };

    let mut images = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line, raw) in body_lines(&text) {
        let rec: AnnotationsRecord = parse_json(path, line, raw)?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(FormatError::DuplicateImage {
                path: path.to_path_buf(),
                line,
                image_id: rec.image_id,
            });
        }
        let frame = ImageFrame::new(rec.width, rec.height)
            .map_err(|e| core_invalid(path, Some(line), e))?;
        let mut objects = Vec::with_capacity(rec.objects.len());
        for obj in rec.objects {
            let label = categories
                .id_of(&obj.label)
                .ok_or_else(|| FormatError::UnknownCategory {
                    path: path.to_path_buf(),
                    line,
                    name: obj.label.clone(),
                })?;
            let [x0, y0, x1, y1] = obj.bbox;
            let bbox =
                BoundingBox::new(x0, y0, x1, y1).map_err(|e| core_invalid(path, Some(line), e))?;
            objects.push(GroundTruthObject {
                label,
                bbox,
                difficult: obj.difficult,
            });
        }
        images.push(GroundTruthImage {
            image_id: rec.image_id,
            frame,
            objects,
        });
    }
    Ok((GroundTruthSet::new(images), categories))
}

pub fn write_annotations(
    path: &Path,
    truth: &GroundTruthSet,
    categories: &CategorySpace,
) -> Result<Vec<u64>, FormatError> {
    let header = AnnotationsHeader {
        kind: "annotations".to_string(),
        version: FORMAT_VERSION,
        categories: Some(categories.names().to_vec()),
    };
    write_jsonl(
        path,
        &header,
        truth.images.iter().map(|img| AnnotationsRecord {
            image_id: img.image_id.clone(),
            width: img.frame.width(),
            height: img.frame.height(),
            objects: img
                .objects
                .iter()
                .map(|o| AnnotationObject {
                    label: categories
                        .name_of(o.label)
                        .expect("validated ground truth labels resolve")
                        .to_string(),
                    bbox: [o.bbox.x_min(), o.bbox.y_min(), o.bbox.x_max(), o.bbox.y_max()],
                    difficult: o.difficult,
                })
                .collect(),
        }),
    )
}

// ---------------------------------------------------------------------------
// scene features

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesHeader {
    kind: String,
    version: u32,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesRecord {
    image_id: String,
    values: Vec<f64>,
}

pub fn read_features(path: &Path) -> Result<Vec<SceneFeature>, FormatError> {
    let text = read_to_string(path)?;
    let head = header_line(path, &text)?;
    check_header(path, head, "features")?;
    let header: FeaturesHeader = parse_json(path, 1, head)?;
    let mut features = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line, raw) in body_lines(&text) {
        let rec: FeaturesRecord = parse_json(path, line, raw)?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(FormatError::DuplicateImage {
                path: path.to_path_buf(),
                line,
                image_id: rec.image_id,
            });
        }
        if rec.values.len() != header.dim {
            return Err(FormatError::Invalid {
                path: path.to_path_buf(),
                line: Some(line),
                detail: format!(
                    "feature of image '{}' has dimension {} but the header says {}",
                    rec.image_id,
                    rec.values.len(),
                    header.dim
                ),
            });
        }
        let feature = SceneFeature::new(rec.image_id, rec.values)
            .map_err(|e| core_invalid(path, Some(line), e))?;
        features.push(feature);
    }
    Ok(features)
}

pub fn write_features(path: &Path, features: &[SceneFeature]) -> Result<Vec<u64>, FormatError> {
    let dim = features.first().map_or(0, |f| f.dim());
    let header = FeaturesHeader {
        kind: "features".to_string(),
        version: FORMAT_VERSION,
        dim,
    };
    write_jsonl(
        path,
        &header,
        features.iter().map(|f| FeaturesRecord {
            image_id: f.image_id().to_string(),
            values: f.values().to_vec(),
        }),
    )
}

// ---------------------------------------------------------------------------
// pairwise model

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairwiseModelFile {
    kind: String,
    version: u32,
    categories: Vec<String>,
    alpha: f64,
    counts: Vec<u64>,
    likelihoods: Vec<f64>,
}

pub fn read_pairwise_model(path: &Path) -> Result<PairwiseModel, FormatError> {
    let text = read_to_string(path)?;
    check_header(path, &text, "pairwise-model")?;
    let file: PairwiseModelFile = parse_json(path, 1, &text)?;
    let categories =
        CategorySpace::new(file.categories).map_err(|e| core_invalid(path, None, e))?;
    PairwiseModel::from_parts(categories, file.alpha, file.counts, file.likelihoods)
        .map_err(|e| core_invalid(path, None, e))
}

pub fn write_pairwise_model(path: &Path, model: &PairwiseModel) -> Result<(), FormatError> {
    let file = PairwiseModelFile {
        kind: "pairwise-model".to_string(),
        version: FORMAT_VERSION,
        categories: model.categories().names().to_vec(),
        alpha: model.alpha(),
        counts: model.counts().to_vec(),
        likelihoods: model.likelihoods().to_vec(),
    };
    let mut out = to_json_line(&file);
    out.push('\n');
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// scene-prior model

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneModelFile {
    kind: String,
    version: u32,
    categories: Vec<String>,
    dim: usize,
    lambda: f64,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

pub fn read_scene_model(path: &Path) -> Result<ScenePriorModel, FormatError> {
    let text = read_to_string(path)?;
    check_header(path, &text, "scene-model")?;
    let file: SceneModelFile = parse_json(path, 1, &text)?;
    let categories =
        CategorySpace::new(file.categories).map_err(|e| core_invalid(path, None, e))?;
    ScenePriorModel::from_parts(categories, file.dim, file.lambda, file.weights, file.biases)
        .map_err(|e| core_invalid(path, None, e))
}

pub fn write_scene_model(path: &Path, model: &ScenePriorModel) -> Result<(), FormatError> {
    let file = SceneModelFile {
        kind: "scene-model".to_string(),
        version: FORMAT_VERSION,
        categories: model.categories().names().to_vec(),
        dim: model.dim(),
        lambda: model.lambda(),
        weights: model.weights().to_vec(),
        biases: model.biases().to_vec(),
    };
    let mut out = to_json_line(&file);
    out.push('\n');
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// evaluation report

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportClass {
    label: String,
    ap: Option<f64>,
    true_positives: u64,
    false_positives: u64,
    ground_truth: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    kind: String,
    version: u32,
    iou_threshold: f64,
    interpolation: String,
    map: f64,
    classes: Vec<ReportClass>,
}

pub fn interpolation_name(interp: Interpolation) -> &'static str {
    match interp {
        Interpolation::ElevenPoint => "11pt",
        Interpolation::AllPoints => "all",
    }
}

pub fn write_report(
    path: &Path,
    report: &EvalReport,
    categories: &CategorySpace,
) -> Result<(), FormatError> {
    let file = ReportFile {
        kind: "eval-report".to_string(),
        version: FORMAT_VERSION,
        iou_threshold: report.iou_threshold,
        interpolation: interpolation_name(report.interpolation).to_string(),
        map: report.map,
        classes: report
            .classes
            .iter()
            .map(|c| ReportClass {
                label: categories
                    .name_of(c.label)
                    .expect("report labels come from the same space")
                    .to_string(),
                ap: c.ap,
                true_positives: c.true_positives,
                false_positives: c.false_positives,
                ground_truth: c.ground_truth,
            })
            .collect(),
    };
    let mut out = to_json_line(&file);
    out.push('\n');
    atomic_write(path, out.as_bytes())
}

/// Reads a report back, resolving class names against `categories`.
pub fn read_report(
    path: &Path,
    categories: &CategorySpace,
) -> Result<EvalReport, FormatError> {
    let text = read_to_string(path)?;
    check_header(path, &text, "eval-report")?;
    let file: ReportFile = parse_json(path, 1, &text)?;
    let interpolation = match file.interpolation.as_str() {
        "11pt" => Interpolation::ElevenPoint,
        "all" => Interpolation::AllPoints,
        other => {
            return Err(FormatError::Invalid {
                path: path.to_path_buf(),
                line: None,
                detail: format!("unknown interpolation '{other}'"),
            })
        }
    };
    let mut classes = Vec::with_capacity(file.classes.len());
    for c in file.classes {
        let label = categories
            .id_of(&c.label)
            .ok_or_else(|| FormatError::UnknownCategory {
                path: path.to_path_buf(),
                line: 1,
                name: c.label.clone(),
            })?;
        classes.push(ClassEval {
            label,
            ap: c.ap,
            true_positives: c.true_positives,
            false_positives: c.false_positives,
            ground_truth: c.ground_truth,
        });
    }
    Ok(EvalReport {
        iou_threshold: file.iou_threshold,
        interpolation,
        classes,
        map: file.map,
    })
}

// ---------------------------------------------------------------------------
// sweep table

/// CSV with one row per grid point: `omega_p,omega_g,map,ap_<name>...`.
/// Undefined APs (classes without ground truth) are empty cells.
pub fn write_sweep_csv(
    path: &Path,
    table: &SweepTable,
    categories: &CategorySpace,
) -> Result<(), FormatError> {
    let mut out = String::from("omega_p,omega_g,map");
    for (_, name) in categories.foreground() {
        out.push_str(",ap_");
        out.push_str(name);
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e}",
            row.omega_p, row.omega_g, row.map
        ));
        for ap in &row.per_class_ap {
            out.push(',');
            if let Some(v) = ap {
                out.push_str(&format!("{v:.16e}"));
            }
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// synthetic benchmark config

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthRuleDto {
    first: String,
    second: String,
    relation: String,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthArchetypeDto {
    name: String,
    presence: Vec<f64>,
    feature_mean: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfigFile {
    kind: String,
    version: u32,
    categories: Vec<String>,
    image_count: usize,
    frame_width: f64,
    frame_height: f64,
    rules: Vec<SynthRuleDto>,
    confusions: Vec<(String, String)>,
    unary_noise: f64,
    archetypes: Vec<SynthArchetypeDto>,
    feature_noise: f64,
    seed: u64,
}

pub fn read_synth_config(path: &Path) -> Result<SynthConfig, FormatError> {
    let text = read_to_string(path)?;
    check_header(path, &text, "synth-config")?;
    let file: SynthConfigFile = parse_json(path, 1, &text)?;
    let categories =
        CategorySpace::new(file.categories.clone()).map_err(|e| core_invalid(path, None, e))?;
    let resolve = |name: &str| {
        categories
            .id_of(name)
            .ok_or_else(|| FormatError::UnknownCategory {
                path: path.to_path_buf(),
                line: 1,
                name: name.to_string(),
            })
    };
    let mut rules = Vec::with_capacity(file.rules.len());
    for rule in &file.rules {
        let relation = SpatialRelation::from_name(&rule.relation).ok_or_else(|| {
            FormatError::Invalid {
                path: path.to_path_buf(),
                line: Some(1),
                detail: format!("unknown spatial relation '{}'", rule.relation),
            }
        })?;
        rules.push(PlantedRule {
            first: resolve(&rule.first)?,
            second: resolve(&rule.second)?,
            relation,
            probability: rule.probability,
        });
    }
    let mut confusions = Vec::with_capacity(file.confusions.len());
    for (a, b) in &file.confusions {
        confusions.push((resolve(a)?, resolve(b)?));
    }
    let config = SynthConfig {
        categories: file.categories,
        image_count: file.image_count,
        frame_width: file.frame_width,
        frame_height: file.frame_height,
        rules,
        confusions,
        unary_noise: file.unary_noise,
        archetypes: file
            .archetypes
            .into_iter()
            .map(|a| Archetype {
                name: a.name,
                presence: a.presence,
                feature_mean: a.feature_mean,
            })
            .collect(),
        feature_noise: file.feature_noise,
        seed: file.seed,
    };
    config.validate().map_err(|e| core_invalid(path, None, e))?;
    Ok(config)
}

pub fn write_synth_config(path: &Path, config: &SynthConfig) -> Result<(), FormatError> {
    let space = CategorySpace::new(config.categories.clone())
        .map_err(|e| core_invalid(path, None, e))?;
    let name_of = |label: usize| {
        space
            .name_of(label)
            .expect("validated config labels resolve")
            .to_string()
    };
    let file = SynthConfigFile {
        kind: "synth-config".to_string(),
        version: FORMAT_VERSION,
        categories: config.categories.clone(),
        image_count: config.image_count,
        frame_width: config.frame_width,
        frame_height: config.frame_height,
        rules: config
            .rules
            .iter()
            .map(|r| SynthRuleDto {
                first: name_of(r.first),
                second: name_of(r.second),
                relation: r.relation.name().to_string(),
                probability: r.probability,
            })
            .collect(),
        confusions: config
            .confusions
            .iter()
            .map(|&(a, b)| (name_of(a), name_of(b)))
            .collect(),
        unary_noise: config.unary_noise,
        archetypes: config
            .archetypes
            .iter()
            .map(|a| SynthArchetypeDto {
                name: a.name.clone(),
                presence: a.presence.clone(),
                feature_mean: a.feature_mean.clone(),
            })
            .collect(),
        feature_noise: config.feature_noise,
        seed: config.seed,
    };
    let mut out = to_json_line(&file);
    out.push('\n');
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// dataset manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    /// Byte offset of this image's record in `detections.jsonl`.
    pub detections_offset: u64,
    /// Byte offset of this image's record in `annotations.jsonl`.
    pub annotations_offset: u64,
    /// Byte offset of this image's record in `features.jsonl`.
    pub features_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    kind: String,
    version: u32,
    categories: Vec<String>,
    images: Vec<ManifestImage>,
}

pub fn write_manifest(
    path: &Path,
    categories: &CategorySpace,
    images: &[ManifestImage],
) -> Result<(), FormatError> {
    let file = ManifestFile {
        kind: "dataset-manifest".to_string(),
        version: FORMAT_VERSION,
        categories: categories.names().to_vec(),
        images: images.to_vec(),
    };
    let mut out = to_json_line(&file);
    out.push('\n');
    atomic_write(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<(CategorySpace, Vec<ManifestImage>), FormatError> {
    let text = read_to_string(path)?;
    check_header(path, &text, "dataset-manifest")?;
    let file: ManifestFile = parse_json(path, 1, &text)?;
    let categories =
        CategorySpace::new(file.categories).map_err(|e| core_invalid(path, None, e))?;
    Ok((categories, file.images))
}

// ---------------------------------------------------------------------------
// errors

/// Every ingest error names the file it came from; line-oriented formats add
/// the 1-based line number.
#[derive(Debug)]
pub enum FormatError {
    Io {
        path: PathBuf,
        source: io::Error,
    },
    MissingHeader {
        path: PathBuf,
    },
    WrongKind {
        path: PathBuf,
        expected: String,
        got: String,
    },
    UnsupportedVersion {
        path: PathBuf,
        got: u32,
    },
    Malformed {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    Invalid {
        path: PathBuf,
        line: Option<usize>,
        detail: String,
    },
    DuplicateImage {
        path: PathBuf,
        line: usize,
        image_id: String,
    },
    UnknownCategory {
        path: PathBuf,
        line: usize,
        name: String,
    },
    CategoryMismatch {
        path: PathBuf,
        given: Vec<String>,
        listed: Vec<String>,
    },
    NoCategories {
        path: PathBuf,
    },
}

impl FormatError {
    /// True for filesystem-level failures (exit code 2); everything else is
    /// a validation failure (exit code 1).
    pub fn is_io(&self) -> bool {
        matches!(self, FormatError::Io { .. })
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            FormatError::MissingHeader { path } => {
                write!(f, "{}: missing header line", path.display())
            }
            FormatError::WrongKind { path, expected, got } => write!(
                f,
                "{}: expected a '{expected}' file, found kind '{got}'",
                path.display()
            ),
            FormatError::UnsupportedVersion { path, got } => write!(
                f,
                "{}: unsupported version {got} (this build reads version {FORMAT_VERSION})",
                path.display()
            ),
            FormatError::Malformed { path, line, detail } => {
                write!(f, "{} line {line}: {detail}", path.display())
            }
            FormatError::Invalid { path, line, detail } => match line {
                Some(line) => write!(f, "{} line {line}: {detail}", path.display()),
                None => write!(f, "{}: {detail}", path.display()),
            },
            FormatError::DuplicateImage { path, line, image_id } => write!(
                f,
                "{} line {line}: image '{image_id}' appears more than once",
                path.display()
            ),
            FormatError::UnknownCategory { path, line, name } => write!(
                f,
                "{} line {line}: unknown category '{name}'",
                path.display()
            ),
            FormatError::CategoryMismatch { path, given, listed } => write!(
                f,
                "{}: file lists categories [{}] but [{}] were given",
                path.display(),
                listed.join(", "),
                given.join(", ")
            ),
            FormatError::NoCategories { path } => write!(
                f,
                "{}: no category list in the file header and none supplied",
                path.display()
            ),
        }
    }
}

impl std::error::Error for FormatError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FormatError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
