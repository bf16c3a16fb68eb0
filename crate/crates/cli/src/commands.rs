//! One function per subcommand. Each takes its parsed flag set, performs the
//! file and model plumbing, and returns the JSON status value that `main`
//! prints as the single stdout line. Human-oriented notes go to stderr here.
//!
//! Parallel sections (rescore across images, sweep across grid points) use
//! indexed rayon iterators collected in order, so results are byte-identical
//! at every `--threads` value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ctxcrf_core::categories::CategorySpace;
use ctxcrf_core::context_stats::learn_pairwise;
use ctxcrf_core::crf::{rescore, CrfWeights, InferenceConfig, UpdateRule};
use ctxcrf_core::eval::{
    extract_detections, mean_average_precision, select_best_row, evaluate_grid_point, EvalConfig,
    Interpolation, SweepInputs, SweepTable,
};
use ctxcrf_core::scene_prior::{train_scene_prior, SceneFeature, TrainConfig};
use ctxcrf_core::synth::generate;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::formats::{
    self, FormatError, ManifestImage, read_annotations, read_detections, read_features,
    read_pairwise_model, read_scene_model, read_synth_config, write_annotations, write_detections,
    write_features, write_manifest, write_pairwise_model, write_report, write_scene_model,
    write_sweep_csv,
};

// ---------------------------------------------------------------------------
// error and exit codes

/// Failure of a subcommand: validation problems exit 1, I/O problems exit 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn validation(err: impl fmt::Display) -> Self {
        CliError::Validation(err.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Io(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<FormatError> for CliError {
    fn from(err: FormatError) -> Self {
        if err.is_io() {
            CliError::Io(err.to_string())
        } else {
            CliError::Validation(err.to_string())
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn parse_categories(list: &str) -> Result<CategorySpace, CliError> {
    let names: Vec<String> = list
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    CategorySpace::new(names)
        .map_err(|e| CliError::Validation(format!("--categories: {e}")))
}

fn ensure_same_space(
    reference: &CategorySpace,
    reference_name: &str,
    other: &CategorySpace,
    other_name: &str,
) -> Result<(), CliError> {
    if reference.names() != other.names() {
        return Err(CliError::Validation(format!(
            "category spaces disagree: {reference_name} lists [{}] but {other_name} lists [{}]",
            reference.names().join(", "),
            other.names().join(", ")
        )));
    }
    Ok(())
}

/// Features keyed by image id; read errors keep their file context.
fn feature_map(path: &Path) -> Result<BTreeMap<String, SceneFeature>, CliError> {
    let features = read_features(path)?;
    Ok(features
        .into_iter()
        .map(|f| (f.image_id().to_string(), f))
        .collect())
}

fn feature_for<'m>(
    map: &'m BTreeMap<String, SceneFeature>,
    image_id: &str,
    features_path: &Path,
) -> Result<&'m SceneFeature, CliError> {
    map.get(image_id).ok_or_else(|| {
        CliError::Validation(format!(
            "{}: no scene feature for image '{image_id}'",
            features_path.display()
        ))
    })
}

/// Inclusive `a:b:step` grid; endpoints match within 1e-12.
pub fn parse_grid(spec: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    let err = |detail: String| CliError::Validation(format!("{flag} '{spec}': {detail}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(err("expected a:b:step".to_string()));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| err(format!("'{p}' is not a number")))
        })
        .collect::<Result<_, _>>()?;
    let (a, b, step) = (nums[0], nums[1], nums[2]);
    if !a.is_finite() || !b.is_finite() || !step.is_finite() {
        return Err(err("bounds and step must be finite".to_string()));
    }
    if a > b + 1e-12 {
        return Err(err(format!("lower bound {a} exceeds upper bound {b}")));
    }
    if step <= 0.0 {
        return if (a - b).abs() <= 1e-12 {
            Ok(vec![a])
        } else {
            Err(err("step must be positive for a non-degenerate range".to_string()))
        };
    }
    let mut values = Vec::new();
    let mut i = 0u32;
    loop {
        let v = a + f64::from(i) * step;
        if v > b + 1e-12 {
            break;
        }
        values.push(v);
        i += 1;
    }
    Ok(values)
}

// ---------------------------------------------------------------------------
// learn-pairwise

pub struct LearnPairwiseOpts {
    pub annotations: PathBuf,
    pub categories: String,
    pub alpha: f64,
    pub out: PathBuf,
}

pub fn cmd_learn_pairwise(opts: &LearnPairwiseOpts) -> Result<Value, CliError> {
    let space = parse_categories(&opts.categories)?;
    let (truth, space) = read_annotations(&opts.annotations, Some(&space))?;
    let model = learn_pairwise(&truth, &space, opts.alpha).map_err(CliError::validation)?;
    write_pairwise_model(&opts.out, &model)?;
    Ok(json!({
        "command": "learn-pairwise",
        "status": "ok",
        "images": truth.images.len(),
        "objects": truth.object_count(),
        "alpha": opts.alpha,
        "smoothing_only": model.is_smoothing_only(),
        "out": opts.out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// train-scene

pub struct TrainSceneOpts {
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub out: PathBuf,
}

pub fn cmd_train_scene(opts: &TrainSceneOpts) -> Result<Value, CliError> {
    // the category space must come from the annotation header here: the
    // subcommand has no --categories flag by contract
    let (truth, space) = read_annotations(&opts.annotations, None)?;
    let features = read_features(&opts.features)?;
    let presence_by_image: BTreeMap<&str, Vec<bool>> = truth
        .images
        .iter()
        .zip(truth.presence(&space))
        .map(|(img, row)| (img.image_id.as_str(), row))
        .collect();
    if presence_by_image.len() != truth.images.len() {
        return Err(CliError::Validation(format!(
            "{}: duplicate image ids in annotations",
            opts.annotations.display()
        )));
    }
    let mut presence = Vec::with_capacity(features.len());
    for f in &features {
        let row = presence_by_image.get(f.image_id()).ok_or_else(|| {
            CliError::Validation(format!(
                "{}: image '{}' has a feature but no annotation record",
                opts.annotations.display(),
                f.image_id()
            ))
        })?;
        presence.push(row.clone());
    }
    if features.len() != truth.images.len() {
        return Err(CliError::Validation(format!(
            "{}: {} feature records vs {} annotated images; the sets must match",
            opts.features.display(),
            features.len(),
            truth.images.len()
        )));
    }
    let cfg = TrainConfig {
        lambda: opts.lambda,
        epochs: opts.epochs,
        learning_rate: opts.lr,
        seed: 0,
    };
    let (model, report) =
        train_scene_prior(&features, &presence, &space, &cfg).map_err(CliError::validation)?;
    write_scene_model(&opts.out, &model)?;
    let constant: Vec<&str> = report
        .constant_presence
        .iter()
        .filter_map(|&l| space.name_of(l))
        .collect();
    eprintln!(
        "trained scene prior on {} images: loss {:.6} -> {:.6} over {} epochs",
        features.len(),
        report.epoch_loss[0],
        report.final_loss(),
        opts.epochs
    );
    Ok(json!({
        "command": "train-scene",
        "status": "ok",
        "images": features.len(),
        "epochs": opts.epochs,
        "initial_loss": report.epoch_loss[0],
        "final_loss": report.final_loss(),
        "constant_presence": constant,
        "out": opts.out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// rescore

pub struct RescoreOpts {
    pub detections: PathBuf,
    pub pairwise: PathBuf,
    pub scene_prior: PathBuf,
    pub features: PathBuf,
    pub omega_p: f64,
    pub omega_g: f64,
    pub iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub update_rule: UpdateRule,
    pub max_proposals: usize,
    pub out: PathBuf,
}

pub fn cmd_rescore(opts: &RescoreOpts) -> Result<Value, CliError> {
    let read = read_detections(&opts.detections)?;
    let pairwise = read_pairwise_model(&opts.pairwise)?;
    let scene = read_scene_model(&opts.scene_prior)?;
    let det_name = opts.detections.display().to_string();
    ensure_same_space(
        &read.categories,
        &det_name,
        pairwise.categories(),
        &opts.pairwise.display().to_string(),
    )?;
    ensure_same_space(
        &read.categories,
        &det_name,
        scene.categories(),
        &opts.scene_prior.display().to_string(),
    )?;
    let features = feature_map(&opts.features)?;
    let weights = CrfWeights::new(opts.omega_p, opts.omega_g).map_err(CliError::validation)?;
    let cfg = InferenceConfig {
        max_iterations: opts.iters,
        tolerance: opts.tol,
        damping: opts.damping,
        update_rule: opts.update_rule,
        max_proposals: opts.max_proposals,
        ..InferenceConfig::default()
    };
    let results = read
        .sets
        .par_iter()
        .map(|set| {
            let feature = feature_for(&features, set.image_id(), &opts.features)?;
            rescore(set, &pairwise, &scene, feature, weights, &cfg).map_err(CliError::validation)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let converged = results.iter().filter(|r| r.converged).count();
    let proposals: usize = results.iter().map(|r| r.set.len()).sum();
    let sets: Vec<_> = results.into_iter().map(|r| r.set).collect();
    write_detections(&opts.out, &sets, &read.categories)?;
    Ok(json!({
        "command": "rescore",
        "status": "ok",
        "images": sets.len(),
        "proposals": proposals,
        "converged": converged,
        "dropped_rows": read.dropped_rows,
        "omega_p": opts.omega_p,
        "omega_g": opts.omega_g,
        "out": opts.out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// evaluate

pub struct EvaluateOpts {
    pub detections: PathBuf,
    pub annotations: PathBuf,
    pub iou: f64,
    pub interp: Interpolation,
    pub threshold: f64,
    pub out: PathBuf,
}

pub fn cmd_evaluate(opts: &EvaluateOpts) -> Result<Value, CliError> {
    let read = read_detections(&opts.detections)?;
    let (truth, space) = read_annotations(&opts.annotations, Some(&read.categories))?;
    let mut records = Vec::new();
    for set in &read.sets {
        records.extend(extract_detections(set, opts.threshold));
    }
    let cfg = EvalConfig {
        iou_threshold: opts.iou,
        interpolation: opts.interp,
    };
    let report =
        mean_average_precision(&records, &truth, &space, &cfg).map_err(CliError::validation)?;
    write_report(&opts.out, &report, &space)?;
    eprintln!("class            AP       TP     FP     ground truth");
    for class in &report.classes {
        let name = space.name_of(class.label).unwrap_or("?");
        match class.ap {
            Some(ap) => eprintln!(
                "{name:<16} {ap:<8.4} {:<6} {:<6} {}",
                class.true_positives, class.false_positives, class.ground_truth
            ),
            None => eprintln!(
                "{name:<16} n/a      {:<6} {:<6} {}",
                class.true_positives, class.false_positives, class.ground_truth
            ),
        }
    }
    eprintln!("mAP {:.4} (IoU {}, {})", report.map, opts.iou,
        formats::interpolation_name(opts.interp));
    Ok(json!({
        "command": "evaluate",
        "status": "ok",
        "map": report.map,
        "detections": records.len(),
        "dropped_rows": read.dropped_rows,
        "out": opts.out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// sweep

pub struct SweepOpts {
    pub detections: PathBuf,
    pub annotations: PathBuf,
    pub pairwise: PathBuf,
    pub scene_prior: PathBuf,
    pub features: PathBuf,
    pub omega_p_grid: String,
    pub omega_g_grid: String,
    pub out: PathBuf,
}

pub fn cmd_sweep(opts: &SweepOpts) -> Result<Value, CliError> {
    let read = read_detections(&opts.detections)?;
    let (truth, space) = read_annotations(&opts.annotations, Some(&read.categories))?;
    let pairwise = read_pairwise_model(&opts.pairwise)?;
    let scene = read_scene_model(&opts.scene_prior)?;
    let det_name = opts.detections.display().to_string();
    ensure_same_space(
        &read.categories,
        &det_name,
        pairwise.categories(),
        &opts.pairwise.display().to_string(),
    )?;
    ensure_same_space(
        &read.categories,
        &det_name,
        scene.categories(),
        &opts.scene_prior.display().to_string(),
    )?;
    let feature_by_id = feature_map(&opts.features)?;
    // one features row per detection image, aligned by index
    let features: Vec<SceneFeature> = read
        .sets
        .iter()
        .map(|set| feature_for(&feature_by_id, set.image_id(), &opts.features).cloned())
        .collect::<Result<_, _>>()?;

    let omega_p = parse_grid(&opts.omega_p_grid, "--omega-p-grid")?;
    let omega_g = parse_grid(&opts.omega_g_grid, "--omega-g-grid")?;
    let grid: Vec<(f64, f64)> = omega_p
        .iter()
        .flat_map(|&p| omega_g.iter().map(move |&g| (p, g)))
        .collect();

    let inputs = SweepInputs {
        sets: &read.sets,
        features: &features,
        truth: &truth,
        pairwise: &pairwise,
        scene: &scene,
        categories: &space,
        inference: InferenceConfig::default(),
        eval: EvalConfig::default(),
        score_threshold: ctxcrf_core::eval::DEFAULT_SCORE_THRESHOLD,
    };
    let rows = grid
        .par_iter()
        .map(|&(p, g)| evaluate_grid_point(&inputs, p, g).map_err(CliError::validation))
        .collect::<Result<Vec<_>, CliError>>()?;
    let best = select_best_row(&rows)
        .ok_or_else(|| CliError::Validation("empty sweep grid".to_string()))?;
    let table = SweepTable { rows, best };
    write_sweep_csv(&opts.out, &table, &space)?;
    let best_row = &table.rows[table.best];
    eprintln!(
        "swept {} grid points; best mAP {:.4} at omega_p={} omega_g={}",
        table.rows.len(),
        best_row.map,
        best_row.omega_p,
        best_row.omega_g
    );
    Ok(json!({
        "command": "sweep",
        "status": "ok",
        "grid_points": table.rows.len(),
        "best": {
            "omega_p": best_row.omega_p,
            "omega_g": best_row.omega_g,
            "map": best_row.map,
        },
        "out": opts.out.display().to_string(),
    }))
}

// ---------------------------------------------------------------------------
// synth

pub struct SynthOpts {
    pub config: PathBuf,
    pub out_dir: PathBuf,
}

pub fn cmd_synth(opts: &SynthOpts) -> Result<Value, CliError> {
    let config = read_synth_config(&opts.config)?;
    let space = CategorySpace::new(config.categories.clone()).map_err(CliError::validation)?;
    let output = generate(&config).map_err(CliError::validation)?;
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", opts.out_dir.display())))?;

    let sets: Vec<_> = output.scenes.iter().map(|s| s.proposals.clone()).collect();
    let truth = ctxcrf_core::annotations::GroundTruthSet::new(
        output.scenes.iter().map(|s| s.truth.clone()).collect(),
    );
    let features: Vec<_> = output.scenes.iter().map(|s| s.feature.clone()).collect();

    let detections_path = opts.out_dir.join("detections.jsonl");
    let annotations_path = opts.out_dir.join("annotations.jsonl");
    let features_path = opts.out_dir.join("features.jsonl");
    let manifest_path = opts.out_dir.join("manifest.json");

    let det_offsets = write_detections(&detections_path, &sets, &space)?;
    let ann_offsets = write_annotations(&annotations_path, &truth, &space)?;
    let feat_offsets = write_features(&features_path, &features)?;

    let images: Vec<ManifestImage> = output
        .scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| ManifestImage {
            image_id: scene.truth.image_id.clone(),
            width: scene.truth.frame.width(),
            height: scene.truth.frame.height(),
            detections_offset: det_offsets[i],
            annotations_offset: ann_offsets[i],
            features_offset: feat_offsets[i],
        })
        .collect();
    write_manifest(&manifest_path, &space, &images)?;

    if !output.skipped.is_empty() {
        eprintln!(
            "skipped {} of {} scenes (admissibility retries exhausted)",
            output.skipped.len(),
            config.image_count
        );
    }
    Ok(json!({
        "command": "synth",
        "status": "ok",
        "scenes": output.scenes.len(),
        "skipped": output.skipped.len(),
        "seed": config.seed,
        "out_dir": opts.out_dir.display().to_string(),
        "files": ["detections.jsonl", "annotations.jsonl", "features.jsonl", "manifest.json"],
    }))
}
