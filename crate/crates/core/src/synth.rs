//! Seeded synthetic scene generator with an analytic pairwise oracle.
//!
//! Scenes are drawn from a small generative story: pick an archetype, draw
//! which categories appear (at most [`MAX_OBJECTS_PER_SCENE`], by rejection),
//! lay the objects out according to any planted spatial rule, corrupt the
//! detector scores with a per-object noise draw, and emit a scene feature
//! near the archetype mean. Capping scenes at two objects keeps the expected
//! pair statistics in closed form, so [`plant_oracle_stats`] can state the
//! exact tensor a learner should converge to.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::annotations::{GroundTruthImage, GroundTruthObject};
use crate::categories::CategorySpace;
use crate::context_stats::PairwiseModel;
use crate::crf::{CrfError, ProposalSet};
use crate::geometry::{
    classify_relation, inverse_relation, BoundingBox, ImageFrame, SpatialRelation,
    RELATION_COUNT,
};
use crate::scene_prior::{SceneError, SceneFeature};

/// Hard cap on objects per scene; keeps the oracle analytic.
pub const MAX_OBJECTS_PER_SCENE: usize = 2;

/// Presence draws are rejected until at most [`MAX_OBJECTS_PER_SCENE`]
/// categories appear; after this many tries the scene is skipped.
pub const PRESENCE_RETRY_LIMIT: usize = 100;

/// Box pairs are redrawn until they realize the target relation; after this
/// many tries the scene is skipped.
pub const PLACEMENT_RETRY_LIMIT: usize = 2000;

/// Share of an object's leaked score mass routed to its confusable partner
/// (the rest goes to background).
pub const CONFUSION_LEAK: f64 = 0.8;

/// The four spatially disjoint directions scenes are laid out in.
pub const DIRECTIONS: [SpatialRelation; 4] = [
    SpatialRelation::DisjointAbove,
    SpatialRelation::DisjointBelow,
    SpatialRelation::DisjointLeft,
    SpatialRelation::DisjointRight,
];

/// A co-occurrence layout planted into generated scenes: when `first` and
/// `second` are both present, `classify_relation(first_box, second_box)`
/// equals `relation` with probability `probability`, and is otherwise drawn
/// uniformly from [`DIRECTIONS`]. `relation` states where `second` sits
/// relative to `first`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRule {
    pub first: usize,
    pub second: usize,
    pub relation: SpatialRelation,
    pub probability: f64,
}

/// A scene type: per-category presence probabilities plus the mean of the
/// scene feature emitted for scenes of this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub name: String,
    pub presence: Vec<f64>,
    pub feature_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Foreground category names; label k is `categories[k - 1]`.
    pub categories: Vec<String>,
    pub image_count: usize,
    pub frame_width: f64,
    pub frame_height: f64,
    pub rules: Vec<PlantedRule>,
    /// Mutually confusable label pairs: the detector leaks score from each
    /// side to the other. A label may appear in at most one pair.
    pub confusions: Vec<(usize, usize)>,
    /// Detector noise level rho in [0, 1): per object the leaked mass is
    /// uniform on [0, 2*rho], capped at 0.98.
    pub unary_noise: f64,
    pub archetypes: Vec<Archetype>,
    /// Standard deviation of the scene feature around the archetype mean.
    pub feature_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let space = CategorySpace::new(self.categories.clone())?;
        let k = space.foreground_count();
        if self.image_count == 0 {
            return Err(SynthError::NoImages);
        }
        ImageFrame::new(self.frame_width, self.frame_height).map_err(|_| {
            SynthError::BadFrame {
                width: self.frame_width,
                height: self.frame_height,
            }
        })?;
        if !(self.unary_noise >= 0.0 && self.unary_noise < 1.0) {
            return Err(SynthError::BadNoise {
                name: "unary_noise",
                value: self.unary_noise,
            });
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(SynthError::BadNoise {
                name: "feature_noise",
                value: self.feature_noise,
            });
        }
        if self.archetypes.is_empty() {
            return Err(SynthError::NoArchetypes);
        }
        let dim = self.archetypes[0].feature_mean.len();
        if dim == 0 {
            return Err(SynthError::EmptyFeatureMean { archetype: 0 });
        }
        for (a, arch) in self.archetypes.iter().enumerate() {
            if arch.presence.len() != k {
                return Err(SynthError::PresenceWidth {
                    archetype: a,
                    expected: k,
                    got: arch.presence.len(),
                });
            }
            for (i, &p) in arch.presence.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SynthError::BadPresence {
                        archetype: a,
                        category: i + 1,
                        value: p,
                    });
                }
            }
            if arch.feature_mean.is_empty() {
                return Err(SynthError::EmptyFeatureMean { archetype: a });
            }
            if arch.feature_mean.len() != dim {
                return Err(SynthError::FeatureDimMismatch {
                    archetype: a,
                    expected: dim,
                    got: arch.feature_mean.len(),
                });
            }
            if arch.feature_mean.iter().any(|v| !v.is_finite()) {
                return Err(SynthError::EmptyFeatureMean { archetype: a });
            }
        }
        let mut seen_pairs: Vec<(usize, usize)> = Vec::new();
        for (i, rule) in self.rules.iter().enumerate() {
            for label in [rule.first, rule.second] {
                if label == 0 || label > k {
                    return Err(SynthError::BadRuleLabel { rule: i, label });
                }
            }
            if rule.first == rule.second {
                return Err(SynthError::BadRuleLabel {
                    rule: i,
                    label: rule.first,
                });
            }
            if !DIRECTIONS.contains(&rule.relation) {
                return Err(SynthError::BadRuleRelation { rule: i });
            }
            if !(rule.probability >= 0.0 && rule.probability <= 1.0) {
                return Err(SynthError::BadRuleProbability {
                    rule: i,
                    value: rule.probability,
                });
            }
            let key = ordered_pair(rule.first, rule.second);
            if seen_pairs.contains(&key) {
                return Err(SynthError::DuplicateRulePair { rule: i });
            }
            seen_pairs.push(key);
        }
        let mut confused: Vec<usize> = Vec::new();
        for (i, &(a, b)) in self.confusions.iter().enumerate() {
            if a == 0 || a > k || b == 0 || b > k || a == b {
                return Err(SynthError::BadConfusion { index: i });
            }
            if confused.contains(&a) || confused.contains(&b) {
                return Err(SynthError::DuplicateConfusion { index: i });
            }
            confused.push(a);
            confused.push(b);
        }
        Ok(())
    }

    fn rule_for(&self, i: usize, j: usize) -> Option<&PlantedRule> {
        let key = ordered_pair(i, j);
        self.rules
            .iter()
            .find(|r| ordered_pair(r.first, r.second) == key)
    }

    fn confusion_partner(&self, label: usize) -> Option<usize> {
        for &(a, b) in &self.confusions {
            if label == a {
                return Some(b);
            }
            if label == b {
                return Some(a);
            }
        }
        None
    }

    pub fn feature_dim(&self) -> usize {
        self.archetypes
            .first()
            .map_or(0, |a| a.feature_mean.len())
    }
}

fn ordered_pair(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Why a scene index produced no scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// No presence draw with at most [`MAX_OBJECTS_PER_SCENE`] objects
    /// within [`PRESENCE_RETRY_LIMIT`] tries.
    PresenceOverflow,
    /// No box pair realizing the target relation within
    /// [`PLACEMENT_RETRY_LIMIT`] tries.
    PlacementFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipReport {
    pub scene_index: usize,
    pub reason: SkipReason,
}

/// One generated scene: ground truth, detector-style proposals over the true
/// boxes, and the scene feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub truth: GroundTruthImage,
    pub proposals: ProposalSet,
    pub feature: SceneFeature,
    pub archetype: usize,
    /// Labels present, ascending; parallel to the boxes and proposals.
    pub true_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub scenes: Vec<SynthScene>,
    pub skipped: Vec<SkipReport>,
}

/// The stock benchmark: two scene types whose signature pairs share the same
/// layout while the detector confuses exactly those pairs, so spatial context
/// is informative but not sufficient on its own.
///
/// Marinas mostly hold sailboats with a gull above; ports mostly hold
/// ferries with a crane above. The detector leaks sailboat/ferry and
/// gull/crane mass into each other.
pub fn default_fixture() -> SynthConfig {
    SynthConfig {
        categories: vec![
            String::from("sailboat"),
            String::from("ferry"),
            String::from("gull"),
            String::from("crane"),
        ],
        image_count: 200,
        frame_width: 640.0,
        frame_height: 480.0,
        rules: vec![
            PlantedRule {
                first: 1,
                second: 3,
                relation: SpatialRelation::DisjointAbove,
                probability: 0.8,
            },
            PlantedRule {
                first: 2,
                second: 4,
                relation: SpatialRelation::DisjointAbove,
                probability: 0.8,
            },
        ],
        confusions: vec![(1, 2), (3, 4)],
        unary_noise: 0.45,
        archetypes: vec![
            Archetype {
                name: String::from("marina"),
                presence: vec![0.85, 0.25, 0.8, 0.2],
                feature_mean: vec![1.0, 0.0, 0.3],
            },
            Archetype {
                name: String::from("port"),
                presence: vec![0.25, 0.85, 0.2, 0.8],
                feature_mean: vec![0.0, 1.0, 0.7],
            },
        ],
        feature_noise: 0.25,
        seed: 7,
    }
}

fn draw_box(rng: &mut ChaCha8Rng, frame: &ImageFrame) -> BoundingBox {
    let rel_w = rng.gen_range(0.12..0.30);
    let rel_h = rng.gen_range(0.12..0.30);
    let w = rel_w * frame.width();
    let h = rel_h * frame.height();
    let x0 = rng.gen_range(0.0..(frame.width() - w));
    let y0 = rng.gen_range(0.0..(frame.height() - h));
    BoundingBox::new(x0, y0, x0 + w, y0 + h).expect("sampled box is valid by construction")
}

/// Generates `config.image_count` scenes from a single sequential RNG stream
/// seeded with `config.seed`. Scene indices that fail rejection sampling are
/// reported in `skipped` rather than silently retried, so the remaining
/// scenes' statistics stay exactly those of the conditioned generative law.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let space = CategorySpace::new(config.categories.clone()).expect("validated");
    let frame = ImageFrame::new(config.frame_width, config.frame_height).expect("validated");
    let k = space.foreground_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.image_count);
    let mut skipped = Vec::new();

    for scene_index in 0..config.image_count {
        let archetype = rng.gen_range(0..config.archetypes.len());
        let arch = &config.archetypes[archetype];

        let mut true_labels: Option<Vec<usize>> = None;
        for _ in 0..PRESENCE_RETRY_LIMIT {
            let mut drawn = Vec::new();
            for category in 1..=k {
                if rng.gen_bool(arch.presence[category - 1]) {
                    drawn.push(category);
                }
            }
            if drawn.len() <= MAX_OBJECTS_PER_SCENE {
                true_labels = Some(drawn);
                break;
            }
        }
        let Some(true_labels) = true_labels else {
            skipped.push(SkipReport {
                scene_index,
                reason: SkipReason::PresenceOverflow,
            });
            continue;
        };

        let boxes: Option<Vec<BoundingBox>> = match true_labels.len() {
            0 => Some(Vec::new()),
            1 => Some(vec![draw_box(&mut rng, &frame)]),
            _ => {
                let (i, j) = (true_labels[0], true_labels[1]);
                let (subject, relation) = match config.rule_for(i, j) {
                    Some(rule) => {
                        let relation = if rng.gen::<f64>() < rule.probability {
                            rule.relation
                        } else {
                            DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())]
                        };
                        (rule.first, relation)
                    }
                    None => (i, DIRECTIONS[rng.gen_range(0..DIRECTIONS.len())]),
                };
                let mut found = None;
                for _ in 0..PLACEMENT_RETRY_LIMIT {
                    let a = draw_box(&mut rng, &frame);
                    let b = draw_box(&mut rng, &frame);
                    if classify_relation(&a, &b, &frame) == relation {
                        found = Some((a, b));
                        break;
                    }
                }
                // a belongs to the pair's subject; store boxes in label order
                found.map(|(a, b)| if subject == i { vec![a, b] } else { vec![b, a] })
            }
        };
        let Some(boxes) = boxes else {
            skipped.push(SkipReport {
                scene_index,
                reason: SkipReason::PlacementFailure,
            });
            continue;
        };

        let mut rows = Vec::with_capacity(true_labels.len());
        for &label in &true_labels {
            let u: f64 = rng.gen();
            let leak = (u * 2.0 * config.unary_noise).min(0.98);
            let mut row = vec![0.0; k + 1];
            row[label] = 1.0 - leak;
            match config.confusion_partner(label) {
                Some(partner) => {
                    row[partner] = CONFUSION_LEAK * leak;
                    row[0] = (1.0 - CONFUSION_LEAK) * leak;
                }
                None => row[0] = leak,
            }
            rows.push(row);
        }

        let mut values = Vec::with_capacity(arch.feature_mean.len());
        for &mean in &arch.feature_mean {
            let z: f64 = rng.sample(StandardNormal);
            values.push(mean + config.feature_noise * z);
        }

        let image_id = format!("scene-{scene_index:06}");
        let objects: Vec<GroundTruthObject> = true_labels
            .iter()
            .zip(&boxes)
            .map(|(&label, &bbox)| GroundTruthObject {
                label,
                bbox,
                difficult: false,
            })
            .collect();
        let proposals = ProposalSet::new(image_id.clone(), frame, boxes, rows, k + 1)?;
        let feature = SceneFeature::new(image_id.clone(), values)?;
        scenes.push(SynthScene {
            truth: GroundTruthImage {
                image_id,
                frame,
                objects,
            },
            proposals,
            feature,
            archetype,
            true_labels,
        });
    }

    Ok(SynthOutput { scenes, skipped })
}

/// The exact pairwise likelihood tensor implied by a config: what
/// `learn_pairwise` converges to (at alpha -> 0) as the scene count grows.
///
/// Because presence is conditioned on at most two objects, the pair law is a
/// renormalized restriction of independent Bernoulli draws and every term is
/// available in closed form. Relations the generator never produces fall
/// back to the uniform likelihood, matching a smoothing-only learner.
pub fn plant_oracle_stats(config: &SynthConfig) -> Result<PairwiseModel, SynthError> {
    config.validate()?;
    let space = CategorySpace::new(config.categories.clone()).expect("validated");
    let k = space.foreground_count();
    let labels = k + 1;
    let idx = |a: usize, b: usize, r: SpatialRelation| (a * labels + b) * RELATION_COUNT + r.index();

    let mut expected = vec![0.0f64; labels * labels * RELATION_COUNT];
    let archetype_weight = 1.0 / config.archetypes.len() as f64;
    for arch in &config.archetypes {
        // weight of the subset holding exactly the listed categories
        let subset_weight = |present: &[usize]| -> f64 {
            let mut w = 1.0;
            for c in 1..=k {
                let p = arch.presence[c - 1];
                w *= if present.contains(&c) { p } else { 1.0 - p };
            }
            w
        };
        // total probability of drawing at most two objects, for conditioning
        let mut admissible = subset_weight(&[]);
        for i in 1..=k {
            admissible += subset_weight(&[i]);
        }
        for i in 1..=k {
            for j in (i + 1)..=k {
                admissible += subset_weight(&[i, j]);
            }
        }
        if admissible == 0.0 {
            continue;
        }
        for i in 1..=k {
            for j in (i + 1)..=k {
                let v = subset_weight(&[i, j]) / admissible;
                if v == 0.0 {
                    continue;
                }
                // an unruled pair behaves like a rule of probability zero:
                // uniform over the four directions, oriented (i, j)
                let (subject, reference, rule_relation, pi) = match config.rule_for(i, j) {
                    Some(rule) => (rule.first, rule.second, rule.relation, rule.probability),
                    None => (i, j, DIRECTIONS[0], 0.0),
                };
                for direction in DIRECTIONS {
                    let mut d = (1.0 - pi) / DIRECTIONS.len() as f64;
                    if direction == rule_relation {
                        d += pi;
                    }
                    let mass = archetype_weight * v * d;
                    expected[idx(subject, reference, direction)] += mass;
                    expected[idx(reference, subject, inverse_relation(direction))] += mass;
                }
            }
        }
    }

    let neutral = 1.0 / (k * k) as f64;
    let mut likelihood = vec![neutral; labels * labels * RELATION_COUNT];
    for r in SpatialRelation::ALL {
        let mut total = 0.0;
        for a in 1..=k {
            for b in 1..=k {
                total += expected[idx(a, b, r)];
            }
        }
        if total > 0.0 {
            for a in 1..=k {
                for b in 1..=k {
                    likelihood[idx(a, b, r)] = expected[idx(a, b, r)] / total;
                }
            }
        }
    }

    let counts = vec![0u64; labels * labels * RELATION_COUNT];
    Ok(PairwiseModel::from_parts(space, 0.0, counts, likelihood)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    Categories(crate::categories::CategoryError),
    NoImages,
    BadFrame { width: f64, height: f64 },
    BadNoise { name: &'static str, value: f64 },
    NoArchetypes,
    PresenceWidth { archetype: usize, expected: usize, got: usize },
    BadPresence { archetype: usize, category: usize, value: f64 },
    EmptyFeatureMean { archetype: usize },
    FeatureDimMismatch { archetype: usize, expected: usize, got: usize },
    BadRuleLabel { rule: usize, label: usize },
    BadRuleRelation { rule: usize },
    BadRuleProbability { rule: usize, value: f64 },
    DuplicateRulePair { rule: usize },
    BadConfusion { index: usize },
    DuplicateConfusion { index: usize },
    Proposal(CrfError),
    Feature(SceneError),
    Stats(crate::context_stats::ContextStatsError),
}

impl From<crate::categories::CategoryError> for SynthError {
    fn from(e: crate::categories::CategoryError) -> Self {
        SynthError::Categories(e)
    }
}

impl From<CrfError> for SynthError {
    fn from(e: CrfError) -> Self {
        SynthError::Proposal(e)
    }
}

impl From<SceneError> for SynthError {
    fn from(e: SceneError) -> Self {
        SynthError::Feature(e)
    }
}

impl From<crate::context_stats::ContextStatsError> for SynthError {
    fn from(e: crate::context_stats::ContextStatsError) -> Self {
        SynthError::Stats(e)
    }
}

impl core::fmt::Display for SynthError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SynthError::Categories(e) => write!(f, "{e}"),
            SynthError::NoImages => write!(f, "image_count must be at least 1"),
            SynthError::BadFrame { width, height } => {
                write!(f, "invalid frame {width} x {height}")
            }
            SynthError::BadNoise { name, value } => {
                write!(f, "invalid noise parameter {name} = {value}")
            }
            SynthError::NoArchetypes => write!(f, "at least one archetype is required"),
            SynthError::PresenceWidth {
                archetype,
                expected,
                got,
            } => write!(
                f,
                "archetype {archetype} lists {got} presence probabilities, expected {expected}"
            ),
            SynthError::BadPresence {
                archetype,
                category,
                value,
            } => write!(
                f,
                "archetype {archetype} presence for category {category} is {value}, outside [0, 1]"
            ),
            SynthError::EmptyFeatureMean { archetype } => {
                write!(f, "archetype {archetype} has an empty or non-finite feature mean")
            }
            SynthError::FeatureDimMismatch {
                archetype,
                expected,
                got,
            } => write!(
                f,
                "archetype {archetype} feature mean has dim {got}, expected {expected}"
            ),
            SynthError::BadRuleLabel { rule, label } => {
                write!(f, "rule {rule} references invalid label {label}")
            }
            SynthError::BadRuleRelation { rule } => write!(
                f,
                "rule {rule} must use a disjoint directional relation"
            ),
            SynthError::BadRuleProbability { rule, value } => {
                write!(f, "rule {rule} probability {value} is outside [0, 1]")
            }
            SynthError::DuplicateRulePair { rule } => {
                write!(f, "rule {rule} repeats an earlier category pair")
            }
            SynthError::BadConfusion { index } => {
                write!(f, "confusion pair {index} is invalid")
            }
            SynthError::DuplicateConfusion { index } => {
                write!(f, "confusion pair {index} reuses a label")
            }
            SynthError::Proposal(e) => write!(f, "{e}"),
            SynthError::Feature(e) => write!(f, "{e}"),
            SynthError::Stats(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SynthError {}
