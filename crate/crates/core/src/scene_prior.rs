//! Scene prior: one-vs-rest logistic regression over a whole-image feature
//! vector, and the global potential it induces on labels.
//!
//! The model holds one independent binary regressor per foreground category.
//! Training is full-batch gradient descent on the L2-regularized mean
//! cross-entropy, which is deterministic from a zero initialization; the
//! `seed` in [`TrainConfig`] is accepted for forward compatibility with
//! stochastic trainers and currently unused.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::categories::CategorySpace;
use crate::math;

/// Presence probabilities are clamped to `[EPS, 1 - EPS]` before `-ln` so the
/// global potential stays finite even for saturated regressors.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

/// Global potential of the background label: `-ln 0.5`, a neutral constant so
/// scene context neither favors nor penalizes "no object".
pub const BACKGROUND_GLOBAL_POTENTIAL: f64 = core::f64::consts::LN_2;

/// A whole-image feature vector, consumed as an opaque dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeature {
    image_id: String,
    values: Vec<f64>,
}

impl SceneFeature {
    pub fn new(image_id: String, values: Vec<f64>) -> Result<Self, SceneError> {
        if values.is_empty() {
            return Err(SceneError::EmptyFeature { image_id });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFiniteFeature { image_id });
        }
        Ok(Self { image_id, values })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Per-category logistic regression weights plus the shared category space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePriorModel {
    categories: CategorySpace,
    dim: usize,
    lambda: f64,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl ScenePriorModel {
    /// Rebuilds a model from stored parts. `weights` is row-major with one
    /// row of `dim` entries per foreground category, `biases` one entry per
    /// foreground category.
    pub fn from_parts(
        categories: CategorySpace,
        dim: usize,
        lambda: f64,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self, SceneError> {
        if dim == 0 {
            return Err(SceneError::BadDim);
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(SceneError::BadConfig {
                name: "lambda",
                value: lambda,
            });
        }
        let k = categories.foreground_count();
        if weights.len() != k * dim {
            return Err(SceneError::WeightCount {
                expected: k * dim,
                got: weights.len(),
            });
        }
        if biases.len() != k {
            return Err(SceneError::BiasCount {
                expected: k,
                got: biases.len(),
            });
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(SceneError::NonFiniteParameter);
        }
        Ok(Self {
            categories,
            dim,
            lambda,
            weights,
            biases,
        })
    }

    pub fn categories(&self) -> &CategorySpace {
        &self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Weight row of foreground label `label` (1-based).
    pub fn weights_of(&self, label: usize) -> &[f64] {
        let row = label - 1;
        &self.weights[row * self.dim..(row + 1) * self.dim]
    }

    pub fn bias_of(&self, label: usize) -> f64 {
        self.biases[label - 1]
    }

    /// Flat row-major weight matrix, one row per foreground category.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }
}

/// Hyperparameters for [`train_scene_prior`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// L2 strength on weights (biases are not regularized).
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Reserved: initialization is deterministic zeros, so this currently
    /// has no effect on the result.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 500,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Diagnostics emitted by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Total regularized loss (summed over categories) before the first
    /// update and after every epoch; length `epochs + 1`.
    pub epoch_loss: Vec<f64>,
    /// Foreground labels whose presence target is constant across the
    /// training set (all present or all absent). These train normally but
    /// carry no discriminative signal.
    pub constant_presence: Vec<usize>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_loss.last().expect("loss recorded at epoch 0")
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + math::exp(-z))
    } else {
        let e = math::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow for large `|z|`.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + math::ln_1p(math::exp(-z))
    } else {
        math::ln_1p(math::exp(z))
    }
}

/// Regularized loss of one binary regressor:
/// mean cross-entropy over samples plus `lambda / 2 * ||weights||^2`
/// (bias excluded from the penalty).
///
/// Exposed so the analytic gradient can be checked against finite
/// differences of this exact function.
pub fn logistic_loss(
    weights: &[f64],
    bias: f64,
    lambda: f64,
    features: &[Vec<f64>],
    targets: &[bool],
) -> f64 {
    assert_eq!(features.len(), targets.len());
    assert!(!features.is_empty());
    let n = features.len() as f64;
    let mut data = 0.0;
    for (f, &y) in features.iter().zip(targets) {
        debug_assert_eq!(f.len(), weights.len());
        let z = dot(weights, f) + bias;
        // softplus(z) - y*z is the stable form of the cross-entropy
        data += softplus(z) - if y { z } else { 0.0 };
    }
    let penalty = 0.5 * lambda * weights.iter().map(|w| w * w).sum::<f64>();
    data / n + penalty
}

/// Analytic gradient of [`logistic_loss`] with respect to `(weights, bias)`.
pub fn logistic_gradient(
    weights: &[f64],
    bias: f64,
    lambda: f64,
    features: &[Vec<f64>],
    targets: &[bool],
) -> (Vec<f64>, f64) {
    assert_eq!(features.len(), targets.len());
    assert!(!features.is_empty());
    let n = features.len() as f64;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (f, &y) in features.iter().zip(targets) {
        let z = dot(weights, f) + bias;
        let residual = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, x) in grad_w.iter_mut().zip(f) {
            *g += residual * x;
        }
        grad_b += residual;
    }
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + lambda * w;
    }
    (grad_w, grad_b / n)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains one logistic regressor per foreground category by full-batch
/// gradient descent from zero initialization.
///
/// `presence[i][k - 1]` states whether category `k` is present in the image
/// of `features[i]`. Training is fully deterministic for fixed inputs and
/// config.
pub fn train_scene_prior(
    features: &[SceneFeature],
    presence: &[Vec<bool>],
    categories: &CategorySpace,
    cfg: &TrainConfig,
) -> Result<(ScenePriorModel, TrainingReport), SceneError> {
    if features.is_empty() {
        return Err(SceneError::Empty);
    }
    if features.len() != presence.len() {
        return Err(SceneError::LengthMismatch {
            features: features.len(),
            presence: presence.len(),
        });
    }
    if !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(SceneError::BadConfig {
            name: "lambda",
            value: cfg.lambda,
        });
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 {
        return Err(SceneError::BadConfig {
            name: "learning_rate",
            value: cfg.learning_rate,
        });
    }
    let dim = features[0].dim();
    for f in features {
        if f.dim() != dim {
            return Err(SceneError::DimensionMismatch {
                image_id: String::from(f.image_id()),
                expected: dim,
                got: f.dim(),
            });
        }
    }
    let k = categories.foreground_count();
    for (i, row) in presence.iter().enumerate() {
        if row.len() != k {
            return Err(SceneError::BadPresenceRow {
                index: i,
                expected: k,
                got: row.len(),
            });
        }
    }

    let inputs: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let targets: Vec<Vec<bool>> = (0..k)
        .map(|c| presence.iter().map(|row| row[c]).collect())
        .collect();

    let mut constant_presence = Vec::new();
    for (c, t) in targets.iter().enumerate() {
        if t.iter().all(|&y| y) || t.iter().all(|&y| !y) {
            constant_presence.push(c + 1);
        }
    }

    let mut weights = vec![0.0f64; k * dim];
    let mut biases = vec![0.0f64; k];
    let total_loss = |weights: &[f64], biases: &[f64]| -> f64 {
        (0..k)
            .map(|c| {
                logistic_loss(
                    &weights[c * dim..(c + 1) * dim],
                    biases[c],
                    cfg.lambda,
                    &inputs,
                    &targets[c],
                )
            })
            .sum()
    };

    let mut epoch_loss = Vec::with_capacity(cfg.epochs + 1);
    epoch_loss.push(total_loss(&weights, &biases));
    for _ in 0..cfg.epochs {
        for c in 0..k {
            let row = &weights[c * dim..(c + 1) * dim];
            let (grad_w, grad_b) = logistic_gradient(row, biases[c], cfg.lambda, &inputs, &targets[c]);
            for (w, g) in weights[c * dim..(c + 1) * dim].iter_mut().zip(&grad_w) {
                *w -= cfg.learning_rate * g;
            }
            biases[c] -= cfg.learning_rate * grad_b;
        }
        epoch_loss.push(total_loss(&weights, &biases));
    }

    let model = ScenePriorModel::from_parts(categories.clone(), dim, cfg.lambda, weights, biases)?;
    let report = TrainingReport {
        epoch_loss,
        constant_presence,
    };
    Ok((model, report))
}

/// Per-category presence probabilities `sigmoid(w_k . f + b_k)`, one entry
/// per foreground category.
pub fn predict_presence(model: &ScenePriorModel, f: &SceneFeature) -> Result<Vec<f64>, SceneError> {
    if f.dim() != model.dim {
        return Err(SceneError::DimensionMismatch {
            image_id: String::from(f.image_id()),
            expected: model.dim,
            got: f.dim(),
        });
    }
    let k = model.categories.foreground_count();
    let mut out = Vec::with_capacity(k);
    for label in 1..=k {
        let z = dot(model.weights_of(label), f.values()) + model.bias_of(label);
        out.push(sigmoid(z));
    }
    Ok(out)
}

/// Global potentials for every label `0..=K`: index 0 is the neutral
/// background constant, index `k` is `-ln(clamp(p_k))`.
pub fn global_potentials(model: &ScenePriorModel, f: &SceneFeature) -> Result<Vec<f64>, SceneError> {
    let probs = predict_presence(model, f)?;
    let mut out = Vec::with_capacity(probs.len() + 1);
    out.push(BACKGROUND_GLOBAL_POTENTIAL);
    for p in probs {
        let clamped = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
        out.push(-math::ln(clamped));
    }
    Ok(out)
}

/// Global potential of one label; label 0 is background.
pub fn global_potential(
    model: &ScenePriorModel,
    f: &SceneFeature,
    label: usize,
) -> Result<f64, SceneError> {
    let k = model.categories.foreground_count();
    if label > k {
        return Err(SceneError::BadLabel { label, max: k });
    }
    Ok(global_potentials(model, f)?[label])
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    Empty,
    EmptyFeature { image_id: String },
    NonFiniteFeature { image_id: String },
    LengthMismatch { features: usize, presence: usize },
    DimensionMismatch { image_id: String, expected: usize, got: usize },
    BadPresenceRow { index: usize, expected: usize, got: usize },
    BadConfig { name: &'static str, value: f64 },
    BadDim,
    BadLabel { label: usize, max: usize },
    WeightCount { expected: usize, got: usize },
    BiasCount { expected: usize, got: usize },
    NonFiniteParameter,
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::Empty => write!(f, "at least one training image is required"),
            SceneError::EmptyFeature { image_id } => {
                write!(f, "feature vector for image \"{image_id}\" is empty")
            }
            SceneError::NonFiniteFeature { image_id } => {
                write!(f, "feature vector for image \"{image_id}\" has a non-finite entry")
            }
            SceneError::LengthMismatch { features, presence } => write!(
                f,
                "{features} feature vectors but {presence} presence rows"
            ),
            SceneError::DimensionMismatch {
                image_id,
                expected,
                got,
            } => write!(
                f,
                "feature for image \"{image_id}\" has dimension {got}, expected {expected}"
            ),
            SceneError::BadPresenceRow {
                index,
                expected,
                got,
            } => write!(
                f,
                "presence row {index} has {got} entries, expected {expected}"
            ),
            SceneError::BadConfig { name, value } => {
                write!(f, "invalid training parameter {name} = {value}")
            }
            SceneError::BadDim => write!(f, "feature dimension must be positive"),
            SceneError::BadLabel { label, max } => {
                write!(f, "label {label} out of range 0..={max}")
            }
            SceneError::WeightCount { expected, got } => {
                write!(f, "weight matrix has {got} entries, expected {expected}")
            }
            SceneError::BiasCount { expected, got } => {
                write!(f, "bias vector has {got} entries, expected {expected}")
            }
            SceneError::NonFiniteParameter => write!(f, "model parameters must be finite"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SceneError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(k: usize) -> CategorySpace {
        let names: Vec<String> = (0..k).map(|i| alloc::format!("cat-{i}")).collect();
        CategorySpace::new(names).unwrap()
    }

    fn feature(id: &str, values: &[f64]) -> SceneFeature {
        SceneFeature::new(id.to_string(), values.to_vec()).unwrap()
    }

    #[test]
    fn zero_epochs_is_the_untrained_model() {
        let feats = vec![feature("a", &[1.0, 2.0]), feature("b", &[-1.0, 0.5])];
        let presence = vec![vec![true], vec![false]];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (model, report) = train_scene_prior(&feats, &presence, &space(1), &cfg).unwrap();
        assert!(model.weights().iter().all(|&w| w == 0.0));
        assert_eq!(report.epoch_loss.len(), 1);
        let p = predict_presence(&model, &feats[0]).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn separable_data_trains_a_positive_weight() {
        let feats = vec![feature("pos", &[1.0]), feature("neg", &[-1.0])];
        let presence = vec![vec![true], vec![false]];
        let cfg = TrainConfig {
            lambda: 0.0,
            epochs: 200,
            learning_rate: 0.5,
            seed: 0,
        };
        let (model, report) = train_scene_prior(&feats, &presence, &space(1), &cfg).unwrap();
        assert!(model.weights_of(1)[0] > 0.0);
        assert!(predict_presence(&model, &feats[0]).unwrap()[0] > 0.5);
        assert!(report.final_loss() < report.epoch_loss[0]);
        assert!(report.constant_presence.is_empty());
    }

    #[test]
    fn training_loss_is_monotone_at_default_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats: Vec<SceneFeature> = (0..12)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                feature(&alloc::format!("img-{i}"), &v)
            })
            .collect();
        let presence: Vec<Vec<bool>> = (0..12)
            .map(|_| (0..2).map(|_| rng.gen_bool(0.5)).collect())
            .collect();
        let (_, report) =
            train_scene_prior(&feats, &presence, &space(2), &TrainConfig::default()).unwrap();
        assert_eq!(report.epoch_loss.len(), 501);
        for w in report.epoch_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let dim = rng.gen_range(1..5);
            let n = rng.gen_range(2..7);
            let weights: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: f64 = rng.gen_range(-1.0..1.0);
            let lambda: f64 = rng.gen_range(0.0..0.5);
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let targets: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();

            let (grad_w, grad_b) = logistic_gradient(&weights, bias, lambda, &feats, &targets);
            let h = 1e-6;
            for d in 0..dim {
                let mut plus = weights.clone();
                let mut minus = weights.clone();
                plus[d] += h;
                minus[d] -= h;
                let numeric = (logistic_loss(&plus, bias, lambda, &feats, &targets)
                    - logistic_loss(&minus, bias, lambda, &feats, &targets))
                    / (2.0 * h);
                let denom = grad_w[d].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (grad_w[d] - numeric).abs() / denom <= 1e-5,
                    "weight {d}: analytic {} vs numeric {numeric}",
                    grad_w[d]
                );
            }
            let numeric_b = (logistic_loss(&weights, bias + h, lambda, &feats, &targets)
                - logistic_loss(&weights, bias - h, lambda, &feats, &targets))
                / (2.0 * h);
            let denom = grad_b.abs().max(numeric_b.abs()).max(1e-8);
            assert!((grad_b - numeric_b).abs() / denom <= 1e-5);
        }
    }

    #[test]
    fn prediction_closed_forms() {
        let model = ScenePriorModel::from_parts(space(1), 1, 0.0, vec![2.0], vec![-1.0]).unwrap();
        let p = predict_presence(&model, &feature("x", &[1.0])).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let zero = ScenePriorModel::from_parts(space(1), 1, 0.0, vec![1.0], vec![0.0]).unwrap();
        let p = predict_presence(&zero, &feature("x", &[0.0])).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn global_potential_clamps_and_stays_finite() {
        // saturated regressor: sigmoid(50) rounds to 1.0 in f64
        let model = ScenePriorModel::from_parts(space(1), 1, 0.0, vec![50.0], vec![0.0]).unwrap();
        let f = feature("x", &[1.0]);
        let phi = global_potential(&model, &f, 1).unwrap();
        let expected = -(1.0f64 - PROBABILITY_CLAMP).ln();
        assert!(phi.is_finite());
        assert!((phi - expected).abs() < 1e-15);

        // the other extreme clamps at -ln(eps)
        let low = ScenePriorModel::from_parts(space(1), 1, 0.0, vec![-50.0], vec![0.0]).unwrap();
        let phi = global_potential(&low, &f, 1).unwrap();
        assert!((phi - -(PROBABILITY_CLAMP.ln())).abs() < 1e-12);
    }

    #[test]
    fn background_potential_is_the_neutral_constant() {
        let model = ScenePriorModel::from_parts(space(2), 3, 0.0, vec![9.0; 6], vec![9.0; 2]).unwrap();
        let f = feature("x", &[0.1, 0.2, 0.3]);
        assert_eq!(
            global_potential(&model, &f, 0).unwrap(),
            BACKGROUND_GLOBAL_POTENTIAL
        );
        // a probability of exactly 0.5 gives the same value for foreground
        let zero = ScenePriorModel::from_parts(space(1), 1, 0.0, vec![0.0], vec![0.0]).unwrap();
        let phi = global_potential(&zero, &feature("x", &[1.0]), 1).unwrap();
        assert!((phi - BACKGROUND_GLOBAL_POTENTIAL).abs() < 1e-15);
    }

    #[test]
    fn constant_presence_categories_are_flagged() {
        let feats = vec![feature("a", &[1.0]), feature("b", &[2.0])];
        let presence = vec![vec![true, false], vec![true, true]];
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let (_, report) = train_scene_prior(&feats, &presence, &space(2), &cfg).unwrap();
        assert_eq!(report.constant_presence, vec![1]);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let categories = space(1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_scene_prior(&[], &[], &categories, &cfg),
            Err(SceneError::Empty)
        ));
        let feats = vec![feature("a", &[1.0]), feature("weird", &[1.0, 2.0])];
        let presence = vec![vec![true], vec![false]];
        match train_scene_prior(&feats, &presence, &categories, &cfg) {
            Err(SceneError::DimensionMismatch { image_id, .. }) => assert_eq!(image_id, "weird"),
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
        assert!(SceneFeature::new("x".to_string(), vec![f64::NAN]).is_err());
        assert!(SceneFeature::new("x".to_string(), vec![]).is_err());

        let model = ScenePriorModel::from_parts(categories, 1, 0.0, vec![0.0], vec![0.0]).unwrap();
        let wide = feature("wide", &[1.0, 2.0]);
        assert!(predict_presence(&model, &wide).is_err());
        assert!(matches!(
            global_potential(&model, &feature("x", &[0.0]), 9),
            Err(SceneError::BadLabel { label: 9, .. })
        ));
    }

    #[test]
    fn model_from_parts_validates_shapes() {
        let categories = space(2);
        assert!(ScenePriorModel::from_parts(categories.clone(), 0, 0.0, vec![], vec![]).is_err());
        assert!(
            ScenePriorModel::from_parts(categories.clone(), 2, 0.0, vec![0.0; 3], vec![0.0; 2])
                .is_err()
        );
        assert!(
            ScenePriorModel::from_parts(categories.clone(), 2, 0.0, vec![0.0; 4], vec![0.0; 1])
                .is_err()
        );
        assert!(ScenePriorModel::from_parts(
            categories.clone(),
            2,
            f64::NAN,
            vec![0.0; 4],
            vec![0.0; 2]
        )
        .is_err());
        assert!(ScenePriorModel::from_parts(
            categories,
            2,
            0.0,
            vec![0.0, f64::INFINITY, 0.0, 0.0],
            vec![0.0; 2]
        )
        .is_err());
    }
}
