//! Pairwise co-occurrence and spatial layout statistics.
//!
//! For every ordered pair of foreground categories `(a, b)` and relation `r`,
//! the model stores the smoothed likelihood of observing an object of `a`
//! with an object of `b` placed in relation `r` to it, normalized over all
//! foreground pairs within each relation. Pairs involving background carry a
//! neutral likelihood so background neither attracts nor repels anything.

use alloc::fmt;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::annotations::GroundTruthSet;
use crate::categories::{CategorySpace, BACKGROUND};
use crate::geometry::{classify_relation, inverse_relation, SpatialRelation, RELATION_COUNT};
use crate::math;

/// Smoothed pairwise layout statistics over a category space.
///
/// Tensors are dense, row-major over `(subject label, reference label,
/// relation)` with shape `(K + 1) x (K + 1) x 11`; label 0 is background.
///
/// Invariants, checked by the constructors:
/// * every likelihood is finite and nonnegative;
/// * for every relation, the foreground block sums to 1 within 1e-9;
/// * every entry with a background label equals `1 / K^2`;
/// * `P[a][b][r] = P[b][a][inverse_relation(r)]` within 1e-9, so the tensor
///   is one pair function and energies do not depend on which box of a pair
///   is treated as the subject. Learned models satisfy this exactly because
///   counting enumerates both directions of each object pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseModel {
    categories: CategorySpace,
    alpha: f64,
    counts: Vec<u64>,
    likelihood: Vec<f64>,
}

impl PairwiseModel {
    /// Rebuilds a model from stored parts, validating shape and invariants.
    /// `counts` record where the likelihoods came from and are not required
    /// to reproduce `likelihood` (an analytically planted model has none).
    pub fn from_parts(
        categories: CategorySpace,
        alpha: f64,
        counts: Vec<u64>,
        likelihood: Vec<f64>,
    ) -> Result<Self, ContextStatsError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(ContextStatsError::BadAlpha { alpha });
        }
        let labels = categories.label_count();
        let expected = labels * labels * RELATION_COUNT;
        if counts.len() != expected || likelihood.len() != expected {
            return Err(ContextStatsError::BadShape {
                expected,
                counts: counts.len(),
                likelihood: likelihood.len(),
            });
        }
        let model = Self {
            categories,
            alpha,
            counts,
            likelihood,
        };
        model.check_invariants()?;
        Ok(model)
    }

    fn check_invariants(&self) -> Result<(), ContextStatsError> {
        let labels = self.categories.label_count();
        let neutral = self.neutral_likelihood();
        for r in SpatialRelation::ALL {
            let mut sum = 0.0;
            for a in 0..labels {
                for b in 0..labels {
                    let v = self.likelihood(a, b, r);
                    if !v.is_finite() || v < 0.0 {
                        return Err(ContextStatsError::BadLikelihood {
                            subject: a,
                            reference: b,
                            relation: r,
                            value: v,
                        });
                    }
                    if a == BACKGROUND || b == BACKGROUND {
                        if (v - neutral).abs() > 1e-9 {
                            return Err(ContextStatsError::BadLikelihood {
                                subject: a,
                                reference: b,
                                relation: r,
                                value: v,
                            });
                        }
                    } else {
                        sum += v;
                    }
                }
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ContextStatsError::BadNormalization { relation: r, sum });
            }
        }
        // the tensor must describe a single pair function regardless of
        // which box is called the subject, or the field's energy would
        // depend on proposal order
        for r in SpatialRelation::ALL {
            let inv = inverse_relation(r);
            for a in 0..labels {
                for b in 0..labels {
                    let forward = self.likelihood(a, b, r);
                    let mirrored = self.likelihood(b, a, inv);
                    if (forward - mirrored).abs() > 1e-9 {
                        return Err(ContextStatsError::Asymmetric {
                            subject: a,
                            reference: b,
                            relation: r,
                            forward,
                            mirrored,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn idx(&self, subject: usize, reference: usize, relation: SpatialRelation) -> usize {
        let labels = self.categories.label_count();
        debug_assert!(subject < labels && reference < labels);
        (subject * labels + reference) * RELATION_COUNT + relation.index()
    }

    /// Likelihood of `(subject label, reference label, relation)`.
    #[inline]
    pub fn likelihood(&self, subject: usize, reference: usize, relation: SpatialRelation) -> f64 {
        self.likelihood[self.idx(subject, reference, relation)]
    }

    /// Raw observation count behind an entry.
    #[inline]
    pub fn count(&self, subject: usize, reference: usize, relation: SpatialRelation) -> u64 {
        self.counts[self.idx(subject, reference, relation)]
    }

    /// Neutral likelihood used for background pairings: `1 / K^2`.
    #[inline]
    pub fn neutral_likelihood(&self) -> f64 {
        let k = self.categories.foreground_count() as f64;
        1.0 / (k * k)
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn categories(&self) -> &CategorySpace {
        &self.categories
    }

    /// Dense count tensor, row-major `(subject, reference, relation)`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Dense likelihood tensor, row-major `(subject, reference, relation)`.
    pub fn likelihoods(&self) -> &[f64] {
        &self.likelihood
    }

    /// Total number of ordered ground-truth pairs the model was learned from.
    pub fn total_pair_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// True when no pair was ever observed: the model is pure smoothing and
    /// every foreground entry is uniform.
    pub fn is_smoothing_only(&self) -> bool {
        self.total_pair_count() == 0
    }
}

/// Negative log likelihood of a `(subject, reference, relation)` triple; the
/// pairwise potential of the CRF energy.
#[inline]
pub fn pairwise_potential(
    model: &PairwiseModel,
    subject: usize,
    reference: usize,
    relation: SpatialRelation,
) -> f64 {
    -math::ln(model.likelihood(subject, reference, relation))
}

/// Learns pairwise statistics from annotated images.
///
/// Every ordered pair of distinct objects `(o_i, o_j)` in an image increments
/// the count for `(label_i, label_j, classify_relation(box_i, box_j))`, so
/// each unordered pair contributes once in each direction and the tensor is
/// consistent without a symmetrization pass. Likelihoods use additive
/// smoothing per relation:
///
/// `P[a][b][r] = (count[a][b][r] + alpha) / (total[r] + alpha * K^2)`
///
/// where `total[r]` sums counts over foreground pairs for that relation.
/// An empty annotation set is legal and yields the uniform smoothing-only
/// model, flagged by [`PairwiseModel::is_smoothing_only`].
pub fn learn_pairwise(
    truth: &GroundTruthSet,
    categories: &CategorySpace,
    alpha: f64,
) -> Result<PairwiseModel, ContextStatsError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(ContextStatsError::BadAlpha { alpha });
    }
    let labels = categories.label_count();
    let k = categories.foreground_count();
    let mut counts = vec![0u64; labels * labels * RELATION_COUNT];

    for image in &truth.images {
        for obj in &image.objects {
            if obj.label == BACKGROUND || obj.label > k {
                return Err(ContextStatsError::BadLabel {
                    image_id: image.image_id.clone(),
                    label: obj.label,
                });
            }
        }
        for (i, oi) in image.objects.iter().enumerate() {
            for (j, oj) in image.objects.iter().enumerate() {
                if i == j {
                    continue;
                }
                let relation = classify_relation(&oi.bbox, &oj.bbox, &image.frame);
                let idx = (oi.label * labels + oj.label) * RELATION_COUNT + relation.index();
                counts[idx] += 1;
            }
        }
    }

    let kk = (k * k) as f64;
    let neutral = 1.0 / kk;
    let mut likelihood = vec![0.0f64; counts.len()];
    for r in SpatialRelation::ALL {
        let mut total = 0u64;
        for a in 1..labels {
            for b in 1..labels {
                total += counts[(a * labels + b) * RELATION_COUNT + r.index()];
            }
        }
        let denom = total as f64 + alpha * kk;
        for a in 0..labels {
            for b in 0..labels {
                let idx = (a * labels + b) * RELATION_COUNT + r.index();
                likelihood[idx] = if a == BACKGROUND || b == BACKGROUND {
                    neutral
                } else {
                    (counts[idx] as f64 + alpha) / denom
                };
            }
        }
    }

    PairwiseModel::from_parts(categories.clone(), alpha, counts, likelihood)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextStatsError {
    BadAlpha {
        alpha: f64,
    },
    BadLabel {
        image_id: String,
        label: usize,
    },
    BadShape {
        expected: usize,
        counts: usize,
        likelihood: usize,
    },
    BadLikelihood {
        subject: usize,
        reference: usize,
        relation: SpatialRelation,
        value: f64,
    },
    BadNormalization {
        relation: SpatialRelation,
        sum: f64,
    },
    Asymmetric {
        subject: usize,
        reference: usize,
        relation: SpatialRelation,
        forward: f64,
        mirrored: f64,
    },
}

impl fmt::Display for ContextStatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextStatsError::BadAlpha { alpha } => {
                write!(f, "smoothing alpha must be finite and positive, got {alpha}")
            }
            ContextStatsError::BadLabel { image_id, label } => {
                write!(
                    f,
                    "image \"{image_id}\" annotates label {label}, which is not a foreground label"
                )
            }
            ContextStatsError::BadShape {
                expected,
                counts,
                likelihood,
            } => write!(
                f,
                "tensor shape mismatch: expected {expected} entries, got {counts} counts and {likelihood} likelihoods"
            ),
            ContextStatsError::BadLikelihood {
                subject,
                reference,
                relation,
                value,
            } => write!(
                f,
                "likelihood for ({subject}, {reference}, {relation}) is invalid: {value}"
            ),
            ContextStatsError::BadNormalization { relation, sum } => write!(
                f,
                "foreground likelihoods for relation {relation} sum to {sum}, expected 1"
            ),
            ContextStatsError::Asymmetric {
                subject,
                reference,
                relation,
                forward,
                mirrored,
            } => write!(
                f,
                "likelihood ({subject}, {reference}, {relation}) = {forward} does not mirror its inverse entry {mirrored}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ContextStatsError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{GroundTruthImage, GroundTruthObject};
    use crate::geometry::{inverse_relation, BoundingBox, ImageFrame};
    use alloc::string::ToString;

    fn two_category_space() -> CategorySpace {
        CategorySpace::new(vec!["a".to_string(), "b".to_string()]).unwrap()
    }

    fn one_pair_set() -> GroundTruthSet {
        // object 2 sits to the left of object 1
        let frame = ImageFrame::new(200.0, 200.0).unwrap();
        GroundTruthSet::new(vec![GroundTruthImage {
            image_id: "img".to_string(),
            frame,
            objects: vec![
                GroundTruthObject {
                    label: 1,
                    bbox: BoundingBox::new(100.0, 50.0, 140.0, 90.0).unwrap(),
                    difficult: false,
                },
                GroundTruthObject {
                    label: 2,
                    bbox: BoundingBox::new(20.0, 50.0, 60.0, 90.0).unwrap(),
                    difficult: false,
                },
            ],
        }])
    }

    #[test]
    fn single_pair_counts_both_directions() {
        let model = learn_pairwise(&one_pair_set(), &two_category_space(), 1.0).unwrap();
        assert_eq!(model.count(1, 2, SpatialRelation::DisjointLeft), 1);
        assert_eq!(model.count(2, 1, SpatialRelation::DisjointRight), 1);
        assert_eq!(model.total_pair_count(), 2);

        // (1 + 1) / (1 + 1 * 4)
        assert!((model.likelihood(1, 2, SpatialRelation::DisjointLeft) - 0.4).abs() < 1e-12);
        // unseen pair under the same relation: (0 + 1) / 5
        assert!((model.likelihood(1, 1, SpatialRelation::DisjointLeft) - 0.2).abs() < 1e-12);
        // background pairings stay neutral at 1 / K^2
        assert!((model.likelihood(0, 1, SpatialRelation::DisjointLeft) - 0.25).abs() < 1e-12);
        assert!((model.likelihood(2, 0, SpatialRelation::FarApart) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn potentials_are_negative_log_likelihoods() {
        let model = learn_pairwise(&one_pair_set(), &two_category_space(), 1.0).unwrap();
        let p = pairwise_potential(&model, 1, 2, SpatialRelation::DisjointLeft);
        assert!((p - 0.916_290_731_874_155).abs() < 1e-12);
        let neutral = pairwise_potential(&model, 0, 2, SpatialRelation::Inside);
        assert!((neutral - 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn empty_annotations_yield_uniform_smoothing_model() {
        let model =
            learn_pairwise(&GroundTruthSet::default(), &two_category_space(), 1.0).unwrap();
        assert!(model.is_smoothing_only());
        for r in SpatialRelation::ALL {
            for a in 1..=2 {
                for b in 1..=2 {
                    assert!((model.likelihood(a, b, r) - 0.25).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_category_space_is_degenerate_but_valid() {
        let categories = CategorySpace::new(vec!["only".to_string()]).unwrap();
        let model = learn_pairwise(&GroundTruthSet::default(), &categories, 1.0).unwrap();
        // with K = 1 every entry is 1 and every potential is 0
        for r in SpatialRelation::ALL {
            assert!((model.likelihood(1, 1, r) - 1.0).abs() < 1e-12);
            assert_eq!(pairwise_potential(&model, 1, 1, r), 0.0);
        }
    }

    #[test]
    fn per_relation_normalization_and_consistency() {
        let model = learn_pairwise(&one_pair_set(), &two_category_space(), 0.5).unwrap();
        for r in SpatialRelation::ALL {
            let mut sum = 0.0;
            for a in 1..=2 {
                for b in 1..=2 {
                    sum += model.likelihood(a, b, r);
                }
            }
            assert!((sum - 1.0).abs() <= 1e-9, "relation {r}: {sum}");
            for a in 1..=2 {
                for b in 1..=2 {
                    assert_eq!(
                        model.likelihood(a, b, r),
                        model.likelihood(b, a, inverse_relation(r)),
                        "directed consistency for ({a}, {b}, {r})"
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let categories = two_category_space();
        assert!(matches!(
            learn_pairwise(&GroundTruthSet::default(), &categories, 0.0),
            Err(ContextStatsError::BadAlpha { .. })
        ));
        let mut set = one_pair_set();
        set.images[0].objects[0].label = 7;
        assert!(matches!(
            learn_pairwise(&set, &categories, 1.0),
            Err(ContextStatsError::BadLabel { label: 7, .. })
        ));
        set.images[0].objects[0].label = BACKGROUND;
        assert!(learn_pairwise(&set, &categories, 1.0).is_err());
    }

    #[test]
    fn more_observations_raise_the_entry() {
        let categories = two_category_space();
        let one = learn_pairwise(&one_pair_set(), &categories, 1.0).unwrap();
        let mut doubled = one_pair_set();
        let extra = doubled.images[0].clone();
        doubled.images.push(extra);
        let two = learn_pairwise(&doubled, &categories, 1.0).unwrap();
        assert!(
            two.likelihood(1, 2, SpatialRelation::DisjointLeft)
                > one.likelihood(1, 2, SpatialRelation::DisjointLeft)
        );
    }
}
