//! Ground-truth containers shared by statistics learning, scene prior
//! training, and evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::categories::CategorySpace;
use crate::geometry::{BoundingBox, ImageFrame};

/// One annotated object. `label` is a foreground id in the owning dataset's
/// category space; `difficult` marks objects the evaluation protocol neither
/// requires nor penalizes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub label: usize,
    pub bbox: BoundingBox,
    pub difficult: bool,
}

/// All annotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthImage {
    pub image_id: String,
    pub frame: ImageFrame,
    pub objects: Vec<GroundTruthObject>,
}

/// A collection of annotated images in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub images: Vec<GroundTruthImage>,
}

impl GroundTruthSet {
    pub fn new(images: Vec<GroundTruthImage>) -> Self {
        Self { images }
    }

    /// Total object count across images.
    pub fn object_count(&self) -> usize {
        self.images.iter().map(|img| img.objects.len()).sum()
    }

    /// Per-image presence bits over the foreground labels of `categories`:
    /// entry `k - 1` is true when the image holds at least one object with
    /// label `k`. Objects marked difficult still count as present.
    pub fn presence(&self, categories: &CategorySpace) -> Vec<Vec<bool>> {
        let k = categories.foreground_count();
        self.images
            .iter()
            .map(|img| {
                let mut row = alloc::vec![false; k];
                for obj in &img.objects {
                    if (1..=k).contains(&obj.label) {
                        row[obj.label - 1] = true;
                    }
                }
                row
            })
            .collect()
    }
}
