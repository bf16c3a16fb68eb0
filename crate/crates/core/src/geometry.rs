//! Axis-aligned boxes, image frames, and the spatial relation vocabulary.
//!
//! Coordinates follow the image convention: `x` grows rightward and `y` grows
//! downward, so "above" means smaller `y`. A relation always describes where a
//! reference box sits relative to a subject box; `classify_relation(a, b, f)`
//! reads as "where is `b`, seen from `a`".

use alloc::fmt;

/// Normalized center distance beyond which a non-intersecting pair is
/// considered far apart rather than directional.
pub const FAR_THRESHOLD: f64 = 0.5;

/// Number of distinct spatial relations.
pub const RELATION_COUNT: usize = 11;

/// Axis-aligned box in pixel coordinates with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite corners and empty extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let all_finite =
            x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !all_finite {
            return Err(GeometryError::NonFiniteBox);
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::EmptyBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Center point as `(x, y)`.
    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area of the overlap region; zero when the boxes only touch or are
    /// separated.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Containment with closed inequalities: a box contains itself.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    /// Intersects the box with the frame rectangle. Returns `None` when
    /// nothing with positive area remains.
    pub fn clip(&self, frame: &ImageFrame) -> Option<BoundingBox> {
        let x_min = self.x_min.max(0.0);
        let y_min = self.y_min.max(0.0);
        let x_max = self.x_max.min(frame.width());
        let y_max = self.y_max.min(frame.height());
        BoundingBox::new(x_min, y_min, x_max, y_max).ok()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    inter / (a.area() + b.area() - inter)
}

/// Image extent in pixels, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageFrame {
    width: f64,
    height: f64,
}

impl ImageFrame {
    pub fn new(width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(GeometryError::BadFrame { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.height
    }

    /// Diagonal length, used to normalize center distances.
    #[inline]
    pub fn diagonal(&self) -> f64 {
        crate::math::sqrt(self.width * self.width + self.height * self.height)
    }
}

/// Relative layout of a reference box with respect to a subject box.
///
/// The disjoint family covers pairs with zero overlap area; the remaining
/// variants cover pairs that genuinely intersect. `Outside` means the subject
/// surrounds the reference, `Inside` means the reference surrounds the
/// subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialRelation {
    FarApart,
    DisjointAbove,
    DisjointBelow,
    DisjointLeft,
    DisjointRight,
    Inside,
    Outside,
    OverlapAbove,
    OverlapBelow,
    OverlapLeft,
    OverlapRight,
}

impl SpatialRelation {
    /// Every relation, in index order.
    pub const ALL: [SpatialRelation; RELATION_COUNT] = [
        SpatialRelation::FarApart,
        SpatialRelation::DisjointAbove,
        SpatialRelation::DisjointBelow,
        SpatialRelation::DisjointLeft,
        SpatialRelation::DisjointRight,
        SpatialRelation::Inside,
        SpatialRelation::Outside,
        SpatialRelation::OverlapAbove,
        SpatialRelation::OverlapBelow,
        SpatialRelation::OverlapLeft,
        SpatialRelation::OverlapRight,
    ];

    /// Stable index in `0..RELATION_COUNT`, used for tensor addressing.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            SpatialRelation::FarApart => 0,
            SpatialRelation::DisjointAbove => 1,
            SpatialRelation::DisjointBelow => 2,
            SpatialRelation::DisjointLeft => 3,
            SpatialRelation::DisjointRight => 4,
            SpatialRelation::Inside => 5,
            SpatialRelation::Outside => 6,
            SpatialRelation::OverlapAbove => 7,
            SpatialRelation::OverlapBelow => 8,
            SpatialRelation::OverlapLeft => 9,
            SpatialRelation::OverlapRight => 10,
        }
    }

    pub fn from_index(index: usize) -> Option<SpatialRelation> {
        SpatialRelation::ALL.get(index).copied()
    }

    /// Stable kebab-case name, also used by the file formats.
    pub fn name(self) -> &'static str {
        match self {
            SpatialRelation::FarApart => "far-apart",
            SpatialRelation::DisjointAbove => "disjoint-above",
            SpatialRelation::DisjointBelow => "disjoint-below",
            SpatialRelation::DisjointLeft => "disjoint-left",
            SpatialRelation::DisjointRight => "disjoint-right",
            SpatialRelation::Inside => "inside",
            SpatialRelation::Outside => "outside",
            SpatialRelation::OverlapAbove => "overlap-above",
            SpatialRelation::OverlapBelow => "overlap-below",
            SpatialRelation::OverlapLeft => "overlap-left",
            SpatialRelation::OverlapRight => "overlap-right",
        }
    }

    pub fn from_name(name: &str) -> Option<SpatialRelation> {
        SpatialRelation::ALL.iter().copied().find(|r| r.name() == name)
    }
}

impl fmt::Display for SpatialRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The relation seen from the other box's point of view.
///
/// Swapping subject and reference flips directions, exchanges `Inside` and
/// `Outside`, and fixes `FarApart`. The function is an involution.
pub fn inverse_relation(r: SpatialRelation) -> SpatialRelation {
    match r {
        SpatialRelation::FarApart => SpatialRelation::FarApart,
        SpatialRelation::DisjointAbove => SpatialRelation::DisjointBelow,
        SpatialRelation::DisjointBelow => SpatialRelation::DisjointAbove,
        SpatialRelation::DisjointLeft => SpatialRelation::DisjointRight,
        SpatialRelation::DisjointRight => SpatialRelation::DisjointLeft,
        SpatialRelation::Inside => SpatialRelation::Outside,
        SpatialRelation::Outside => SpatialRelation::Inside,
        SpatialRelation::OverlapAbove => SpatialRelation::OverlapBelow,
        SpatialRelation::OverlapBelow => SpatialRelation::OverlapAbove,
        SpatialRelation::OverlapLeft => SpatialRelation::OverlapRight,
        SpatialRelation::OverlapRight => SpatialRelation::OverlapLeft,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Above,
    Below,
    Left,
    Right,
}

/// Quadrant of a displacement vector, split along the two diagonals.
///
/// Sectors are half open (right owns the 45 degree ray, below owns 135, left
/// owns 225, above owns 315) so every nonzero vector lands in exactly one
/// quadrant and negation maps each quadrant onto its opposite using only exact
/// comparisons. The zero vector resolves to `Above` by fixed priority.
fn quadrant(dx: f64, dy: f64) -> Direction {
    if dx > 0.0 && dy <= dx && dy > -dx {
        Direction::Right
    } else if dy > 0.0 && dy > dx && dy >= -dx {
        Direction::Below
    } else if dx < 0.0 && dy >= dx && dy < -dx {
        Direction::Left
    } else {
        Direction::Above
    }
}

/// Classifies where `reference` sits relative to `subject` inside `frame`.
///
/// Pairs with zero overlap area are far apart when their center distance
/// exceeds [`FAR_THRESHOLD`] times the frame diagonal and directional
/// otherwise. Intersecting pairs are containment (`Outside` when the subject
/// surrounds the reference, checked first so identical boxes are `Outside`;
/// `Inside` for the converse) or directional overlap. Directions come from
/// the center displacement via [`quadrant`].
pub fn classify_relation(
    subject: &BoundingBox,
    reference: &BoundingBox,
    frame: &ImageFrame,
) -> SpatialRelation {
    let (sx, sy) = subject.center();
    let (rx, ry) = reference.center();
    let dx = rx - sx;
    let dy = ry - sy;

    if subject.intersection_area(reference) > 0.0 {
        if subject.contains(reference) {
            return SpatialRelation::Outside;
        }
        if reference.contains(subject) {
            return SpatialRelation::Inside;
        }
        match quadrant(dx, dy) {
            Direction::Above => SpatialRelation::OverlapAbove,
            Direction::Below => SpatialRelation::OverlapBelow,
            Direction::Left => SpatialRelation::OverlapLeft,
            Direction::Right => SpatialRelation::OverlapRight,
        }
    } else {
        let distance = crate::math::sqrt(dx * dx + dy * dy);
        if distance > FAR_THRESHOLD * frame.diagonal() {
            return SpatialRelation::FarApart;
        }
        match quadrant(dx, dy) {
            Direction::Above => SpatialRelation::DisjointAbove,
            Direction::Below => SpatialRelation::DisjointBelow,
            Direction::Left => SpatialRelation::DisjointLeft,
            Direction::Right => SpatialRelation::DisjointRight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    NonFiniteBox,
    EmptyBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    BadFrame {
        width: f64,
        height: f64,
    },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NonFiniteBox => write!(f, "bounding box has non-finite coordinates"),
            GeometryError::EmptyBox {
                x_min,
                y_min,
                x_max,
                y_max,
            } => write!(
                f,
                "bounding box [{x_min}, {y_min}, {x_max}, {y_max}] has no positive extent"
            ),
            GeometryError::BadFrame { width, height } => {
                write!(f, "image frame {width}x{height} is not strictly positive")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeometryError {}
