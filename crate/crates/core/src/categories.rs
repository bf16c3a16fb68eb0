//! The label vocabulary: an ordered list of foreground categories plus the
//! implicit background label 0.

use alloc::fmt;
use alloc::string::String;
use alloc::vec::Vec;

/// Label id reserved for background.
pub const BACKGROUND: usize = 0;

/// Ordered foreground category names. Foreground labels are `1..=K` in list
/// order; label 0 is always background and never appears in the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpace {
    names: Vec<String>,
}

impl CategorySpace {
    /// Builds a space from foreground names, which must be nonempty, unique,
    /// and at least one.
    pub fn new(names: Vec<String>) -> Result<Self, CategoryError> {
        if names.is_empty() {
            return Err(CategoryError::Empty);
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(CategoryError::BlankName { position: i });
            }
            if names[..i].contains(name) {
                return Err(CategoryError::DuplicateName { name: name.clone() });
            }
        }
        Ok(Self { names })
    }

    /// Number of foreground categories (`K`).
    #[inline]
    pub fn foreground_count(&self) -> usize {
        self.names.len()
    }

    /// Number of labels including background (`K + 1`).
    #[inline]
    pub fn label_count(&self) -> usize {
        self.names.len() + 1
    }

    /// Foreground label id for a name, in `1..=K`.
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    /// Name for a foreground label id.
    pub fn name_of(&self, label: usize) -> Option<&str> {
        if label == BACKGROUND {
            return None;
        }
        self.names.get(label - 1).map(String::as_str)
    }

    /// Foreground names in label order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(label, name)` pairs for the foreground labels.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i + 1, n.as_str()))
    }

    /// True when `label` is a valid id in this space (background included).
    #[inline]
    pub fn is_valid_label(&self, label: usize) -> bool {
        label < self.label_count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CategoryError {
    Empty,
    BlankName { position: usize },
    DuplicateName { name: String },
}

impl fmt::Display for CategoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CategoryError::Empty => write!(f, "category space needs at least one category"),
            CategoryError::BlankName { position } => {
                write!(f, "category name at position {position} is blank")
            }
            CategoryError::DuplicateName { name } => {
                write!(f, "duplicate category name \"{name}\"")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CategoryError {}
