//! Fixed class enumeration for the nine Circle-of-Willis vessel segments
//! plus background and the non-annotated class.

use crate::error::{Error, Result};

/// Total number of classes: background + 9 vessels + non-annotated.
pub const NUM_CLASSES: usize = 11;

pub const BACKGROUND: u8 = 0;
pub const NON_ANNOTATED: u8 = 10;
pub const FIRST_VESSEL: u8 = 1;
pub const LAST_VESSEL: u8 = 9;

/// Class ids of the nine labeled vessel segments (1..=9).
pub fn vessel_classes() -> impl Iterator<Item = u8> {
    FIRST_VESSEL..=LAST_VESSEL
}

const COW_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "BA",
    "RICA",
    "LICA",
    "RMCA",
    "LMCA",
    "RACA",
    "LACA",
    "RPCA",
    "LPCA",
    "non-annotated",
];

/// Ordered list of class names; id = position in the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    /// The fixed Circle-of-Willis enumeration used throughout the toolkit.
    pub fn circle_of_willis() -> Self {
        ClassMap {
            names: COW_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Build from an explicit name list; must have exactly [`NUM_CLASSES`]
    /// unique entries.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != NUM_CLASSES {
            return Err(Error::invariant(format!(
                "class map must have {} entries, got {}",
                NUM_CLASSES,
                names.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::invariant(format!("duplicate class name {a:?}")));
            }
        }
        Ok(ClassMap { names })
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        Self::circle_of_willis()
    }
}
