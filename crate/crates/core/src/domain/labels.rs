use std::fmt;

use serde::{Deserialize, Serialize};

/// Class index. `IGNORE` (255) is reserved for unlabelled mask pixels.
pub type ClassId = u8;

/// A coordinate in the global pixel lattice: an image and a `(row, col)`
/// position with the origin at the top-left corner.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

impl PixelRef {
    pub fn new(image_id: impl Into<String>, row: usize, col: usize) -> Self {
        Self { image_id: image_id.into(), row, col }
    }
}

impl fmt::Display for PixelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@({}, {})", self.image_id, self.row, self.col)
    }
}

/// Where a label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Simulated,
    Noisy,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelledPixel {
    pub pixel: PixelRef,
    pub class_id: ClassId,
    /// Acquisition round that produced the label; the bootstrap round is 0.
    pub round: u32,
    pub source: LabelSource,
}

impl LabelledPixel {
    pub fn new(pixel: PixelRef, class_id: ClassId, round: u32, source: LabelSource) -> Self {
        Self { pixel, class_id, round, source }
    }
}

/// One line of the JSON Lines label file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LabelRecord {
    pub image: String,
    pub row: usize,
    pub col: usize,
    pub class: ClassId,
    pub round: u32,
    pub source: LabelSource,
}

impl From<&LabelledPixel> for LabelRecord {
    fn from(lp: &LabelledPixel) -> Self {
        Self {
            image: lp.pixel.image_id.clone(),
            row: lp.pixel.row,
            col: lp.pixel.col,
            class: lp.class_id,
            round: lp.round,
            source: lp.source,
        }
    }
}

impl From<LabelRecord> for LabelledPixel {
    fn from(r: LabelRecord) -> Self {
        Self {
            pixel: PixelRef::new(r.image, r.row, r.col),
            class_id: r.class,
            round: r.round,
            source: r.source,
        }
    }
}

impl LabelledPixel {
    /// Serializes to a single JSON Lines record, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&LabelRecord::from(self)).expect("label record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<LabelRecord>(line).map(Into::into)
    }
}
