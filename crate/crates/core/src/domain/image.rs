use super::{ClassId, DomainError};

/// Mask value for pixels that carry no class.
pub const IGNORE: ClassId = 255;

/// An RGB image with channel values in `[0, 1]`, stored row-major as
/// `height * width * 3` interleaved values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        if height == 0 || width == 0 {
            return Err(DomainError::EmptyImage { id, height, width });
        }
        let expected = height * width * 3;
        if pixels.len() != expected {
            return Err(DomainError::BufferSize { id, expected, actual: pixels.len() });
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            let p = i / 3;
            return Err(DomainError::ChannelRange {
                id,
                row: p / width,
                col: p % width,
                value: pixels[i],
            });
        }
        Ok(Self { id, height, width, pixels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width
    }
}

/// Per-pixel ground-truth classes for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    image_id: String,
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<ClassId>,
}

impl GroundTruthMask {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        num_classes: usize,
        classes: Vec<ClassId>,
    ) -> Result<Self, DomainError> {
        let image_id = image_id.into();
        if num_classes < 2 {
            return Err(DomainError::TooFewClasses(num_classes));
        }
        if height == 0 || width == 0 {
            return Err(DomainError::EmptyImage { id: image_id, height, width });
        }
        if classes.len() != height * width {
            return Err(DomainError::BufferSize {
                id: image_id,
                expected: height * width,
                actual: classes.len(),
            });
        }
        if let Some(i) = classes
            .iter()
            .position(|&c| c != IGNORE && usize::from(c) >= num_classes)
        {
            return Err(DomainError::MaskClass {
                id: image_id,
                row: i / width,
                col: i % width,
                class: classes[i],
                num_classes,
            });
        }
        Ok(Self { image_id, height, width, num_classes, classes })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// Class at `(row, col)`, or `None` outside the mask.
    pub fn get(&self, row: usize, col: usize) -> Option<ClassId> {
        (row < self.height && col < self.width).then(|| self.classes[row * self.width + col])
    }

    pub fn matches(&self, image: &Image) -> bool {
        self.image_id == image.id() && self.height == image.height() && self.width == image.width()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_channels() {
        let err = Image::new("a", 1, 2, vec![0.0, 0.5, 1.0, 0.2, 1.5, 0.0]).unwrap_err();
        assert!(matches!(err, DomainError::ChannelRange { col: 1, .. }));
        assert!(Image::new("a", 0, 2, vec![]).is_err());
    }

    #[test]
    fn mask_validates_classes() {
        assert!(GroundTruthMask::new("m", 1, 3, 3, vec![0, 2, IGNORE]).is_ok());
        let err = GroundTruthMask::new("m", 1, 3, 3, vec![0, 3, 1]).unwrap_err();
        assert!(matches!(err, DomainError::MaskClass { class: 3, col: 1, .. }));
        assert!(GroundTruthMask::new("m", 1, 1, 1, vec![0]).is_err());
    }
}
