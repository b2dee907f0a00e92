use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DomainError, Image, LabelledPixel, PixelRef};

/// The labelled pixel set gathered so far. Each pixel is labelled at most
/// once, and entries keep their insertion order.
#[derive(Debug, Clone, Default)]
pub struct AnnotationDatabase {
    num_classes: usize,
    entries: Vec<LabelledPixel>,
    index: HashMap<PixelRef, usize>,
    by_image: HashMap<String, Vec<usize>>,
}

impl AnnotationDatabase {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, ..Default::default() }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabelledPixel] {
        &self.entries
    }

    pub fn get(&self, pixel: &PixelRef) -> Option<&LabelledPixel> {
        self.index.get(pixel).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, pixel: &PixelRef) -> bool {
        self.index.contains_key(pixel)
    }

    pub fn insert(&mut self, lp: LabelledPixel) -> Result<(), DomainError> {
        if usize::from(lp.class_id) >= self.num_classes {
            return Err(DomainError::ClassOutOfRange {
                pixel: lp.pixel,
                class: lp.class_id,
                num_classes: self.num_classes,
            });
        }
        if self.index.contains_key(&lp.pixel) {
            return Err(DomainError::DuplicateLabel(lp.pixel));
        }
        if let Some(last) = self.entries.last() {
            if lp.round < last.round {
                return Err(DomainError::RoundOrder { pixel: lp.pixel, round: lp.round, last: last.round });
            }
        }
        let i = self.entries.len();
        self.index.insert(lp.pixel.clone(), i);
        self.by_image.entry(lp.pixel.image_id.clone()).or_default().push(i);
        self.entries.push(lp);
        Ok(())
    }

    /// Inserts a batch, stopping at the first rejected entry.
    pub fn extend(&mut self, labels: impl IntoIterator<Item = LabelledPixel>) -> Result<(), DomainError> {
        labels.into_iter().try_for_each(|lp| self.insert(lp))
    }

    /// Labels for one image in insertion order.
    pub fn labels_for(&self, image_id: &str) -> Vec<&LabelledPixel> {
        self.by_image
            .get(image_id)
            .map(|ix| ix.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }

    pub fn count_for(&self, image_id: &str) -> usize {
        self.by_image.get(image_id).map_or(0, Vec::len)
    }

    /// Image ids that have at least one label, in first-label order.
    pub fn labelled_images(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .map(|e| e.pixel.image_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Per-pixel "already labelled" flags for an image, row-major.
    pub fn labelled_mask(&self, image: &Image) -> Vec<bool> {
        let mut mask = vec![false; image.num_pixels()];
        for lp in self.labels_for(image.id()) {
            if image.contains(lp.pixel.row, lp.pixel.col) {
                mask[lp.pixel.row * image.width() + lp.pixel.col] = true;
            }
        }
        mask
    }

    /// Writes every entry as JSON Lines, replacing the file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DomainError> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            writeln!(out, "{}", e.to_json_line())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a JSON Lines label file, validating every entry as it is
    /// inserted. Blank lines are skipped.
    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self, DomainError> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut db = Self::new(num_classes);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| DomainError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message,
            };
            let lp = LabelledPixel::from_json_line(&line).map_err(|e| parse_err(e.to_string()))?;
            db.insert(lp).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(db)
    }
}

/// Appends one label to a JSON Lines file and flushes it to disk.
pub fn append_label(path: impl AsRef<Path>, lp: &LabelledPixel) -> Result<(), DomainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{}\n", lp.to_json_line()).as_bytes())?;
    f.sync_data()?;
    Ok(())
}

/// The unlabelled pool: every lattice coordinate of `images` that has no
/// entry in `db`, ordered by image then row-major position.
pub fn candidate_pool(images: &[Image], db: &AnnotationDatabase) -> Vec<PixelRef> {
    let mut out = Vec::new();
    for image in images {
        let labelled = db.labelled_mask(image);
        for (p, _) in labelled.iter().enumerate().filter(|(_, l)| !**l) {
            out.push(PixelRef::new(image.id(), p / image.width(), p % image.width()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LabelSource;

    fn lp(image: &str, row: usize, col: usize, class: u8, round: u32) -> LabelledPixel {
        LabelledPixel::new(PixelRef::new(image, row, col), class, round, LabelSource::Simulated)
    }

    fn gray(id: &str, h: usize, w: usize) -> Image {
        Image::new(id, h, w, vec![0.5; h * w * 3]).unwrap()
    }

    #[test]
    fn insert_into_empty() {
        let mut db = AnnotationDatabase::new(3);
        db.insert(lp("a", 0, 0, 1, 0)).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.get(&PixelRef::new("a", 0, 0)).unwrap().class_id, 1);
    }

    #[test]
    fn duplicate_pixel_is_rejected() {
        let mut db = AnnotationDatabase::new(3);
        db.insert(lp("a", 1, 2, 1, 0)).unwrap();
        let err = db.insert(lp("a", 1, 2, 0, 0)).unwrap_err();
        assert!(matches!(err, DomainError::DuplicateLabel(_)));
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let mut db = AnnotationDatabase::new(3);
        assert!(matches!(
            db.insert(lp("a", 0, 0, 3, 0)),
            Err(DomainError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn rounds_must_not_decrease() {
        let mut db = AnnotationDatabase::new(3);
        db.insert(lp("a", 0, 0, 0, 2)).unwrap();
        assert!(matches!(db.insert(lp("a", 0, 1, 0, 1)), Err(DomainError::RoundOrder { .. })));
    }

    #[test]
    fn save_load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let mut db = AnnotationDatabase::new(4);
        let mut expected = Vec::new();
        for i in 0..25u32 {
            let e = LabelledPixel::new(
                PixelRef::new(format!("img_{}", i % 3), (i * 7 % 11) as usize, i as usize),
                (i % 4) as u8,
                i / 10,
                [LabelSource::Simulated, LabelSource::Noisy, LabelSource::Human][(i % 3) as usize],
            );
            expected.push(e.clone());
            db.insert(e).unwrap();
        }
        db.save(&path).unwrap();
        let loaded = AnnotationDatabase::load(&path, 4).unwrap();
        assert_eq!(loaded.entries(), expected.as_slice());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 25);
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    #[test]
    fn load_reports_line_of_bad_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        std::fs::write(
            &path,
            "{\"image\":\"a\",\"row\":0,\"col\":0,\"class\":1,\"round\":0,\"source\":\"human\"}\nnot json\n",
        )
        .unwrap();
        match AnnotationDatabase::load(&path, 2).unwrap_err() {
            DomainError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn append_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        append_label(&path, &lp("a", 0, 0, 1, 0)).unwrap();
        append_label(&path, &lp("a", 0, 1, 0, 0)).unwrap();
        assert_eq!(AnnotationDatabase::load(&path, 2).unwrap().len(), 2);
    }

    #[test]
    fn candidate_pool_cases() {
        let img = gray("a", 2, 2);
        let mut db = AnnotationDatabase::new(2);
        assert_eq!(candidate_pool(std::slice::from_ref(&img), &db).len(), 4);

        db.insert(lp("a", 0, 1, 1, 0)).unwrap();
        let pool = candidate_pool(std::slice::from_ref(&img), &db);
        assert_eq!(pool.len(), 3);
        assert!(!pool.contains(&PixelRef::new("a", 0, 1)));

        for (r, c) in [(0, 0), (1, 0), (1, 1)] {
            db.insert(lp("a", r, c, 0, 0)).unwrap();
        }
        assert!(candidate_pool(&[img], &db).is_empty());
    }

    #[test]
    fn pool_cardinality_over_several_images() {
        let images = vec![gray("a", 3, 4), gray("b", 5, 2)];
        let mut db = AnnotationDatabase::new(2);
        db.insert(lp("a", 2, 3, 0, 0)).unwrap();
        db.insert(lp("b", 4, 1, 1, 0)).unwrap();
        assert_eq!(candidate_pool(&images, &db).len(), 12 + 10 - 2);
    }
}
