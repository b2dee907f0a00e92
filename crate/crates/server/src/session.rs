use pixelpick_core::oracle::HumanLink;
use pixelpick_core::{LabelledPixel, PixelRef};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    /// The model chose the pixels; the annotator classifies them in order.
    #[default]
    Propose,
    /// The annotator chooses pixels and classes freely.
    HumanPick,
}

/// A pixel coordinate as it appears in request and response bodies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub image: String,
    pub row: usize,
    pub col: usize,
}

impl From<&PixelRef> for Coord {
    fn from(p: &PixelRef) -> Self {
        Self { image: p.image_id.clone(), row: p.row, col: p.col }
    }
}

impl From<&Coord> for PixelRef {
    fn from(c: &Coord) -> Self {
        PixelRef::new(c.image.clone(), c.row, c.col)
    }
}

/// What the session sidecar stores about a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub mode: SessionMode,
    pub round: u32,
    pub proposals: Vec<Coord>,
}

#[derive(Debug)]
pub struct Session {
    pub record: SessionRecord,
    pub proposals: Vec<PixelRef>,
    /// In propose mode, `collected[i]` answers `proposals[i]`.
    pub collected: Vec<LabelledPixel>,
    pub timings_ms: Vec<Option<u64>>,
    /// Engine request this session answers, if any.
    pub link: Option<(HumanLink, u64)>,
}

impl Session {
    pub fn new(record: SessionRecord) -> Self {
        let proposals = record.proposals.iter().map(PixelRef::from).collect();
        Self { record, proposals, collected: Vec::new(), timings_ms: Vec::new(), link: None }
    }

    pub fn cursor(&self) -> usize {
        self.collected.len()
    }

    pub fn total(&self) -> usize {
        match self.record.mode {
            SessionMode::Propose => self.proposals.len(),
            SessionMode::HumanPick => self.collected.len(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.record.mode == SessionMode::Propose && self.cursor() >= self.proposals.len()
    }

    pub fn mean_ms(&self) -> Option<f64> {
        let known: Vec<u64> = self.timings_ms.iter().flatten().copied().collect();
        (!known.is_empty()).then(|| known.iter().sum::<u64>() as f64 / known.len() as f64)
    }

    pub fn per_class(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for lp in &self.collected {
            if let Some(c) = counts.get_mut(usize::from(lp.class_id)) {
                *c += 1;
            }
        }
        counts
    }
}

/// Stable grouping by image: every image's proposals become consecutive,
/// images in order of first appearance.
pub fn group_by_image(proposals: &[Coord]) -> Vec<Coord> {
    let mut order: Vec<&str> = Vec::new();
    for p in proposals {
        if !order.contains(&p.image.as_str()) {
            order.push(&p.image);
        }
    }
    order.iter().flat_map(|id| proposals.iter().filter(move |p| p.image == *id).cloned()).collect()
}

/// Binding of one keyboard key to a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBinding {
    pub key: String,
    pub class: u8,
    pub name: String,
    pub color: [u8; 3],
}

const HOME_ROW: &str = "asdfghjkl;qwertyuiopzxcvbnm,./1234567890";

/// Keys from the dataset when given, else the home-row sequence.
pub fn key_map(names: &[String], palette: &[[u8; 3]], keys: Option<&[String]>) -> Vec<KeyBinding> {
    let defaults: Vec<String> = HOME_ROW.chars().map(String::from).collect();
    names
        .iter()
        .enumerate()
        .map(|(c, name)| KeyBinding {
            key: keys.and_then(|k| k.get(c)).or(defaults.get(c)).cloned().unwrap_or_default(),
            class: c as u8,
            name: name.clone(),
            color: palette.get(c).copied().unwrap_or([0, 0, 0]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(image: &str, row: usize) -> Coord {
        Coord { image: image.into(), row, col: 0 }
    }

    #[test]
    fn grouping_is_stable() {
        let got = group_by_image(&[c("b", 0), c("a", 1), c("b", 2), c("a", 3), c("c", 4)]);
        assert_eq!(got, vec![c("b", 0), c("b", 2), c("a", 1), c("a", 3), c("c", 4)]);
    }

    #[test]
    fn default_and_custom_keys() {
        let names: Vec<String> = ["bg", "x", "y"].iter().map(|s| s.to_string()).collect();
        let km = key_map(&names, &[[1, 2, 3]; 3], None);
        assert_eq!(km.iter().map(|k| k.key.as_str()).collect::<Vec<_>>(), vec!["a", "s", "d"]);
        let custom: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let km = key_map(&names, &[[1, 2, 3]; 3], Some(&custom));
        assert_eq!(km[2].key, "3");
        assert_eq!(km[2].name, "y");
    }
}
