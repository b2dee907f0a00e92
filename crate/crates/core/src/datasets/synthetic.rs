use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError};
use crate::domain::{ClassId, GroundTruthMask, Image};
use crate::seed::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    /// Includes the background class 0.
    pub num_classes: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    pub noise_std: f64,
    /// Display colour per class; empty means the default palette.
    #[serde(default)]
    pub palette: Vec<[u8; 3]>,
    pub seed: u64,
    /// Image ids are `<prefix>_<index>`.
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 100,
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_image: (3, 5),
            noise_std: 0.05,
            palette: Vec::new(),
            seed: 0,
            id_prefix: "img".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.num_classes < 2 || self.num_classes > 254 {
            return bad(format!("num_classes {} not in [2, 254]", self.num_classes));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("images must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return bad(format!("empty shape range {:?}", self.shapes_per_image));
        }
        if !self.palette.is_empty() && self.palette.len() != self.num_classes {
            return bad(format!("palette has {} colours for {} classes", self.palette.len(), self.num_classes));
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains(['/', '\\', '.']) {
            return bad(format!("id prefix `{}` is not a plain file stem", self.id_prefix));
        }
        Ok(())
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        if self.palette.is_empty() {
            default_palette(self.num_classes)
        } else {
            self.palette.clone()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| if c == 0 { "background".to_string() } else { format!("class_{c}") }).collect()
    }

    pub fn image_id(&self, index: usize) -> String {
        format!("{}_{index:04}", self.id_prefix)
    }
}

/// Held-out companion of a training spec: a fifth of the images (at least
/// one), a disjoint seed and `eval` ids.
pub fn eval_spec(train: &SyntheticSpec) -> SyntheticSpec {
    SyntheticSpec {
        num_images: train.num_images.div_ceil(5).max(1),
        seed: Stream::new(train.seed, "eval-split").seed(),
        id_prefix: "eval".into(),
        ..train.clone()
    }
}

/// Grey background followed by evenly spaced hues.
fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    let fg = num_classes - 1;
    std::iter::once([110, 110, 110])
        .chain((0..fg).map(|k| hsv_to_rgb(360.0 * k as f64 / fg as f64, 0.55, 0.75)))
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// A filled shape in pixel coordinates; a pixel belongs to the shape when
/// its centre does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Circle { cy: f64, cx: f64, radius: f64 },
    Triangle { vertices: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        match *self {
            Shape::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Shape::Circle { cy, cx, radius } => (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius,
            Shape::Triangle { vertices: [a, b, c] } => {
                let edge = |p: (f64, f64), q: (f64, f64)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let size = rng.random_range(side * 0.1..side * 0.25);
        match rng.random_range(0..3) {
            0 => {
                let hh = size * rng.random_range(0.5..1.0);
                let hw = size * rng.random_range(0.5..1.0);
                Shape::Rect { top: cy - hh, left: cx - hw, bottom: cy + hh, right: cx + hw }
            }
            1 => Shape::Circle { cy, cx, radius: size * 0.9 },
            _ => {
                let start = rng.random_range(0.0..std::f64::consts::TAU);
                let vertices = [0.0, 1.0, 2.0].map(|k| {
                    let theta = start + k * std::f64::consts::TAU / 3.0 + rng.random_range(-0.3..0.3);
                    (cy + size * 1.2 * theta.sin(), cx + size * 1.2 * theta.cos())
                });
                Shape::Triangle { vertices }
            }
        }
    }
}

/// Paints shapes in order over background class 0; later shapes win.
pub fn paint_mask(height: usize, width: usize, shapes: &[(Shape, ClassId)]) -> Vec<ClassId> {
    let mut mask = vec![0; height * width];
    for (shape, class) in shapes {
        for r in 0..height {
            for c in 0..width {
                if shape.contains(r, c) {
                    mask[r * width + c] = *class;
                }
            }
        }
    }
    mask
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders image `index` of the spec and returns the shapes in paint order.
pub fn generate_scene(
    spec: &SyntheticSpec,
    index: usize,
) -> Result<(Image, GroundTruthMask, Vec<(Shape, ClassId)>), DatasetError> {
    spec.validate()?;
    let (h, w, classes) = (spec.height, spec.width, spec.num_classes);
    let id = spec.image_id(index);
    let mut rng = Stream::new(spec.seed, "synthetic").str(&spec.id_prefix).u64(index as u64).rng();

    let count = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    // the first shapes cover every foreground class once
    let mut order: Vec<ClassId> = (1..classes as ClassId).collect();
    order.shuffle(&mut rng);
    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        let class = if k < order.len() { order[k] } else { rng.random_range(1..classes) as ClassId };
        shapes.push((Shape::random(&mut rng, h, w), class));
    }
    let mask = paint_mask(h, w, &shapes);

    let palette = spec.palette();
    let jitter = |rng: &mut ChaCha8Rng, base: [u8; 3], amount: f64| -> [f64; 3] {
        base.map(|v| f64::from(v) / 255.0 + rng.random_range(-amount..=amount))
    };
    // one colour per painted shape, background gets a striped texture
    let background = jitter(&mut rng, palette[0], 0.08);
    let shape_colours: Vec<[f64; 3]> = shapes.iter().map(|(_, c)| jitter(&mut rng, palette[usize::from(*c)], 0.12)).collect();
    let (fy, fx, phase) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.0..6.3));
    let painted_by = {
        let mut owner = vec![usize::MAX; h * w];
        for (k, (shape, _)) in shapes.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    if shape.contains(r, c) {
                        owner[r * w + c] = k;
                    }
                }
            }
        }
        owner
    };
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let mut pixels = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let base = match painted_by[r * w + c] {
                usize::MAX => {
                    let t = 0.06 * (fy * r as f64 + fx * c as f64 + phase).sin();
                    background.map(|v| v + t)
                }
                k => shape_colours[k],
            };
            for v in base {
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push(quantize(v + n));
            }
        }
    }
    let image = Image::new(id.clone(), h, w, pixels)?;
    let mask = GroundTruthMask::new(id, h, w, classes, mask)?;
    Ok((image, mask, shapes))
}

/// Generates every image of the spec. Deterministic in the spec alone.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let scenes: Vec<(Image, GroundTruthMask)> = (0..spec.num_images)
        .into_par_iter()
        .map(|i| generate_scene(spec, i).map(|(im, m, _)| (im, m)))
        .collect::<Result<_, _>>()?;
    let (images, masks) = scenes.into_iter().unzip();
    Ok(Dataset { images, masks, class_names: spec.class_names(), palette: spec.palette(), keys: None, spec: Some(spec.clone()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SyntheticSpec {
        SyntheticSpec { num_images: n, height: 32, width: 32, seed: 7, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(5)).unwrap();
        let b = generate_synthetic(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..small(5) }).unwrap();
        assert_ne!(a.images[0].pixels(), c.images[0].pixels());
        a.validate().unwrap();
    }

    #[test]
    fn noiseless_single_shape_matches_construction() {
        let spec = SyntheticSpec { num_classes: 2, shapes_per_image: (1, 1), noise_std: 0.0, ..small(10) };
        for i in 0..10 {
            let (image, mask, shapes) = generate_scene(&spec, i).unwrap();
            assert_eq!(shapes.len(), 1);
            assert_eq!(shapes[0].1, 1);
            let mut inside_colour = None;
            for r in 0..32 {
                for c in 0..32 {
                    let expected = u8::from(shapes[0].0.contains(r, c));
                    assert_eq!(mask.get(r, c), Some(expected));
                    if expected == 1 {
                        let rgb = image.rgb(r, c);
                        assert_eq!(*inside_colour.get_or_insert(rgb), rgb);
                    }
                }
            }
        }
    }

    #[test]
    fn rectangle_paint() {
        let rect = Shape::Rect { top: 2.0, left: 3.0, bottom: 5.0, right: 7.0 };
        let mask = paint_mask(8, 10, &[(rect, 1)]);
        for r in 0..8 {
            for c in 0..10 {
                let inside = (2..5).contains(&r) && (3..7).contains(&c);
                assert_eq!(mask[r * 10 + c], u8::from(inside));
            }
        }
    }

    #[test]
    fn later_shapes_occlude_earlier_ones() {
        let big = Shape::Circle { cy: 5.0, cx: 5.0, radius: 4.0 };
        let small = Shape::Rect { top: 4.0, left: 4.0, bottom: 6.0, right: 6.0 };
        let mask = paint_mask(10, 10, &[(big, 1), (small, 2)]);
        assert_eq!(mask[4 * 10 + 4], 2);
        assert_eq!(mask[2 * 10 + 5], 1);
        assert_eq!(mask[0], 0);
    }

    #[test]
    fn triangle_contains_centroid_only_inside() {
        let t = Shape::Triangle { vertices: [(0.0, 0.0), (0.0, 8.0), (8.0, 0.0)] };
        assert!(t.contains(1, 1));
        assert!(!t.contains(7, 7));
    }

    #[test]
    fn every_class_is_common() {
        let data = generate_synthetic(&SyntheticSpec { num_images: 100, seed: 3, ..Default::default() }).unwrap();
        for class in 0..4u8 {
            let present = data.masks.iter().filter(|m| m.classes().contains(&class)).count();
            assert!(present >= 80, "class {class} present in {present} images");
        }
    }

    #[test]
    fn pixels_are_8bit_exact() {
        let data = generate_synthetic(&small(2)).unwrap();
        for v in data.images[0].pixels() {
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { num_classes: 1, ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { noise_std: -1.0, ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { shapes_per_image: (4, 2), ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { palette: vec![[0, 0, 0]], ..small(1) }.validate().is_err());
        assert!(SyntheticSpec { id_prefix: "a/b".into(), ..small(1) }.validate().is_err());
    }

    #[test]
    fn eval_split_is_disjoint() {
        let train = small(12);
        let eval = eval_spec(&train);
        assert_eq!(eval.num_images, 3);
        assert_ne!(eval.seed, train.seed);
        assert_eq!(eval.image_id(0), "eval_0000");
    }

    #[test]
    fn default_palette_is_distinct() {
        let p = default_palette(6);
        let set: std::collections::HashSet<_> = p.iter().collect();
        assert_eq!(set.len(), 6);
    }
}
