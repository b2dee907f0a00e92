use super::DomainError;

/// Raw per-pixel class scores, `height * width * num_classes` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl Logits {
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.num_classes;
        &self.values[i..i + self.num_classes]
    }
}

/// Tolerance on the per-pixel sum of a probability map.
const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// A per-pixel categorical distribution. Every constructor checks that each
/// pixel lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    image_id: String,
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        num_classes: usize,
        probs: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let image_id = image_id.into();
        if num_classes < 2 {
            return Err(DomainError::TooFewClasses(num_classes));
        }
        if height == 0 || width == 0 {
            return Err(DomainError::EmptyImage { id: image_id, height, width });
        }
        let expected = height * width * num_classes;
        if probs.len() != expected {
            return Err(DomainError::BufferSize { id: image_id, expected, actual: probs.len() });
        }
        for (p, dist) in probs.chunks_exact(num_classes).enumerate() {
            let reason = if let Some(v) = dist.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                Some(format!("value {v} outside [0, 1]"))
            } else {
                let sum: f64 = dist.iter().sum();
                ((sum - 1.0).abs() > SIMPLEX_TOLERANCE).then(|| format!("sums to {sum}"))
            };
            if let Some(reason) = reason {
                return Err(DomainError::NotSimplex {
                    id: image_id,
                    row: p / width,
                    col: p % width,
                    reason,
                });
            }
        }
        Ok(Self { image_id, height, width, num_classes, probs })
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

    pub fn values(&self) -> &[f64] {
        &self.probs
    }

    /// Distribution at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.num_classes;
        &self.probs[i..i + self.num_classes]
    }

    /// Iterates per-pixel distributions in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.num_classes)
    }

    /// Most likely class per pixel (lowest index wins ties).
    pub fn argmax(&self) -> Vec<u8> {
        self.pixels()
            .map(|d| {
                let mut best = 0;
                for (c, &v) in d.iter().enumerate().skip(1) {
                    if v > d[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Numerically stable per-pixel softmax.
pub fn softmax_normalize(logits: &Logits) -> Result<ProbabilityMap, DomainError> {
    let c = logits.num_classes;
    if c < 2 {
        return Err(DomainError::TooFewClasses(c));
    }
    let mut probs = Vec::with_capacity(logits.values.len());
    for (p, z) in logits.values.chunks_exact(c).enumerate() {
        if let Some(channel) = z.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteLogit {
                id: logits.image_id.clone(),
                row: p / logits.width,
                col: p % logits.width,
                channel,
                value: z[channel],
            });
        }
        let start = probs.len();
        softmax_into(z, &mut probs);
        debug_assert_eq!(probs.len(), start + c);
    }
    ProbabilityMap::new(logits.image_id.clone(), logits.height, logits.width, c, probs)
}

/// Appends `softmax(z)` to `out`.
pub(crate) fn softmax_into(z: &[f64], out: &mut Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for &v in z {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(values: Vec<f64>, c: usize) -> Logits {
        let n = values.len() / c;
        Logits { image_id: "x".into(), height: 1, width: n, num_classes: c, values }
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let p = softmax_normalize(&logits(vec![0.0, 0.0, 0.0], 3)).unwrap();
        for &v in p.at(0, 0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_two_gives_two_thirds() {
        let p = softmax_normalize(&logits(vec![2f64.ln(), 0.0], 2)).unwrap();
        assert!((p.at(0, 0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.at(0, 0)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let z = vec![0.3, -1.2, 2.5, 0.0, 4.0, -3.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.0).collect();
        let a = softmax_normalize(&logits(z, 3)).unwrap();
        let b = softmax_normalize(&logits(shifted, 3)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logit_names_pixel() {
        let err = softmax_normalize(&logits(vec![0.0, 1.0, f64::NAN, 0.0], 2)).unwrap_err();
        match err {
            DomainError::NonFiniteLogit { row, col, channel, .. } => {
                assert_eq!((row, col, channel), (0, 1, 0));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn constructor_enforces_simplex() {
        assert!(ProbabilityMap::new("p", 1, 1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityMap::new("p", 1, 1, 2, vec![0.6, 0.5]).is_err());
        assert!(ProbabilityMap::new("p", 1, 1, 2, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let p = ProbabilityMap::new("p", 1, 2, 3, vec![0.4, 0.4, 0.2, 0.1, 0.2, 0.7]).unwrap();
        assert_eq!(p.argmax(), vec![0, 2]);
    }
}
