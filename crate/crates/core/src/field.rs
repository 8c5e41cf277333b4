//! Dense per-pixel fields and the label marginals derived from them.
//!
//! Every field is a row-major grid of `height * width` pixels, each carrying
//! either a class index (`LabelField`) or a `K`-vector (`LogitField`,
//! `ProbField`). Classes are indexed from 0; in binary problems class 0 is the
//! foreground and class 1 the background.

use crate::error::{invalid_param, Error, Result};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 10.0;

/// Tolerance on row sums of probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Grid dimensions shared by all fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_param("shape", "height and width must be positive"));
        }
        if num_classes < 2 {
            return Err(invalid_param("num_classes", format!("need K >= 2, got {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
        })
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Hard ground-truth labels. Region sizes `|Ω_k|` are counted at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    shape: Shape,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl LabelField {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        let shape = Shape::new(height, width, num_classes)?;
        if labels.len() != shape.num_pixels() {
            return Err(Error::InvalidInput(format!(
                "expected {} labels, got {}",
                shape.num_pixels(),
                labels.len()
            )));
        }
        let mut counts = vec![0; num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "pixel {i} has class {l}, outside 0..{num_classes}"
                )));
            }
            counts[l] += 1;
        }
        Ok(Self {
            shape,
            labels,
            counts,
        })
    }

    /// A single-row field, handy for small hand-built instances.
    pub fn from_labels(num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(1, n, num_classes, labels)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, pixel: usize) -> usize {
        self.labels[pixel]
    }

    /// `|Ω_k|` for every class.
    pub fn region_sizes(&self) -> &[usize] {
        &self.counts
    }

    pub fn region_size(&self, class: usize) -> usize {
        self.counts[class]
    }

    /// Pixel indices belonging to `Ω_k`.
    pub fn region(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == class)
            .map(|(i, _)| i)
    }

    pub fn all_regions_present(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    /// Binary fields have exactly two classes.
    pub fn is_binary(&self) -> bool {
        self.shape.num_classes == 2
    }

    /// One-hot probability field matching these labels.
    pub fn one_hot(&self) -> ProbField {
        let k = self.num_classes();
        let mut probs = vec![0.0; self.num_pixels() * k];
        for (i, &l) in self.labels.iter().enumerate() {
            probs[i * k + l] = 1.0;
        }
        ProbField {
            shape: self.shape,
            probs,
        }
    }

    /// Replicates every pixel `m` times along the row, giving an `h × (w·m)` field.
    pub fn replicate(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid_param("m", "replication factor must be positive"));
        }
        let labels = self
            .labels
            .iter()
            .flat_map(|&l| std::iter::repeat(l).take(m))
            .collect();
        Self::new(
            self.shape.height,
            self.shape.width * m,
            self.shape.num_classes,
            labels,
        )
    }
}

/// Unnormalised per-pixel scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    shape: Shape,
    logits: Vec<f64>,
}

impl LogitField {
    pub fn new(height: usize, width: usize, num_classes: usize, logits: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, num_classes)?;
        Self::with_shape(shape, logits)
    }

    pub fn with_shape(shape: Shape, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != shape.num_pixels() * shape.num_classes {
            return Err(Error::InvalidInput(format!(
                "expected {} logits, got {}",
                shape.num_pixels() * shape.num_classes,
                logits.len()
            )));
        }
        if let Some(pos) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit at offset {pos}")));
        }
        Ok(Self { shape, logits })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("ragged logit rows".into()));
        }
        Self::new(1, rows.len(), k, rows.concat())
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            logits: vec![0.0; shape.num_pixels() * shape.num_classes],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        let k = self.shape.num_classes;
        &self.logits[pixel * k..(pixel + 1) * k]
    }

    /// Copy with a single coordinate shifted by `delta`; used by finite differences.
    pub fn perturbed(&self, offset: usize, delta: f64) -> Self {
        let mut logits = self.logits.clone();
        logits[offset] += delta;
        Self {
            shape: self.shape,
            logits,
        }
    }

    pub(crate) fn from_raw(shape: Shape, logits: Vec<f64>) -> Self {
        Self { shape, logits }
    }
}

/// Per-pixel probability rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    shape: Shape,
    probs: Vec<f64>,
}

impl ProbField {
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, num_classes)?;
        if probs.len() != shape.num_pixels() * num_classes {
            return Err(Error::InvalidInput(format!(
                "expected {} probabilities, got {}",
                shape.num_pixels() * num_classes,
                probs.len()
            )));
        }
        for (i, row) in probs.chunks_exact(num_classes).enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidInput(format!("pixel {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidInput(format!("pixel {i} row sums to {s}")));
            }
        }
        Ok(Self { shape, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("ragged probability rows".into()));
        }
        Self::new(1, rows.len(), k, rows.concat())
    }

    /// Binary field from foreground probabilities `p_i1`.
    pub fn from_foreground(fg: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = fg.iter().map(|&p| vec![p, 1.0 - p]).collect();
        Self::from_rows(&rows)
    }

    pub fn uniform(shape: Shape) -> Self {
        let k = shape.num_classes;
        Self {
            shape,
            probs: vec![1.0 / k as f64; shape.num_pixels() * k],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.shape.num_pixels()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, pixel: usize, class: usize) -> f64 {
        self.probs[pixel * self.shape.num_classes + class]
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        let k = self.shape.num_classes;
        &self.probs[pixel * k..(pixel + 1) * k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.shape.num_classes)
    }

    /// Column sums `Σ_i p_ik`.
    pub fn class_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.shape.num_classes];
        for row in self.rows() {
            for (t, &p) in totals.iter_mut().zip(row) {
                *t += p;
            }
        }
        totals
    }

    /// Hard prediction: index of the largest entry per pixel, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// A point of the probability simplex: predicted or ground-truth region proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal(Vec<f64>);

impl Marginal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput("a marginal needs at least two classes".into()));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(format!("marginal entries outside [0, 1]: {values:?}")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("marginal sums to {s}")));
        }
        Ok(Self(values))
    }

    /// Simplex vertex `e_k`.
    pub fn vertex(num_classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Indices attaining the largest entry (exact ties).
    pub fn argmax_set(&self) -> Vec<usize> {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..self.0.len()).filter(|&k| self.0[k] == max).collect()
    }

    pub fn linf_distance(&self, other: &Marginal) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Row-wise softmax of `tau * z`, max-shifted before exponentiation.
pub fn temperature_softmax(logits: &LogitField, tau: f64) -> Result<ProbField> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid_param("tau", format!("temperature must be positive, got {tau}")));
    }
    if let Some(pos) = logits.as_slice().iter().position(|z| !z.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit at offset {pos}")));
    }
    let shape = logits.shape();
    let k = shape.num_classes;
    let mut probs = Vec::with_capacity(logits.as_slice().len());
    for row in logits.as_slice().chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * tau;
        let start = probs.len();
        let mut sum = 0.0;
        for &z in row {
            let e = (tau * z - m).exp();
            sum += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= sum;
        }
    }
    Ok(ProbField { shape, probs })
}

/// `p̂_k = (1/|Ω|) Σ_i p_ik`.
pub fn predicted_marginal(probs: &ProbField) -> Marginal {
    let n = probs.num_pixels() as f64;
    Marginal(probs.class_totals().into_iter().map(|t| t / n).collect())
}

/// `ŷ_k = |Ω_k| / |Ω|`.
pub fn gt_marginal(labels: &LabelField) -> Marginal {
    let n = labels.num_pixels() as f64;
    Marginal(labels.region_sizes().iter().map(|&c| c as f64 / n).collect())
}

pub(crate) fn check_same_grid(p: &ProbField, g: &LabelField) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {:?} does not match label shape {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let z = LogitField::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let p = temperature_softmax(&z, 1.0).unwrap();
        for &v in p.row(0) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_binary_at_default_temperature() {
        // e^10/(e^10+1), evaluated independently.
        let z = LogitField::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = temperature_softmax(&z, DEFAULT_TAU).unwrap();
        let e10 = 10f64.exp();
        assert_abs_diff_eq!(p.get(0, 0), e10 / (e10 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 0), 0.999_954_6, epsilon = 1e-7);
        assert_abs_diff_eq!(p.get(0, 1), 0.000_045_4, epsilon = 1e-7);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let z = LogitField::from_rows(&[vec![1e4, -1e4, 0.0]]).unwrap();
        let p = temperature_softmax(&z, DEFAULT_TAU).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.get(0, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = LogitField::from_rows(&[vec![1.0, 0.0]]).unwrap();
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                temperature_softmax(&z, tau),
                Err(Error::InvalidParameter { name: "tau", .. })
            ));
        }
    }

    #[test]
    fn logit_field_rejects_non_finite() {
        let err = LogitField::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn predicted_marginal_hand_sum() {
        let p = ProbField::from_foreground(&[0.9, 0.8, 0.1, 0.2]).unwrap();
        let m = predicted_marginal(&p);
        assert_abs_diff_eq!(m.get(0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_rows_give_uniform_marginal() {
        let shape = Shape::new(3, 5, 4).unwrap();
        let m = predicted_marginal(&ProbField::uniform(shape));
        for &v in m.values() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn gt_marginal_counts() {
        let g = LabelField::from_labels(2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(gt_marginal(&g).values(), &[0.5, 0.5]);

        let single = LabelField::new(64, 64, 3, vec![0; 64 * 64]).unwrap();
        assert_eq!(gt_marginal(&single).values(), &[1.0, 0.0, 0.0]);

        // 10% foreground
        let labels = (0..100).map(|i| usize::from(i >= 10)).collect();
        let g = LabelField::new(10, 10, 2, labels).unwrap();
        assert_eq!(gt_marginal(&g).values(), &[0.1, 0.9]);
    }

    #[test]
    fn one_hot_marginal_equals_gt_marginal() {
        let g = LabelField::new(2, 3, 3, vec![0, 2, 2, 1, 0, 2]).unwrap();
        assert_eq!(predicted_marginal(&g.one_hot()), gt_marginal(&g));
    }

    #[test]
    fn label_field_validation() {
        assert!(LabelField::from_labels(2, vec![0, 2]).is_err());
        assert!(LabelField::from_labels(1, vec![0, 0]).is_err());
        assert!(LabelField::new(2, 2, 2, vec![0, 1, 1]).is_err());
        let g = LabelField::from_labels(3, vec![0, 2, 2]).unwrap();
        assert_eq!(g.region_sizes(), &[1, 0, 2]);
        assert!(!g.all_regions_present());
        assert_eq!(g.region(2).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn prob_field_validation() {
        assert!(ProbField::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(ProbField::from_rows(&[vec![1.5, -0.5]]).is_err());
        assert!(Marginal::new(vec![0.3, 0.3]).is_err());
        assert!(Marginal::new(vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbField::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        assert_eq!(p.argmax(), vec![0, 1]);
    }
}
