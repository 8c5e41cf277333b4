//! Random (prediction, label) instances for the verification suites.

use crate::field::{temperature_softmax, LabelField, LogitField, ProbField, Shape};
use crate::rng::SplitMix64;

/// A random problem instance: logits, their softmax and labels with every region non-empty.
#[derive(Debug, Clone)]
pub struct Instance {
    pub logits: LogitField,
    pub probs: ProbField,
    pub labels: LabelField,
    pub tau: f64,
}

/// Labels over `n` pixels with every one of `k` classes present, in shuffled order.
pub fn random_labels(rng: &mut SplitMix64, k: usize, n: usize) -> LabelField {
    assert!(n >= k, "need at least one pixel per class");
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.below(k) }).collect();
    rng.shuffle(&mut labels);
    LabelField::new(1, n, k, labels).expect("valid by construction")
}

/// Gaussian logits of standard deviation `scale`.
pub fn random_logits(rng: &mut SplitMix64, shape: Shape, scale: f64) -> LogitField {
    let data = (0..shape.num_pixels() * shape.num_classes)
        .map(|_| scale * rng.normal())
        .collect();
    LogitField::from_raw(shape, data)
}

/// Instance with `k` classes, `n` pixels, Gaussian logits (`scale`) and temperature `tau`.
pub fn random_instance(rng: &mut SplitMix64, k: usize, n: usize, scale: f64, tau: f64) -> Instance {
    let labels = random_labels(rng, k, n);
    let logits = random_logits(rng, labels.shape(), scale);
    let probs = temperature_softmax(&logits, tau).expect("finite logits");
    Instance {
        logits,
        probs,
        labels,
        tau,
    }
}

/// Instance with `K ∈ k_range` and `|Ω| ∈ [K, max_pixels]` drawn from the stream.
pub fn random_sized_instance(
    rng: &mut SplitMix64,
    k_range: (usize, usize),
    max_pixels: usize,
) -> Instance {
    let k = rng.range(k_range.0, k_range.1);
    let n = rng.range(k.max(4), max_pixels);
    random_instance(rng, k, n, 2.0, 1.0)
}

/// Prediction that is constant inside each ground-truth region.
pub fn constant_per_region(rng: &mut SplitMix64, labels: &LabelField) -> ProbField {
    let k = labels.num_classes();
    let per_class: Vec<Vec<f64>> = (0..k).map(|_| rng.simplex(k)).collect();
    let shape = labels.shape();
    let probs: Vec<f64> = labels
        .labels()
        .iter()
        .flat_map(|&l| per_class[l].iter().copied())
        .collect();
    ProbField::new(shape.height, shape.width, k, probs).expect("simplex rows")
}
