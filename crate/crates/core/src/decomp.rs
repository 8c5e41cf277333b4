//! Exact decompositions of log-Dice and CE into a ground-truth matching term
//! and a label-marginal bias term.
//!
//! Each decomposition carries its additive constant explicitly, so that
//! `matching_term + bias_term + additive_constant` reproduces the loss to
//! rounding error instead of "up to a constant".

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{check_same_grid, gt_marginal, predicted_marginal, LabelField, ProbField};
use crate::losses::{region_sums, Smoothing};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub matching_term: f64,
    pub bias_term: f64,
    pub additive_constant: f64,
    pub total_reconstructed: f64,
}

impl Decomposition {
    fn new(matching_term: f64, bias_term: f64, additive_constant: f64) -> Self {
        Self {
            matching_term,
            bias_term,
            additive_constant,
            total_reconstructed: matching_term + bias_term + additive_constant,
        }
    }

    /// Same decomposition with the additive constant shifted by `delta`.
    /// Only used to build negative controls for the verification suite.
    pub fn with_constant_offset(self, delta: f64) -> Self {
        Self::new(self.matching_term, self.bias_term, self.additive_constant + delta)
    }
}

/// Binary log-Dice decomposition plus the marginal form of its bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryDiceDecomposition {
    #[serde(flatten)]
    pub parts: Decomposition,
    /// `DB₁ − log|Ω|`, which equals `log(p̂₁ + ŷ₁)`.
    pub bias_marginal_form: f64,
}

fn require_all_regions(g: &LabelField) -> Result<()> {
    match g.region_sizes().iter().position(|&n| n == 0) {
        Some(class) => Err(Error::UndefinedRegion { class }),
        None => Ok(()),
    }
}

/// `−log(S_k/|Ω_k| + ε)` per class: the matching term with the smoothing of
/// region-weighted CE, which is what Jensen's inequality compares it against.
/// On region-constant fields it equals CE to rounding.
pub fn region_matching_terms(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<Vec<f64>> {
    check_same_grid(p, g)?;
    require_all_regions(g)?;
    let sums = region_sums(p, g);
    Ok((0..g.num_classes())
        .map(|k| -(sums[k] / g.region_size(k) as f64 + s.eps()).ln())
        .collect())
}

// −log of the mean ground-truth-region probability, carrying the smoothing of
// −log(Dice_k + ε) so that the reconstruction is exact to rounding:
// S/N · (P+N)/(P+N+ε) + ε (P+N)/(2N).
fn dice_matching_term(s_k: f64, p_k: f64, n_k: f64, eps: f64) -> f64 {
    let total = p_k + n_k;
    -(s_k / n_k * total / (total + eps) + eps * total / (2.0 * n_k)).ln()
}

/// `−Σ_k log Dice_k = DF + DB + Σ_k log(1/(2ŷ_k))` with
/// `DF ≈ −Σ_k log(S_k/|Ω_k|)` and `DB = Σ_k log(p̂_k + ŷ_k)`.
///
/// `DF` absorbs the loss's smoothing; it differs from [`region_matching_terms`]
/// by `O(ε/Dice_k)`.
pub fn decompose_log_dice(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<Decomposition> {
    check_same_grid(p, g)?;
    require_all_regions(g)?;
    let sums = region_sums(p, g);
    let totals = p.class_totals();
    let y = gt_marginal(g);
    let q = predicted_marginal(p);
    let mut df = 0.0;
    let mut db = 0.0;
    let mut c = 0.0;
    for k in 0..g.num_classes() {
        df += dice_matching_term(sums[k], totals[k], g.region_size(k) as f64, s.eps());
        db += (q.get(k) + y.get(k)).ln();
        c -= (2.0 * y.get(k)).ln();
    }
    Ok(Decomposition::new(df, db, c))
}

/// Foreground-only decomposition of `−log Dice₁`:
/// `DF₁ ≈ −log(S₁/|Ω₁|)`, `DB₁ = log(Σ_Ω p_i1 + |Ω₁|)`, constant `−log 2 − log|Ω₁|`.
pub fn decompose_binary_dice(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<BinaryDiceDecomposition> {
    check_same_grid(p, g)?;
    if !g.is_binary() {
        return Err(Error::InvalidInput(format!(
            "binary decomposition needs K = 2, got {}",
            g.num_classes()
        )));
    }
    let n1 = g.region_size(0);
    if n1 == 0 {
        return Err(Error::UndefinedRegion { class: 0 });
    }
    let s1: f64 = g.region(0).map(|i| p.get(i, 0)).sum();
    let total1: f64 = (0..p.num_pixels()).map(|i| p.get(i, 0)).sum();
    let df1 = dice_matching_term(s1, total1, n1 as f64, s.eps());
    let db1 = (total1 + n1 as f64).ln();
    let c = -(2f64.ln()) - (n1 as f64).ln();
    Ok(BinaryDiceDecomposition {
        parts: Decomposition::new(df1, db1, c),
        bias_marginal_form: db1 - (g.num_pixels() as f64).ln(),
    })
}

/// Foreground and background matching terms of binary region-weighted CE.
///
/// `CE₂` reads `1 − p_i1` from the background channel.
pub fn split_binary_ce(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<(f64, f64)> {
    check_same_grid(p, g)?;
    if !g.is_binary() {
        return Err(Error::InvalidInput("binary CE split needs K = 2".into()));
    }
    require_all_regions(g)?;
    let term = |class: usize| {
        let acc: f64 = g.region(class).map(|i| -(p.get(i, class) + s.eps()).ln()).sum();
        acc / g.region_size(class) as f64
    };
    Ok((term(0), term(1)))
}

/// Monte-Carlo estimate of `H(F|K)` after substituting `P(f_i|k) = p_ik / p̂_k`:
/// `−(1/|Ω|) Σ_k Σ_{i∈Ω_k} log((p_ik + ε)/(p̂_k + ε))`.
pub fn mc_conditional_entropy(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<f64> {
    check_same_grid(p, g)?;
    require_all_regions(g)?;
    let q = predicted_marginal(p);
    if let Some(class) = q.values().iter().position(|&v| v <= 0.0) {
        return Err(Error::DegenerateMarginal { class });
    }
    let log_q: Vec<f64> = q.values().iter().map(|&v| (v + s.eps()).ln()).collect();
    let acc: f64 = p
        .rows()
        .zip(g.labels())
        .map(|(row, &l)| (row[l] + s.eps()).ln() - log_q[l])
        .sum();
    Ok(-acc / g.num_pixels() as f64)
}

/// `H(y) = −Σ_k ŷ_k log(ŷ_k + ε)`, the constant linking pixel-averaged CE to
/// `Ĥ(F|K) + KL(y‖p)`.
pub fn label_entropy(g: &LabelField, s: Smoothing) -> f64 {
    -gt_marginal(g)
        .values()
        .iter()
        .map(|&y| y * (y + s.eps()).ln())
        .sum::<f64>()
}

/// CE decomposed as `Ĥ(F|K)` (matching) + `KL(y‖p)` (bias) + `H(y)` (constant).
pub fn decompose_ce(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<Decomposition> {
    let h = mc_conditional_entropy(p, g, s)?;
    let kl = crate::losses::kl_marginal(&gt_marginal(g), &predicted_marginal(p), s)?;
    Ok(Decomposition::new(h, kl, label_entropy(g, s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ce_pixel_avg, ce_region_weighted, log_dice_loss};
    use crate::rng::SplitMix64;
    use crate::sampling::{constant_per_region, random_instance};
    use approx::assert_abs_diff_eq;

    fn eps() -> Smoothing {
        Smoothing::default()
    }

    #[test]
    fn log_dice_reconstruction_on_random_instances() {
        let mut rng = SplitMix64::new(11);
        for k in 2..=5 {
            for _ in 0..25 {
                let n = rng.range(k, 256);
                let inst = random_instance(&mut rng, k, n, 2.0, 1.0);
                let d = decompose_log_dice(&inst.probs, &inst.labels, eps()).unwrap();
                let loss = log_dice_loss(&inst.probs, &inst.labels, false, eps()).unwrap().value;
                assert!((loss - d.total_reconstructed).abs() <= 1e-9, "{loss} vs {d:?}");
            }
        }
    }

    #[test]
    fn perfect_prediction_decomposes_to_zero() {
        let g = LabelField::from_labels(2, vec![0, 1, 0, 1]).unwrap();
        let d = decompose_log_dice(&g.one_hot(), &g, eps()).unwrap();
        assert_abs_diff_eq!(d.matching_term, 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(d.bias_term, 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(d.additive_constant, 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(d.total_reconstructed, 0.0, epsilon = 1e-11);
    }

    #[test]
    fn uniform_matching_term_is_k_log_k() {
        let g = LabelField::from_labels(4, vec![0, 1, 2, 3, 3, 1]).unwrap();
        let d = decompose_log_dice(&ProbField::uniform(g.shape()), &g, eps()).unwrap();
        assert_abs_diff_eq!(d.matching_term, 4.0 * 4f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn empty_region_is_an_error() {
        let g = LabelField::from_labels(3, vec![0, 0, 2]).unwrap();
        let p = ProbField::uniform(g.shape());
        assert_eq!(decompose_log_dice(&p, &g, eps()), Err(Error::UndefinedRegion { class: 1 }));
    }

    #[test]
    fn binary_dice_hand_instance() {
        let p = ProbField::from_foreground(&[0.9, 0.8, 0.1, 0.2]).unwrap();
        let g = LabelField::from_labels(2, vec![0, 0, 1, 1]).unwrap();
        let d = decompose_binary_dice(&p, &g, eps()).unwrap();
        assert_abs_diff_eq!(d.parts.matching_term, -(0.85f64.ln()), epsilon = 1e-11);
        assert_abs_diff_eq!(d.parts.matching_term, 0.162_519, epsilon = 1e-6);
        assert_abs_diff_eq!(d.parts.bias_term, 4f64.ln(), epsilon = 1e-11);
        assert_abs_diff_eq!(d.parts.additive_constant, -(4f64.ln()), epsilon = 1e-11);
        assert_abs_diff_eq!(d.parts.total_reconstructed, 0.162_519, epsilon = 1e-6);
        // log(p̂₁ + ŷ₁) = log(0.5 + 0.5)
        assert_abs_diff_eq!(d.bias_marginal_form, 0.0, epsilon = 1e-11);
    }

    #[test]
    fn binary_dice_rejects_multiclass() {
        let g = LabelField::from_labels(3, vec![0, 1, 2]).unwrap();
        let p = ProbField::uniform(g.shape());
        assert!(matches!(decompose_binary_dice(&p, &g, eps()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn binary_ce_split_cases() {
        let g = LabelField::from_labels(2, vec![0, 1, 1, 0, 1]).unwrap();
        let (c1, c2) = split_binary_ce(&g.one_hot(), &g, eps()).unwrap();
        assert_abs_diff_eq!(c1, 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(c2, 0.0, epsilon = 1e-11);
        let (c1, c2) = split_binary_ce(&ProbField::uniform(g.shape()), &g, eps()).unwrap();
        assert_abs_diff_eq!(c1, 2f64.ln(), epsilon = 1e-11);
        assert_abs_diff_eq!(c2, 2f64.ln(), epsilon = 1e-11);

        let mut rng = SplitMix64::new(5);
        let inst = random_instance(&mut rng, 2, 40, 2.0, 1.0);
        let (c1, c2) = split_binary_ce(&inst.probs, &inst.labels, eps()).unwrap();
        let ce = ce_region_weighted(&inst.probs, &inst.labels, eps()).unwrap().value;
        assert!((c1 + c2 - ce).abs() <= 1e-12);
    }

    #[test]
    fn conditional_entropy_cases() {
        // one-hot prediction: Ĥ = Σ ŷ_k log ŷ_k
        let g = LabelField::from_labels(3, vec![0, 1, 1, 2, 2, 2]).unwrap();
        let h = mc_conditional_entropy(&g.one_hot(), &g, eps()).unwrap();
        let expected: f64 = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().map(|y: &f64| y * y.ln()).sum();
        assert_abs_diff_eq!(h, expected, epsilon = 1e-10);
        assert!(h <= 0.0);

        let h = mc_conditional_entropy(&ProbField::uniform(g.shape()), &g, eps()).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn conditional_entropy_rejects_zero_marginal() {
        let g = LabelField::from_labels(2, vec![0, 1]).unwrap();
        let p = ProbField::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(mc_conditional_entropy(&p, &g, eps()), Err(Error::DegenerateMarginal { class: 1 }));
    }

    #[test]
    fn ce_identity_with_entropy_constant() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..50 {
            let k = rng.range(2, 5);
            let inst = random_instance(&mut rng, k, 64, 3.0, 1.0);
            let d = decompose_ce(&inst.probs, &inst.labels, eps()).unwrap();
            let ce = ce_pixel_avg(&inst.probs, &inst.labels, eps()).unwrap();
            assert!((ce - d.total_reconstructed).abs() <= 1e-9);
        }
    }

    #[test]
    fn jensen_bounds_hold() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..100 {
            let k = rng.range(2, 4);
            let inst = random_instance(&mut rng, k, 50, 2.0, 1.0);
            let df: f64 = region_matching_terms(&inst.probs, &inst.labels, eps()).unwrap().iter().sum();
            let ce = ce_region_weighted(&inst.probs, &inst.labels, eps()).unwrap().value;
            assert!(df <= ce + 1e-12);
        }
        let g = LabelField::from_labels(3, vec![0, 1, 2, 2, 1, 0, 0]).unwrap();
        let p = constant_per_region(&mut rng, &g);
        let df: f64 = region_matching_terms(&p, &g, eps()).unwrap().iter().sum();
        let ce = ce_region_weighted(&p, &g, eps()).unwrap().value;
        assert_abs_diff_eq!(df, ce, epsilon = 1e-12);
    }

    #[test]
    fn matching_term_forms_agree_up_to_smoothing() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 3, 60, 1.0, 1.0);
            let a: f64 = region_matching_terms(&inst.probs, &inst.labels, eps()).unwrap().iter().sum();
            let b = decompose_log_dice(&inst.probs, &inst.labels, eps()).unwrap().matching_term;
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn reconstruction_exact_with_tiny_dice() {
        // class 2 has one pixel with p ≈ 1e-6 while the class soaks up mass elsewhere
        let g = LabelField::from_labels(3, vec![0, 0, 0, 1, 1, 1, 2]).unwrap();
        let mut rows = vec![vec![0.1, 0.1, 0.8]; 6];
        rows.push(vec![0.5, 0.499999, 1e-6]);
        let p = ProbField::from_rows(&rows).unwrap();
        let d = decompose_log_dice(&p, &g, eps()).unwrap();
        let loss = log_dice_loss(&p, &g, false, eps()).unwrap().value;
        assert!((loss - d.total_reconstructed).abs() <= 1e-12, "{}", loss - d.total_reconstructed);
    }

    #[test]
    fn serializes_flat() {
        let g = LabelField::from_labels(2, vec![0, 1]).unwrap();
        let d = decompose_binary_dice(&ProbField::uniform(g.shape()), &g, eps()).unwrap();
        let v: serde_json::Value = serde_json::to_value(d).unwrap();
        for key in ["matching_term", "bias_term", "additive_constant", "total_reconstructed", "bias_marginal_form"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
