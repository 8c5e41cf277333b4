//! Segmentation losses and label-marginal regularizers.
//!
//! Every loss is a pure function of a probability field and a label field.
//! Region-based terms skip classes whose ground-truth region is empty and list
//! them in the returned diagnostics instead of failing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::field::{check_same_grid, gt_marginal, predicted_marginal, LabelField, Marginal, ProbField};

/// Additive guard inside every log and every Dice denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing(f64);

impl Smoothing {
    pub const DEFAULT_EPS: f64 = 1e-12;

    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1e-6) {
            return Err(invalid_param("eps", format!("need 0 < eps <= 1e-6, got {eps}")));
        }
        Ok(Self(eps))
    }

    #[inline]
    pub fn eps(self) -> f64 {
        self.0
    }
}

impl Default for Smoothing {
    fn default() -> Self {
        Self(Self::DEFAULT_EPS)
    }
}

/// Default focusing parameter of the focal loss.
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

fn default_gamma() -> f64 {
    DEFAULT_FOCAL_GAMMA
}

fn default_foreground_only() -> bool {
    true
}

/// A loss, regularizer or weighted combination of them.
///
/// Serialises as a JSON object tagged by `kind`, e.g.
/// `{"kind":"composite","terms":[{"weight":1.0,"loss":{"kind":"ce_pixel_avg"}},
/// {"weight":1.0,"loss":{"kind":"l1_marginal"}}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// `−Σ_k (1/|Ω_k|) Σ_{i∈Ω_k} log p_ik`
    CeRegionWeighted,
    /// `−(1/|Ω|) Σ_k Σ_{i∈Ω_k} log p_ik`
    CePixelAvg,
    Focal {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// `Σ_k (1 − Dice_k)`
    LinearDice {
        #[serde(default = "default_foreground_only")]
        foreground_only: bool,
    },
    /// `−Σ_k log Dice_k`
    LogDice {
        #[serde(default = "default_foreground_only")]
        foreground_only: bool,
    },
    /// Generalized Dice with weights `1/|Ω_k|²`.
    Gdice,
    /// Label-marginal bias of log-Dice, `Σ_k log(p̂_k + ŷ_k)`.
    DiceBias {
        #[serde(default = "default_foreground_only")]
        foreground_only: bool,
    },
    /// `Σ_k ŷ_k log(ŷ_k / p̂_k)`
    KlMarginal,
    /// `Σ_k |ŷ_k − p̂_k|`
    L1Marginal,
    Composite { terms: Vec<WeightedTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTerm {
    pub weight: f64,
    pub loss: LossSpec,
}

impl LossSpec {
    /// Cross-entropy used as the base of every compound loss.
    pub fn ce() -> Self {
        LossSpec::CePixelAvg
    }

    /// `CE + λ·term`.
    pub fn ce_plus(lambda: f64, term: LossSpec) -> Self {
        LossSpec::Composite {
            terms: vec![
                WeightedTerm {
                    weight: 1.0,
                    loss: Self::ce(),
                },
                WeightedTerm {
                    weight: lambda,
                    loss: term,
                },
            ],
        }
    }

    pub fn ours_l1(lambda: f64) -> Self {
        Self::ce_plus(lambda, LossSpec::L1Marginal)
    }

    pub fn ours_kl(lambda: f64) -> Self {
        Self::ce_plus(lambda, LossSpec::KlMarginal)
    }

    pub fn dice_ce(lambda: f64, foreground_only: bool) -> Self {
        Self::ce_plus(lambda, LossSpec::LinearDice { foreground_only })
    }

    pub fn log_dice_ce(lambda: f64, foreground_only: bool) -> Self {
        Self::ce_plus(lambda, LossSpec::LogDice { foreground_only })
    }

    pub fn dice_bias_ce(lambda: f64, foreground_only: bool) -> Self {
        Self::ce_plus(lambda, LossSpec::DiceBias { foreground_only })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Focal { gamma } if !(gamma.is_finite() && *gamma >= 0.0) => {
                Err(invalid_param("gamma", format!("need gamma >= 0, got {gamma}")))
            }
            LossSpec::Composite { terms } => {
                if terms.is_empty() {
                    return Err(invalid_param("terms", "composite loss needs at least one term"));
                }
                for t in terms {
                    if !(t.weight.is_finite() && t.weight >= 0.0) {
                        return Err(invalid_param(
                            "weight",
                            format!("weights must be finite and >= 0, got {}", t.weight),
                        ));
                    }
                    t.loss.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("loss spec: {e}")))?;
        Self::from_value(value)
    }

    /// Parses an already-decoded JSON value, rejecting keys the kind does not use.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        check_spec_keys(&value)?;
        let spec: LossSpec =
            serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("loss spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss specs always serialise")
    }

    /// Whether the loss reads only the predicted marginal (and so has a kink or
    /// a singularity on the marginal rather than on pixels).
    pub fn uses_l1(&self) -> bool {
        match self {
            LossSpec::L1Marginal => true,
            LossSpec::Composite { terms } => terms.iter().any(|t| t.loss.uses_l1()),
            _ => false,
        }
    }

    fn foreground_only(&self) -> bool {
        matches!(
            self,
            LossSpec::LinearDice { foreground_only: true }
                | LossSpec::LogDice { foreground_only: true }
                | LossSpec::DiceBias { foreground_only: true }
        )
    }
}

// Serde ignores extra keys on unit variants of internally tagged enums, so
// unknown keys are rejected here before deserialising.
fn check_spec_keys(value: &serde_json::Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::InvalidInput("loss spec must be a JSON object".into()))?;
    let kind = obj.get("kind").and_then(|k| k.as_str()).unwrap_or_default();
    let allowed: &[&str] = match kind {
        "focal" => &["kind", "gamma"],
        "linear_dice" | "log_dice" | "dice_bias" => &["kind", "foreground_only"],
        "composite" => &["kind", "terms"],
        _ => &["kind"],
    };
    if let Some(bad) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidInput(format!("unknown key `{bad}` in `{kind}` loss spec")));
    }
    if let Some(terms) = obj.get("terms").and_then(|t| t.as_array()) {
        for term in terms {
            if let Some(loss) = term.get("loss") {
                check_spec_keys(loss)?;
            }
        }
    }
    Ok(())
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fg = |fg: bool| if fg { "_fg" } else { "" };
        match self {
            LossSpec::CeRegionWeighted => write!(f, "ce_region_weighted"),
            LossSpec::CePixelAvg => write!(f, "ce_pixel_avg"),
            LossSpec::Focal { gamma } => write!(f, "focal(gamma={gamma})"),
            LossSpec::LinearDice { foreground_only } => write!(f, "linear_dice{}", fg(*foreground_only)),
            LossSpec::LogDice { foreground_only } => write!(f, "log_dice{}", fg(*foreground_only)),
            LossSpec::Gdice => write!(f, "gdice"),
            LossSpec::DiceBias { foreground_only } => write!(f, "dice_bias{}", fg(*foreground_only)),
            LossSpec::KlMarginal => write!(f, "kl_marginal"),
            LossSpec::L1Marginal => write!(f, "l1_marginal"),
            LossSpec::Composite { terms } => {
                let parts: Vec<String> = terms.iter().map(|t| format!("{}*{}", t.weight, t.loss)).collect();
                write!(f, "{}", parts.join("+"))
            }
        }
    }
}

/// A loss value together with the classes whose terms were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub skipped_classes: Vec<usize>,
}

impl LossValue {
    fn clean(value: f64) -> Self {
        Self {
            value,
            skipped_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Total loss with its individual weighted terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<TermValue>,
    pub skipped_classes: Vec<usize>,
}

fn merge_skipped(into: &mut Vec<usize>, from: &[usize]) {
    for &c in from {
        if !into.contains(&c) {
            into.push(c);
        }
    }
    into.sort_unstable();
}

/// Classes a Dice-type loss sums over, plus the ones it had to skip.
pub(crate) fn dice_classes(g: &LabelField, foreground_only: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if foreground_only && !g.is_binary() {
        return Err(Error::InvalidInput(format!(
            "foreground-only Dice needs binary labels, got K = {}",
            g.num_classes()
        )));
    }
    let candidates: Vec<usize> = if foreground_only { vec![0] } else { (0..g.num_classes()).collect() };
    let (used, skipped) = candidates.into_iter().partition(|&k| g.region_size(k) > 0);
    Ok((used, skipped))
}

/// Per-class sums `S_k = Σ_{i∈Ω_k} p_ik`.
pub(crate) fn region_sums(p: &ProbField, g: &LabelField) -> Vec<f64> {
    let mut s = vec![0.0; g.num_classes()];
    for (row, &l) in p.rows().zip(g.labels()) {
        s[l] += row[l];
    }
    s
}

pub fn ce_region_weighted(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<LossValue> {
    check_same_grid(p, g)?;
    let mut per_class = vec![0.0; g.num_classes()];
    for (row, &l) in p.rows().zip(g.labels()) {
        per_class[l] -= (row[l] + s.eps()).ln();
    }
    let mut value = 0.0;
    let mut skipped = Vec::new();
    for (k, acc) in per_class.into_iter().enumerate() {
        match g.region_size(k) {
            0 => skipped.push(k),
            n => value += acc / n as f64,
        }
    }
    Ok(LossValue {
        value,
        skipped_classes: skipped,
    })
}

pub fn ce_pixel_avg(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<f64> {
    check_same_grid(p, g)?;
    let total: f64 = p
        .rows()
        .zip(g.labels())
        .map(|(row, &l)| -(row[l] + s.eps()).ln())
        .sum();
    Ok(total / g.num_pixels() as f64)
}

pub fn focal_loss(p: &ProbField, g: &LabelField, gamma: f64, s: Smoothing) -> Result<f64> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(invalid_param("gamma", format!("need gamma >= 0, got {gamma}")));
    }
    check_same_grid(p, g)?;
    let total: f64 = p
        .rows()
        .zip(g.labels())
        .map(|(row, &l)| {
            let q = row[l];
            -(1.0 - q).powf(gamma) * (q + s.eps()).ln()
        })
        .sum();
    Ok(total / g.num_pixels() as f64)
}

/// Soft Dice of class `k`: `2 Σ_{Ω_k} p_ik / (Σ_Ω p_ik + |Ω_k|)`.
pub fn dice_coeff(p: &ProbField, g: &LabelField, k: usize, s: Smoothing) -> Result<f64> {
    check_same_grid(p, g)?;
    if k >= g.num_classes() {
        return Err(invalid_param("k", format!("class {k} out of range")));
    }
    let n = g.region_size(k);
    if n == 0 {
        return Err(Error::UndefinedRegion { class: k });
    }
    let inter: f64 = g.region(k).map(|i| p.get(i, k)).sum();
    let total: f64 = (0..p.num_pixels()).map(|i| p.get(i, k)).sum();
    Ok(2.0 * inter / (total + n as f64 + s.eps()))
}

fn dice_values(p: &ProbField, g: &LabelField, foreground_only: bool, s: Smoothing) -> Result<(Vec<f64>, Vec<usize>)> {
    check_same_grid(p, g)?;
    let (used, skipped) = dice_classes(g, foreground_only)?;
    let inter = region_sums(p, g);
    let totals = p.class_totals();
    let dice = used
        .iter()
        .map(|&k| 2.0 * inter[k] / (totals[k] + g.region_size(k) as f64 + s.eps()))
        .collect();
    Ok((dice, skipped))
}

pub fn linear_dice_loss(p: &ProbField, g: &LabelField, foreground_only: bool, s: Smoothing) -> Result<LossValue> {
    let (dice, skipped) = dice_values(p, g, foreground_only, s)?;
    Ok(LossValue {
        value: dice.iter().map(|d| 1.0 - d).sum(),
        skipped_classes: skipped,
    })
}

pub fn log_dice_loss(p: &ProbField, g: &LabelField, foreground_only: bool, s: Smoothing) -> Result<LossValue> {
    let (dice, skipped) = dice_values(p, g, foreground_only, s)?;
    Ok(LossValue {
        value: dice.iter().map(|d| -(d + s.eps()).ln()).sum(),
        skipped_classes: skipped,
    })
}

/// `1 − 2 Σ_k w_k S_k / Σ_k w_k (Σ_Ω p_ik + |Ω_k|)` with `w_k = 1/|Ω_k|²`.
pub fn gdice_loss(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<LossValue> {
    check_same_grid(p, g)?;
    let inter = region_sums(p, g);
    let totals = p.class_totals();
    let (mut num, mut den) = (0.0, 0.0);
    let mut skipped = Vec::new();
    for k in 0..g.num_classes() {
        let n = g.region_size(k);
        if n == 0 {
            skipped.push(k);
            continue;
        }
        let w = 1.0 / (n as f64 * n as f64);
        num += w * inter[k];
        den += w * (totals[k] + n as f64);
    }
    Ok(LossValue {
        value: 1.0 - 2.0 * num / (den + s.eps()),
        skipped_classes: skipped,
    })
}

fn check_marginals(y: &Marginal, p: &Marginal) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::InvalidInput(format!(
            "marginals have {} and {} classes",
            y.len(),
            p.len()
        )));
    }
    Ok(())
}

/// `Σ_k ŷ_k log((ŷ_k + ε)/(p̂_k + ε))`.
pub fn kl_marginal(y: &Marginal, p: &Marginal, s: Smoothing) -> Result<f64> {
    check_marginals(y, p)?;
    Ok(y.values()
        .iter()
        .zip(p.values())
        .map(|(&yk, &pk)| yk * ((yk + s.eps()) / (pk + s.eps())).ln())
        .sum())
}

/// `Σ_k |ŷ_k − p̂_k|`.
pub fn l1_marginal(y: &Marginal, p: &Marginal) -> Result<f64> {
    check_marginals(y, p)?;
    Ok(y.values().iter().zip(p.values()).map(|(a, b)| (a - b).abs()).sum())
}

/// Dice label-marginal bias in marginal form, `Σ_k log(p̂_k + ŷ_k + ε)`.
///
/// With `foreground_only` only class 0 contributes; this is the binary bias
/// `DB₁` up to the constant `log|Ω|`.
pub fn dice_bias(p: &ProbField, g: &LabelField, foreground_only: bool, s: Smoothing) -> Result<f64> {
    check_same_grid(p, g)?;
    if foreground_only && !g.is_binary() {
        return Err(Error::InvalidInput("foreground-only bias needs binary labels".into()));
    }
    let y = gt_marginal(g);
    let q = predicted_marginal(p);
    let classes = if foreground_only { 1 } else { g.num_classes() };
    Ok((0..classes).map(|k| (q.get(k) + y.get(k) + s.eps()).ln()).sum())
}

/// Evaluates a single (non-composite) loss.
fn evaluate_leaf(spec: &LossSpec, p: &ProbField, g: &LabelField, s: Smoothing) -> Result<LossValue> {
    match spec {
        LossSpec::CeRegionWeighted => ce_region_weighted(p, g, s),
        LossSpec::CePixelAvg => ce_pixel_avg(p, g, s).map(LossValue::clean),
        LossSpec::Focal { gamma } => focal_loss(p, g, *gamma, s).map(LossValue::clean),
        LossSpec::LinearDice { foreground_only } => linear_dice_loss(p, g, *foreground_only, s),
        LossSpec::LogDice { foreground_only } => log_dice_loss(p, g, *foreground_only, s),
        LossSpec::Gdice => gdice_loss(p, g, s),
        LossSpec::DiceBias { foreground_only } => dice_bias(p, g, *foreground_only, s).map(LossValue::clean),
        LossSpec::KlMarginal => {
            check_same_grid(p, g)?;
            kl_marginal(&gt_marginal(g), &predicted_marginal(p), s).map(LossValue::clean)
        }
        LossSpec::L1Marginal => {
            check_same_grid(p, g)?;
            l1_marginal(&gt_marginal(g), &predicted_marginal(p)).map(LossValue::clean)
        }
        LossSpec::Composite { .. } => unreachable!("composites are expanded by the caller"),
    }
}

/// Evaluates any loss spec. Composite terms with zero weight are reported but
/// do not enter the total.
pub fn composite_loss(spec: &LossSpec, p: &ProbField, g: &LabelField, s: Smoothing) -> Result<LossReport> {
    spec.validate()?;
    if spec.foreground_only() && !g.is_binary() {
        return Err(Error::InvalidInput("foreground-only Dice needs binary labels".into()));
    }
    match spec {
        LossSpec::Composite { terms } => {
            let mut report = LossReport {
                total: 0.0,
                terms: Vec::with_capacity(terms.len()),
                skipped_classes: Vec::new(),
            };
            for t in terms {
                let sub = composite_loss(&t.loss, p, g, s)?;
                if t.weight != 0.0 {
                    report.total += t.weight * sub.total;
                }
                merge_skipped(&mut report.skipped_classes, &sub.skipped_classes);
                report.terms.push(TermValue {
                    name: t.loss.to_string(),
                    weight: t.weight,
                    value: sub.total,
                });
            }
            Ok(report)
        }
        leaf => {
            let v = evaluate_leaf(leaf, p, g, s)?;
            Ok(LossReport {
                total: v.value,
                terms: vec![TermValue {
                    name: leaf.to_string(),
                    weight: 1.0,
                    value: v.value,
                }],
                skipped_classes: v.skipped_classes,
            })
        }
    }
}

/// Shorthand for the scalar value of a spec with default smoothing.
pub fn loss_value(spec: &LossSpec, p: &ProbField, g: &LabelField) -> Result<f64> {
    composite_loss(spec, p, g, Smoothing::default()).map(|r| r.total)
}
