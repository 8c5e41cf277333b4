//! Numerical certificates for the decomposition identities, the bias-term
//! minimiser, the Jensen bounds and the bias curves.
//!
//! Every check draws from its own PRNG stream derived from `(seed, check id)`,
//! so results do not depend on the order in which checks run.

use rayon::prelude::*;

use crate::decomp::{
    decompose_binary_dice, decompose_ce, decompose_log_dice, label_entropy, mc_conditional_entropy,
    region_matching_terms, split_binary_ce,
};
use crate::error::{invalid_param, Error, Result};
use crate::field::{gt_marginal, predicted_marginal, LabelField, Marginal, ProbField};
use crate::grad::{gradcheck, loss_kinds, recommended_composites};
use crate::losses::{
    ce_pixel_avg, ce_region_weighted, kl_marginal, l1_marginal, linear_dice_loss, log_dice_loss, Smoothing,
};
use crate::rng::SplitMix64;
use crate::sampling::{constant_per_region, random_instance, random_labels, random_sized_instance, Instance};

/// Tolerance for "g(p) < g(t)" and the concavity inequality.
pub const G_TOL: f64 = 1e-12;

/// Largest class count accepted by the lattice search.
pub const MAX_LATTICE_CLASSES: usize = 4;

const MAX_LATTICE_POINTS: u128 = 200_000_000;

/// Stream ids, one per check.
mod stream {
    pub const LOG_DICE: u64 = 1;
    pub const BINARY: u64 = 2;
    pub const PROP1: u64 = 3;
    pub const CONCAVITY: u64 = 4;
    pub const BOUNDS: u64 = 5;
    pub const PROP2: u64 = 6;
    pub const SCALE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

/// `g(p) = Σ_k log(p_k + y_k)`.
pub fn g_bias(p: &[f64], y: &[f64]) -> f64 {
    p.iter().zip(y).map(|(a, b)| (a + b).ln()).sum()
}

fn require_positive(y: &Marginal) -> Result<()> {
    if y.values().iter().any(|&v| v <= 0.0) {
        return Err(invalid_param("y", "every class proportion must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub y: Marginal,
    /// Vertex `t = e_j` with `j` the first maximiser of `y`.
    pub vertex_t: Marginal,
    /// All maximisers of `y`; more than one means a tie.
    pub tied_vertices: Vec<usize>,
    /// Lattice spacing, or 0 for the sampled certificate.
    pub grid_step: f64,
    pub points_checked: u64,
    pub argmin_on_grid: Marginal,
    pub min_value: f64,
    pub g_at_t: f64,
    pub violations: u64,
    /// Largest `g(t) − g(p)` seen (≤ 0 when `t` is the minimiser).
    pub max_violation: f64,
    /// L∞ distance from the grid argmin to the nearest tied vertex.
    pub argmin_distance: f64,
}

impl Prop1Report {
    pub fn is_tie(&self) -> bool {
        self.tied_vertices.len() > 1
    }

    pub fn pass(&self) -> bool {
        self.violations == 0 && self.argmin_distance <= self.grid_step + 1e-12
    }
}

struct Prop1Scan {
    g_at_t: f64,
    y: Vec<f64>,
    points: u64,
    violations: u64,
    max_violation: f64,
    best: Vec<f64>,
    best_value: f64,
}

impl Prop1Scan {
    fn new(y: &[f64], g_at_t: f64) -> Self {
        Self {
            g_at_t,
            y: y.to_vec(),
            points: 0,
            violations: 0,
            max_violation: f64::NEG_INFINITY,
            best: Vec::new(),
            best_value: f64::INFINITY,
        }
    }

    fn visit(&mut self, p: &[f64]) {
        let v = g_bias(p, &self.y);
        self.points += 1;
        if v < self.g_at_t - G_TOL {
            self.violations += 1;
        }
        self.max_violation = self.max_violation.max(self.g_at_t - v);
        if v < self.best_value {
            self.best_value = v;
            self.best = p.to_vec();
        }
    }

    fn finish(self, y: &Marginal, tied: Vec<usize>, grid_step: f64) -> Prop1Report {
        let k = y.len();
        let argmin = Marginal::from_raw(self.best);
        let argmin_distance = tied
            .iter()
            .map(|&j| argmin.linf_distance(&Marginal::vertex(k, j)))
            .fold(f64::INFINITY, f64::min);
        Prop1Report {
            y: y.clone(),
            vertex_t: Marginal::vertex(k, tied[0]),
            tied_vertices: tied,
            grid_step,
            points_checked: self.points,
            argmin_on_grid: argmin,
            min_value: self.best_value,
            g_at_t: self.g_at_t,
            violations: self.violations,
            max_violation: self.max_violation,
            argmin_distance,
        }
    }
}

/// Calls `f` on every composition of `n` into `k` non-negative parts.
fn for_each_composition(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(remaining: usize, slot: usize, parts: &mut [usize], f: &mut impl FnMut(&[usize])) {
        if slot + 1 == parts.len() {
            parts[slot] = remaining;
            f(parts);
            return;
        }
        for c in 0..=remaining {
            parts[slot] = c;
            rec(remaining - c, slot + 1, parts, f);
        }
    }
    let mut parts = vec![0; k];
    rec(n, 0, &mut parts, f);
}

fn binomial(n: u128, r: u128) -> u128 {
    (0..r).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Exhaustive search of the simplex lattice with spacing `grid_step` for
/// points where `g` falls below its value at the vertex `t`.
pub fn check_prop1(y: &Marginal, grid_step: f64) -> Result<Prop1Report> {
    let k = y.len();
    if k > MAX_LATTICE_CLASSES {
        return Err(invalid_param(
            "y",
            format!("lattice search supports K ≤ {MAX_LATTICE_CLASSES}, got {k}; use check_prop1_sampled"),
        ));
    }
    require_positive(y)?;
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(invalid_param("grid_step", format!("must lie in (0, 1], got {grid_step}")));
    }
    let n = (1.0 / grid_step).round();
    if (n * grid_step - 1.0).abs() > 1e-9 {
        return Err(invalid_param("grid_step", format!("{grid_step} does not divide 1")));
    }
    let n = n as usize;
    if binomial((n + k - 1) as u128, (k - 1) as u128) > MAX_LATTICE_POINTS {
        return Err(invalid_param("grid_step", "lattice too large"));
    }
    let tied = y.argmax_set();
    let t = Marginal::vertex(k, tied[0]);
    let mut scan = Prop1Scan::new(y.values(), g_bias(t.values(), y.values()));
    let mut p = vec![0.0; k];
    for_each_composition(n, k, &mut |parts| {
        for (pk, &c) in p.iter_mut().zip(parts) {
            *pk = c as f64 / n as f64;
        }
        scan.visit(&p);
    });
    Ok(scan.finish(y, tied, 1.0 / n as f64))
}

/// Weaker certificate for any `K`: `num_draws` uniform simplex points plus every vertex.
pub fn check_prop1_sampled(y: &Marginal, num_draws: usize, seed: u64) -> Result<Prop1Report> {
    require_positive(y)?;
    let k = y.len();
    let tied = y.argmax_set();
    let t = Marginal::vertex(k, tied[0]);
    let mut scan = Prop1Scan::new(y.values(), g_bias(t.values(), y.values()));
    for c in 0..k {
        scan.visit(Marginal::vertex(k, c).values());
    }
    let mut rng = SplitMix64::stream(seed, stream::PROP1);
    for _ in 0..num_draws {
        scan.visit(&rng.simplex(k));
    }
    Ok(scan.finish(y, tied, 0.0))
}

/// Random point of `Δ_K` with a unique largest entry.
pub fn random_marginal_unique_max(rng: &mut SplitMix64, k: usize) -> Marginal {
    loop {
        let v = rng.simplex(k);
        let m = Marginal::from_raw(v);
        if m.argmax_set().len() == 1 && m.values().iter().all(|&x| x > 0.0) {
            return m;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcavityReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest `α g(p) + (1−α) g(q) − g(αp + (1−α)q)`.
    pub max_violation: f64,
    /// `min_k g(e_k) − g(t)`; never negative when `t` is the minimising vertex.
    pub min_vertex_gap: f64,
    /// Largest deviation of `g(e_k) − g(t)` from `ln(1 + 1/y_k) − ln(1 + 1/y_j)`.
    pub vertex_closed_form_error: f64,
}

impl ConcavityReport {
    pub fn pass(&self) -> bool {
        self.violations == 0 && self.min_vertex_gap >= -G_TOL && self.vertex_closed_form_error <= 1e-12
    }
}

/// Jensen-interpolation certificate of concavity of `g`, plus the vertex ordering.
pub fn check_db_concavity(y: &Marginal, num_samples: usize, seed: u64) -> Result<ConcavityReport> {
    require_positive(y)?;
    let k = y.len();
    let yv = y.values();
    let mut rng = SplitMix64::stream(seed, stream::CONCAVITY);
    let mut violations = 0;
    let mut max_violation = f64::NEG_INFINITY;
    for _ in 0..num_samples {
        let p = rng.simplex(k);
        let q = rng.simplex(k);
        let alpha = rng.next_open01().min(1.0 - f64::EPSILON);
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let gap = alpha * g_bias(&p, yv) + (1.0 - alpha) * g_bias(&q, yv) - g_bias(&mix, yv);
        if gap > G_TOL {
            violations += 1;
        }
        max_violation = max_violation.max(gap);
    }
    let (min_vertex_gap, vertex_closed_form_error) = vertex_ordering(y);
    Ok(ConcavityReport {
        samples: num_samples,
        violations,
        max_violation,
        min_vertex_gap,
        vertex_closed_form_error,
    })
}

/// `(min_k g(e_k) − g(t), max_k |g(e_k) − g(t) − closed form|)`.
pub fn vertex_ordering(y: &Marginal) -> (f64, f64) {
    let k = y.len();
    let yv = y.values();
    let j = y.argmax_set()[0];
    let g_t = g_bias(Marginal::vertex(k, j).values(), yv);
    let mut min_gap = f64::INFINITY;
    let mut max_err: f64 = 0.0;
    for c in 0..k {
        let gap = g_bias(Marginal::vertex(k, c).values(), yv) - g_t;
        let closed = (1.0 + 1.0 / yv[c]).ln() - (1.0 + 1.0 / yv[j]).ln();
        min_gap = min_gap.min(gap);
        max_err = max_err.max((gap - closed).abs());
    }
    (min_gap, max_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub instances: usize,
    pub df_violations: usize,
    pub df1_violations: usize,
    pub dice_violations: usize,
    /// Largest `DF − CE`, `DF₁ − CE₁` and `linear − log` Dice gaps (≤ 0 when the bounds hold).
    pub df_max_gap: f64,
    pub df1_max_gap: f64,
    pub dice_max_gap: f64,
    /// Largest `|DF − CE|` on region-constant fields.
    pub jensen_equality_residual: f64,
}

impl BoundsReport {
    pub fn pass(&self) -> bool {
        self.df_violations == 0
            && self.df1_violations == 0
            && self.dice_violations == 0
            && self.jensen_equality_residual <= 1e-12
    }
}

const BOUND_TOL: f64 = 1e-12;

fn binary_instance(rng: &mut SplitMix64, max_pixels: usize) -> Instance {
    let n = rng.range(4, max_pixels);
    random_instance(rng, 2, n, 2.0, 1.0)
}

/// Random-instance certificate of `DF ≤ CE`, `DF₁ ≤ CE₁` and
/// `−Σ log Dice_k ≥ Σ (1 − Dice_k)`, plus the Jensen equality case.
pub fn check_bounds(num_instances: usize, seed: u64) -> Result<BoundsReport> {
    let s = Smoothing::default();
    let mut rng = SplitMix64::stream(seed, stream::BOUNDS);
    let mut report = BoundsReport {
        instances: num_instances,
        df_violations: 0,
        df1_violations: 0,
        dice_violations: 0,
        df_max_gap: f64::NEG_INFINITY,
        df1_max_gap: f64::NEG_INFINITY,
        dice_max_gap: f64::NEG_INFINITY,
        jensen_equality_residual: 0.0,
    };
    for _ in 0..num_instances {
        let inst = random_sized_instance(&mut rng, (2, 5), 256);
        let (p, g) = (&inst.probs, &inst.labels);
        let df_gap = region_matching_terms(p, g, s)?.iter().sum::<f64>() - ce_region_weighted(p, g, s)?.value;
        let dice_gap = linear_dice_loss(p, g, false, s)?.value - log_dice_loss(p, g, false, s)?.value;

        let bin = binary_instance(&mut rng, 256);
        let df1 = region_matching_terms(&bin.probs, &bin.labels, s)?[0];
        let (ce1, _) = split_binary_ce(&bin.probs, &bin.labels, s)?;
        let df1_gap = df1 - ce1;

        report.df_violations += usize::from(df_gap > BOUND_TOL);
        report.df1_violations += usize::from(df1_gap > BOUND_TOL);
        report.dice_violations += usize::from(dice_gap > BOUND_TOL);
        report.df_max_gap = report.df_max_gap.max(df_gap);
        report.df1_max_gap = report.df1_max_gap.max(df1_gap);
        report.dice_max_gap = report.dice_max_gap.max(dice_gap);

        let flat = constant_per_region(&mut rng, g);
        let eq = region_matching_terms(&flat, g, s)?.iter().sum::<f64>() - ce_region_weighted(&flat, g, s)?.value;
        report.jensen_equality_residual = report.jensen_equality_residual.max(eq.abs());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Report {
    pub instances: usize,
    /// `max |CE − (Ĥ + KL + H(y))|`.
    pub max_residual: f64,
    /// Same identity with `−H(y)` in place of `+H(y)`; equals `2 H(y)` up to rounding.
    pub max_residual_minus_entropy: f64,
    /// Residual on an instance whose last predicted marginal sits below the smoothing constant.
    pub stress_residual: f64,
}

impl Prop2Report {
    pub fn pass(&self) -> bool {
        self.max_residual <= 1e-9 && self.stress_residual <= 1e-7
    }
}

/// `CE_pa − (Ĥ + KL + H(y))` and the same with `−H(y)`.
pub fn prop2_residuals(p: &ProbField, g: &LabelField, s: Smoothing) -> Result<(f64, f64)> {
    let ce = ce_pixel_avg(p, g, s)?;
    let h = mc_conditional_entropy(p, g, s)?;
    let kl = kl_marginal(&gt_marginal(g), &predicted_marginal(p), s)?;
    let hy = label_entropy(g, s);
    Ok(((ce - (h + kl + hy)).abs(), (ce - (h + kl - hy)).abs()))
}

/// Instance whose last class has predicted proportion around 1e-17.
pub fn near_zero_marginal_instance(rng: &mut SplitMix64) -> Result<(ProbField, LabelField)> {
    let k = 3;
    let g = random_labels(rng, k, 24);
    let mut z = Vec::with_capacity(24 * k);
    for _ in 0..24 {
        z.extend([rng.normal(), rng.normal(), -40.0]);
    }
    let logits = crate::field::LogitField::new(1, 24, k, z)?;
    Ok((crate::field::temperature_softmax(&logits, 1.0)?, g))
}

pub fn check_prop2(num_instances: usize, seed: u64) -> Result<Prop2Report> {
    let s = Smoothing::default();
    let mut rng = SplitMix64::stream(seed, stream::PROP2);
    let mut max_residual: f64 = 0.0;
    let mut max_minus: f64 = 0.0;
    for _ in 0..num_instances {
        let inst = random_sized_instance(&mut rng, (2, 5), 256);
        let (r, r_minus) = prop2_residuals(&inst.probs, &inst.labels, s)?;
        max_residual = max_residual.max(r);
        max_minus = max_minus.max(r_minus);
    }
    let (p, g) = near_zero_marginal_instance(&mut rng)?;
    let (stress, _) = prop2_residuals(&p, &g, s)?;
    Ok(Prop2Report {
        instances: num_instances,
        max_residual,
        max_residual_minus_entropy: max_minus,
        stress_residual: stress,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub p1: f64,
    pub db1: f64,
    pub kl: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub y1: f64,
    pub rows: Vec<CurveRow>,
}

/// Binary bias curves as the foreground marginal `p̂₁` sweeps `(0, 1)` at
/// `i/(n+1)`, with the ground-truth proportion fixed at `y1`.
pub fn bias_curves(y1: f64, num_points: usize) -> Result<CurveTable> {
    if !(y1 > 0.0 && y1 < 1.0) {
        return Err(invalid_param("y1", format!("must lie in (0, 1), got {y1}")));
    }
    if num_points == 0 {
        return Err(invalid_param("num_points", "must be positive"));
    }
    let s = Smoothing::default();
    let y = Marginal::new(vec![y1, 1.0 - y1])?;
    let rows = (1..=num_points)
        .map(|i| {
            let p1 = i as f64 / (num_points + 1) as f64;
            let q = Marginal::from_raw(vec![p1, 1.0 - p1]);
            Ok(CurveRow {
                p1,
                db1: (p1 + y1).ln(),
                kl: kl_marginal(&y, &q, s)?,
                l1: l1_marginal(&y, &q)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveTable { y1, rows })
}

/// Closed forms the curve rows must match.
pub fn curve_closed_form(y1: f64, p1: f64) -> CurveRow {
    CurveRow {
        p1,
        db1: (p1 + y1).ln(),
        kl: y1 * (y1 / p1).ln() + (1.0 - y1) * ((1.0 - y1) / (1.0 - p1)).ln(),
        l1: 2.0 * (p1 - y1).abs(),
    }
}

/// Largest deviation of `y`, `g` or `t` when every pixel is replicated `m` times.
pub fn check_scale_invariance(g: &LabelField, m: usize, rng: &mut SplitMix64) -> Result<f64> {
    let big = g.replicate(m)?;
    let (y, y_big) = (gt_marginal(g), gt_marginal(&big));
    if y.argmax_set() != y_big.argmax_set() {
        return Ok(f64::INFINITY);
    }
    let p = rng.simplex(g.num_classes());
    let dg = (g_bias(&p, y.values()) - g_bias(&p, y_big.values())).abs();
    Ok(y.linf_distance(&y_big).max(dg))
}

/// One row of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check_id: String,
    pub parameters: String,
    pub max_violation: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(check_id: &str, parameters: String, max_violation: f64, tol: f64) -> Self {
        Self {
            check_id: check_id.to_string(),
            parameters,
            max_violation,
            pass: max_violation <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub identity_instances: usize,
    pub bound_instances: usize,
    pub prop1_marginals: usize,
    pub grid_step: f64,
    pub concavity_samples: usize,
    pub gradcheck_instances: usize,
    pub curve_points: usize,
    /// Added to every decomposition constant; non-zero values must make the suite fail.
    pub perturb_constant: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_instances: 100,
            bound_instances: 1000,
            prop1_marginals: 20,
            grid_step: 1.0 / 200.0,
            concavity_samples: 1000,
            gradcheck_instances: 10,
            curve_points: 99,
            perturb_constant: 0.0,
        }
    }
}

fn log_dice_identity(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = Smoothing::default();
    let mut rng = SplitMix64::stream(cfg.seed, stream::LOG_DICE);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.identity_instances {
        let inst = random_sized_instance(&mut rng, (2, 5), 256);
        let d = decompose_log_dice(&inst.probs, &inst.labels, s)?.with_constant_offset(cfg.perturb_constant);
        let loss = log_dice_loss(&inst.probs, &inst.labels, false, s)?.value;
        worst = worst.max((loss - d.total_reconstructed).abs());
    }
    let params = format!("n={};K=2..5;pixels<=256;tol=1e-9", cfg.identity_instances);
    Ok(vec![CheckRow::new("log_dice_decomposition", params, worst, 1e-9)])
}

fn binary_identities(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let s = Smoothing::default();
    let mut rng = SplitMix64::stream(cfg.seed, stream::BINARY);
    let (mut recon, mut marginal, mut split): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.identity_instances {
        let inst = binary_instance(&mut rng, 256);
        let (p, g) = (&inst.probs, &inst.labels);
        let d = decompose_binary_dice(p, g, s)?;
        let parts = d.parts.with_constant_offset(cfg.perturb_constant);
        let loss = log_dice_loss(p, g, true, s)?.value;
        recon = recon.max((loss - parts.total_reconstructed).abs());
        let (y1, q1) = (gt_marginal(g).get(0), predicted_marginal(p).get(0));
        marginal = marginal.max((d.bias_marginal_form - (q1 + y1).ln()).abs());
        let (ce1, ce2) = split_binary_ce(p, g, s)?;
        split = split.max((ce1 + ce2 - ce_region_weighted(p, g, s)?.value).abs());
    }
    let n = cfg.identity_instances;
    Ok(vec![
        CheckRow::new("binary_dice_decomposition", format!("n={n};tol=1e-9"), recon, 1e-9),
        CheckRow::new("binary_bias_marginal_form", format!("n={n};tol=1e-12"), marginal, 1e-12),
        CheckRow::new("binary_ce_split", format!("n={n};tol=1e-12"), split, 1e-12),
    ])
}

fn prop1_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let mut rng = SplitMix64::stream(cfg.seed, stream::PROP1);
    let ys: Vec<Marginal> = (0..cfg.prop1_marginals)
        .map(|_| random_marginal_unique_max(&mut rng, 3))
        .collect();
    let reports = ys
        .par_iter()
        .map(|y| check_prop1(y, cfg.grid_step))
        .collect::<Result<Vec<_>>>()?;
    let violations: u64 = reports.iter().map(|r| r.violations).sum();
    let worst_gap = reports.iter().map(|r| r.max_violation).fold(f64::NEG_INFINITY, f64::max);
    let worst_dist = reports.iter().map(|r| r.argmin_distance).fold(0.0, f64::max);
    let params = format!("n={};K=3;step={}", cfg.prop1_marginals, cfg.grid_step);
    let step = reports.first().map_or(cfg.grid_step, |r| r.grid_step);

    let tie = check_prop1(&Marginal::new(vec![0.5, 0.5])?, cfg.grid_step)?;
    let tie_ok = tie.is_tie() && tie.pass();
    Ok(vec![
        CheckRow {
            check_id: "prop1_no_point_below_vertex".into(),
            parameters: format!("{params};violations={violations};tol=1e-12"),
            max_violation: worst_gap.max(0.0),
            pass: violations == 0,
        },
        CheckRow::new("prop1_argmin_at_vertex", format!("{params};tol=step"), worst_dist, step + 1e-12),
        CheckRow {
            check_id: "prop1_tie_membership".into(),
            parameters: "y=(0.5;0.5)".into(),
            max_violation: tie.argmin_distance,
            pass: tie_ok,
        },
    ])
}

fn concavity_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let y = Marginal::new(vec![0.7, 0.2, 0.1])?;
    let r = check_db_concavity(&y, cfg.concavity_samples, cfg.seed)?;
    let mut rng = SplitMix64::stream(cfg.seed, stream::CONCAVITY ^ 0xff);
    let mut order_gap = f64::INFINITY;
    let mut order_err: f64 = 0.0;
    for _ in 0..cfg.prop1_marginals {
        let (gap, err) = vertex_ordering(&random_marginal_unique_max(&mut rng, 3));
        order_gap = order_gap.min(gap);
        order_err = order_err.max(err);
    }
    Ok(vec![
        CheckRow {
            check_id: "db_concavity".into(),
            parameters: format!("samples={};y=(0.7;0.2;0.1);tol=1e-12", cfg.concavity_samples),
            max_violation: r.max_violation.max(0.0),
            pass: r.violations == 0,
        },
        CheckRow::new(
            "vertex_ordering",
            format!("n={};K=3;tol=1e-12", cfg.prop1_marginals),
            (-order_gap).max(order_err).max(0.0),
            1e-12,
        ),
    ])
}

fn bounds_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let r = check_bounds(cfg.bound_instances, cfg.seed)?;
    let params = |v: usize| format!("n={};K=2..5;violations={v}", cfg.bound_instances);
    let row = |id: &str, v: usize, gap: f64| CheckRow {
        check_id: id.into(),
        parameters: params(v),
        max_violation: gap.max(0.0),
        pass: v == 0,
    };
    Ok(vec![
        row("bound_df_le_ce", r.df_violations, r.df_max_gap),
        row("bound_df1_le_ce1", r.df1_violations, r.df1_max_gap),
        row("bound_log_dice_ge_linear", r.dice_violations, r.dice_max_gap),
        CheckRow::new(
            "jensen_equality",
            format!("n={};tol=1e-12", cfg.bound_instances),
            r.jensen_equality_residual,
            1e-12,
        ),
    ])
}

fn prop2_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let r = check_prop2(cfg.identity_instances, cfg.seed)?;
    let s = Smoothing::default();
    let mut rng = SplitMix64::stream(cfg.seed, stream::PROP2 ^ 0xff);
    let mut worst = r.max_residual;
    for _ in 0..cfg.identity_instances {
        let inst = random_sized_instance(&mut rng, (2, 5), 256);
        let d = decompose_ce(&inst.probs, &inst.labels, s)?.with_constant_offset(cfg.perturb_constant);
        let ce = ce_pixel_avg(&inst.probs, &inst.labels, s)?;
        worst = worst.max((ce - d.total_reconstructed).abs());
    }
    Ok(vec![
        CheckRow::new(
            "ce_decomposition",
            format!("n={};K=2..5;tol=1e-9", cfg.identity_instances),
            worst,
            1e-9,
        ),
        CheckRow::new("ce_decomposition_near_zero_marginal", "tol=1e-7".into(), r.stress_residual, 1e-7),
    ])
}

fn curve_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let table = bias_curves(0.1, cfg.curve_points)?;
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for (i, row) in table.rows.iter().enumerate() {
        let c = curve_closed_form(table.y1, row.p1);
        worst = worst
            .max((row.db1 - c.db1).abs())
            .max((row.kl - c.kl).abs())
            .max((row.l1 - c.l1).abs());
        if i > 0 && row.db1 <= table.rows[i - 1].db1 {
            monotone = false;
        }
    }
    Ok(vec![
        CheckRow::new("bias_curves_closed_form", format!("y1=0.1;points={};tol=1e-9", cfg.curve_points), worst, 1e-9),
        CheckRow {
            check_id: "bias_curves_db1_monotone".into(),
            parameters: "y1=0.1".into(),
            max_violation: 0.0,
            pass: monotone,
        },
    ])
}

fn scale_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let mut rng = SplitMix64::stream(cfg.seed, stream::SCALE);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.range(2, 4);
        let n = rng.range(k, 64);
        let g = random_labels(&mut rng, k, n);
        for m in [2, 3] {
            worst = worst.max(check_scale_invariance(&g, m, &mut rng)?);
        }
    }
    Ok(vec![CheckRow::new("prop1_scale_invariance", "n=20;m=2|3;tol=1e-15".into(), worst, 1e-15)])
}

fn gradcheck_rows(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    let seed = SplitMix64::stream(cfg.seed, stream::GRADCHECK).next_u64();
    loss_kinds()
        .into_iter()
        .chain(recommended_composites())
        .map(|(id, spec)| {
            let r = gradcheck(id, &spec, seed, cfg.gradcheck_instances)?;
            Ok(CheckRow::new(
                &format!("gradcheck_{id}"),
                format!("n={};h=1e-5;tol=1e-4", cfg.gradcheck_instances),
                r.max_rel_err(),
                crate::grad::GRADCHECK_TOL,
            ))
        })
        .collect()
}

type CheckFn = fn(&VerifyConfig) -> Result<Vec<CheckRow>>;

/// Runs every certificate. Row order is fixed regardless of scheduling.
pub fn run_verify(cfg: &VerifyConfig) -> Result<Vec<CheckRow>> {
    if !cfg.perturb_constant.is_finite() {
        return Err(Error::InvalidInput("perturb_constant must be finite".into()));
    }
    let checks: [CheckFn; 9] = [
        log_dice_identity,
        binary_identities,
        prop1_rows,
        prop2_rows,
        bounds_rows,
        concavity_rows,
        curve_rows,
        scale_rows,
        gradcheck_rows,
    ];
    let groups = checks.par_iter().map(|f| f(cfg)).collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}
