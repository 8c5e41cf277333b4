//! Synthetic segmentation scenarios and a per-pixel linear model trained by
//! deterministic full-batch gradient descent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};
use crate::field::{gt_marginal, predicted_marginal, temperature_softmax, LabelField, LogitField, ProbField, Shape};
use crate::grad::loss_gradient;
use crate::losses::{l1_marginal, LossSpec, DEFAULT_FOCAL_GAMMA};
use crate::rng::SplitMix64;

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_EPOCHS: usize = 500;

const FEATURE_STREAM: u64 = 0x6665_6174;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    BinaryImbalanced,
    MulticlassDiverse,
    MarginalOnly,
}

impl ScenarioName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BinaryImbalanced => "binary_imbalanced",
            Self::MulticlassDiverse => "multiclass_diverse",
            Self::MarginalOnly => "marginal_only",
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_imbalanced" => Ok(Self::BinaryImbalanced),
            "multiclass_diverse" => Ok(Self::MulticlassDiverse),
            "marginal_only" => Ok(Self::MarginalOnly),
            other => Err(Error::InvalidSpec(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub target_proportions: Vec<f64>,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn preset(name: ScenarioName, seed: u64) -> Self {
        let (num_classes, target_proportions, feature_dim, class_separation) = match name {
            ScenarioName::BinaryImbalanced => (2, vec![0.01, 0.99], 2, 1.0),
            ScenarioName::MulticlassDiverse => (5, vec![0.50, 0.30, 0.15, 0.04, 0.01], 5, 2.0),
            ScenarioName::MarginalOnly => (3, vec![0.6, 0.3, 0.1], 3, 0.0),
        };
        Self {
            name,
            height: 64,
            width: 64,
            num_classes,
            target_proportions,
            feature_dim,
            class_separation,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image must be non-empty".into());
        }
        if self.target_proportions.len() != self.num_classes {
            return bad(format!(
                "{} proportions for {} classes",
                self.target_proportions.len(),
                self.num_classes
            ));
        }
        let sum: f64 = self.target_proportions.iter().sum();
        if self.target_proportions.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("proportions must lie on the simplex: {:?}", self.target_proportions));
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim {} must be at least num_classes {}",
                self.feature_dim, self.num_classes
            ));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be finite and ≥ 0, got {}", self.class_separation));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and ≥ 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub labels: LabelField,
}

impl Dataset {
    pub fn feature(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.feature_dim..(pixel + 1) * self.feature_dim]
    }
}

/// Largest-remainder pixel counts; ties go to the lower class index.
pub fn class_counts(proportions: &[f64], num_pixels: usize) -> Result<Vec<usize>> {
    let exact: Vec<f64> = proportions.iter().map(|&p| p * num_pixels as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(num_pixels.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidSpec(format!(
            "class {k} gets no pixels at {num_pixels} pixels (proportion {})",
            proportions[k]
        )));
    }
    Ok(counts)
}

/// Nested blobs: pixels sorted by distance from the image centre, filled with
/// the smallest class first so minority classes form the innermost disc.
fn nested_blob_labels(spec: &ScenarioSpec, counts: &[usize]) -> Result<LabelField> {
    let (h, w) = (spec.height, spec.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut pixels: Vec<usize> = (0..h * w).collect();
    let dist = |i: usize| {
        let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
        y * y + x * x
    };
    pixels.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut classes: Vec<usize> = (0..counts.len()).collect();
    classes.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
    let mut labels = vec![0; h * w];
    let mut next = pixels.into_iter();
    for &k in &classes {
        for i in next.by_ref().take(counts[k]) {
            labels[i] = k;
        }
    }
    LabelField::new(h, w, spec.num_classes, labels)
}

/// Labels by nested blobs and features `μ_k + σ·N(0, I)` with
/// `μ_k = (separation/√2)·e_k`, so that `‖μ_k − μ_j‖ = separation`.
pub fn make_scenario(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = class_counts(&spec.target_proportions, spec.height * spec.width)?;
    let labels = nested_blob_labels(spec, &counts)?;
    let d = spec.feature_dim;
    let scale = spec.class_separation / std::f64::consts::SQRT_2;
    let mut rng = SplitMix64::stream(spec.seed, FEATURE_STREAM);
    let mut features = Vec::with_capacity(labels.num_pixels() * d);
    for &l in labels.labels() {
        for j in 0..d {
            let mean = if j == l { scale } else { 0.0 };
            features.push(mean + spec.noise_sigma * rng.normal());
        }
    }
    Ok(Dataset {
        features,
        feature_dim: d,
        labels,
    })
}

/// Per-pixel linear model `z_i = W f_i + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Row-major `K × D`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Model {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn logits(&self, data: &Dataset) -> Result<LogitField> {
        if data.feature_dim != self.feature_dim || data.labels.num_classes() != self.num_classes {
            return Err(Error::InvalidInput("model and dataset dimensions differ".into()));
        }
        let (k, d) = (self.num_classes, self.feature_dim);
        let mut z = Vec::with_capacity(data.labels.num_pixels() * k);
        for f in data.features.chunks_exact(d) {
            for c in 0..k {
                let w = &self.weights[c * d..(c + 1) * d];
                z.push(self.bias[c] + w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Ok(LogitField::from_raw(data.labels.shape(), z))
    }

    pub fn predict(&self, data: &Dataset, tau: f64) -> Result<ProbField> {
        temperature_softmax(&self.logits(data)?, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            tau: crate::field::DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_param("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(invalid_param("epochs", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid_param("tau", format!("must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// State at the start of one iteration, before its update.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub marginal: Vec<f64>,
    pub dsc: Vec<f64>,
    pub miou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub model: Model,
    pub status: TrainStatus,
}

impl TrainTrace {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

/// Full-batch gradient descent. Stops with `Diverged` and a partial trace as
/// soon as a loss, gradient or parameter is non-finite.
pub fn train(model0: &Model, spec: &LossSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    spec.validate()?;
    let mut model = model0.clone();
    let (k, d) = (model.num_classes, model.feature_dim);
    let mut rows = Vec::with_capacity(cfg.epochs);
    for iteration in 0..cfg.epochs {
        let z = model.logits(data)?;
        if z.as_slice().iter().any(|v| !v.is_finite()) {
            return Ok(diverged(rows, model, iteration));
        }
        let (loss, grad) = loss_gradient(spec, &z, &data.labels, cfg.tau)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Ok(diverged(rows, model, iteration));
        }
        let p = temperature_softmax(&z, cfg.tau)?;
        let m = evaluate(&p, &data.labels);
        rows.push(TraceRow {
            iteration,
            loss,
            marginal: predicted_marginal(&p).values().to_vec(),
            dsc: m.dsc_per_class,
            miou: m.mean_iou,
        });
        let mut dw = vec![0.0; k * d];
        let mut db = vec![0.0; k];
        for (f, g) in data.features.chunks_exact(d).zip(grad.as_slice().chunks_exact(k)) {
            for c in 0..k {
                db[c] += g[c];
                for j in 0..d {
                    dw[c * d + j] += g[c] * f[j];
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&dw) {
            *w -= cfg.lr * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&db) {
            *b -= cfg.lr * g;
        }
        if !model.is_finite() {
            return Ok(diverged(rows, model, iteration + 1));
        }
    }
    Ok(TrainTrace {
        rows,
        model,
        status: TrainStatus::Completed,
    })
}

fn diverged(rows: Vec<TraceRow>, model: Model, iteration: usize) -> TrainTrace {
    TrainTrace {
        rows,
        model,
        status: TrainStatus::Diverged { iteration },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// A class absent from both prediction and ground truth scores 1 here and is
    /// listed in `excluded_classes`.
    pub dsc_per_class: Vec<f64>,
    pub mean_dsc: f64,
    pub iou_per_class: Vec<f64>,
    pub mean_iou: f64,
    pub excluded_classes: Vec<usize>,
    pub marginal_l1_error: f64,
}

/// Hard-argmax DSC/IoU plus the soft marginal L1 error.
pub fn evaluate(p: &ProbField, g: &LabelField) -> Metrics {
    let k = g.num_classes();
    let pred = p.argmax();
    let mut inter = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    for (&a, &l) in pred.iter().zip(g.labels()) {
        pred_count[a] += 1;
        if a == l {
            inter[a] += 1;
        }
    }
    let mut dsc = vec![1.0; k];
    let mut iou = vec![1.0; k];
    let mut excluded = Vec::new();
    for c in 0..k {
        let (i, pc, gc) = (inter[c] as f64, pred_count[c] as f64, g.region_size(c) as f64);
        if pred_count[c] == 0 && g.region_size(c) == 0 {
            excluded.push(c);
            continue;
        }
        dsc[c] = 2.0 * i / (pc + gc);
        iou[c] = i / (pc + gc - i);
    }
    let mean = |v: &[f64]| {
        let kept: Vec<f64> = (0..k).filter(|c| !excluded.contains(c)).map(|c| v[c]).collect();
        if kept.is_empty() {
            1.0
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        }
    };
    let y = gt_marginal(g);
    let q = predicted_marginal(p);
    Metrics {
        mean_dsc: mean(&dsc),
        mean_iou: mean(&iou),
        dsc_per_class: dsc,
        iou_per_class: iou,
        excluded_classes: excluded,
        marginal_l1_error: l1_marginal(&y, &q).expect("same class count"),
    }
}

/// Names accepted on the command line and in sweep configs.
pub const LOSS_NAMES: [&str; 15] = [
    "ce",
    "ce-weighted",
    "ce-pixel",
    "focal",
    "dice",
    "log-dice",
    "gdice",
    "kl",
    "l1",
    "dice-bias",
    "dice-ce",
    "log-dice-ce",
    "dice-bias-ce",
    "ours-kl",
    "ours-l1",
];

/// Default weight for the compound losses.
pub fn default_lambda(name: &str) -> Option<f64> {
    match name {
        "ours-l1" => Some(1.0),
        "ours-kl" | "dice-ce" | "log-dice-ce" | "dice-bias-ce" => Some(0.1),
        _ => None,
    }
}

/// Builds a loss from its name. `lambda` only affects the compound losses;
/// Dice-type terms are foreground-only on binary labels.
pub fn loss_from_name(name: &str, lambda: Option<f64>, num_classes: usize) -> Result<LossSpec> {
    let fg = num_classes == 2;
    let lam = || lambda.or(default_lambda(name)).unwrap_or(0.0);
    let spec = match name {
        "ce" => LossSpec::ce(),
        "ce-weighted" => LossSpec::CeRegionWeighted,
        "ce-pixel" => LossSpec::CePixelAvg,
        "focal" => LossSpec::Focal {
            gamma: DEFAULT_FOCAL_GAMMA,
        },
        "dice" => LossSpec::LinearDice { foreground_only: fg },
        "log-dice" => LossSpec::LogDice { foreground_only: fg },
        "gdice" => LossSpec::Gdice,
        "kl" => LossSpec::KlMarginal,
        "l1" => LossSpec::L1Marginal,
        "dice-bias" => LossSpec::DiceBias { foreground_only: fg },
        "dice-ce" => LossSpec::dice_ce(lam(), fg),
        "log-dice-ce" => LossSpec::log_dice_ce(lam(), fg),
        "dice-bias-ce" => LossSpec::dice_bias_ce(lam(), fg),
        "ours-kl" => LossSpec::ours_kl(lam()),
        "ours-l1" => LossSpec::ours_l1(lam()),
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown loss `{other}`; expected one of {}",
                LOSS_NAMES.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub loss: String,
    pub lambda: f64,
    pub seed: u64,
    pub status: TrainStatus,
    pub metrics: Metrics,
    pub final_marginal: Vec<f64>,
}

/// How many worker threads a sweep may use; `Some(0)` runs sequentially.
pub type Threads = Option<usize>;

/// Trains every `(loss, λ, seed)` combination from a zero model. Rows come
/// back in that canonical order whatever the schedule.
pub fn sweep(
    scenario: &ScenarioSpec,
    losses: &[String],
    lambdas: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
    threads: Threads,
) -> Result<Vec<SweepRow>> {
    if losses.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidSpec("sweep needs non-empty loss, lambda and seed lists".into()));
    }
    let jobs: Vec<(&String, f64, u64)> = losses
        .iter()
        .flat_map(|l| lambdas.iter().flat_map(move |&lam| seeds.iter().map(move |&s| (l, lam, s))))
        .collect();
    let run = |&(loss, lambda, seed): &(&String, f64, u64)| -> Result<SweepRow> {
        let spec = ScenarioSpec {
            seed,
            ..scenario.clone()
        };
        let data = make_scenario(&spec)?;
        let loss_spec = loss_from_name(loss, Some(lambda), spec.num_classes)?;
        let model0 = Model::zeros(spec.num_classes, spec.feature_dim);
        let trace = train(&model0, &loss_spec, &data, cfg)?;
        let p = trace.model.predict(&data, cfg.tau)?;
        Ok(SweepRow {
            loss: loss.clone(),
            lambda,
            seed,
            status: trace.status,
            metrics: evaluate(&p, &data.labels),
            final_marginal: predicted_marginal(&p).values().to_vec(),
        })
    };
    match threads {
        Some(0) => jobs.iter().map(run).collect(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run).collect())
        }
        None => jobs.par_iter().map(run).collect(),
    }
}

/// Final soft marginal after training `loss` on a preset scenario.
pub fn final_marginal(scenario: &ScenarioSpec, loss: &LossSpec, cfg: &TrainConfig) -> Result<(Vec<f64>, TrainStatus)> {
    let data = make_scenario(scenario)?;
    let trace = train(&Model::zeros(scenario.num_classes, scenario.feature_dim), loss, &data, cfg)?;
    let p = trace.model.predict(&data, cfg.tau)?;
    Ok((predicted_marginal(&p).values().to_vec(), trace.status))
}

pub fn shape_of(spec: &ScenarioSpec) -> Result<Shape> {
    Shape::new(spec.height, spec.width, spec.num_classes)
}
