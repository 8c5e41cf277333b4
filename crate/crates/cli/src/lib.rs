//! Command implementations behind the `seglab` binary.
//!
//! Every command reads an optional JSON config (`--config`), lets flags
//! override it, and writes CSV/PGM artifacts under `--out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use seglab::grad::{gradcheck, loss_kinds, recommended_composites};
use seglab::pgm::write_pgm;
use seglab::synthlab::{
    evaluate, loss_from_name, make_scenario, sweep, train, Model, ScenarioName, ScenarioSpec, SweepRow,
    TrainConfig, TrainStatus, TraceRow, DEFAULT_EPOCHS, DEFAULT_LR,
};
use seglab::theory::{bias_curves, run_verify, CheckRow, CurveTable, VerifyConfig};
use seglab::{predicted_marginal, LabelField, DEFAULT_TAU};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping sweep parallelism (0 = sequential).
pub const THREADS_ENV: &str = "SEGLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "seglab", version, about = "Segmentation loss laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every identity, bound and gradient certificate.
    Verify(VerifyArgs),
    /// Binary bias curves as the predicted foreground proportion varies.
    Curves(CurvesArgs),
    /// Train the linear model on a synthetic scenario.
    Train(TrainArgs),
    /// Train every (loss, lambda, seed) combination.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients for every loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with parameters; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shift every decomposition constant by this amount (negative control).
    #[arg(long, allow_hyphen_values = true)]
    pub perturb_constant: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyFile {
    seed: Option<u64>,
    perturb_constant: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true)]
    pub y1: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurvesFile {
    y1: Option<f64>,
    points: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Preset scenario: binary_imbalanced, multiclass_diverse or marginal_only.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub loss: Option<String>,
    /// Weight of the added term in compound losses.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    scenario: Option<ScenarioName>,
    scenario_spec: Option<ScenarioSpec>,
    loss: Option<String>,
    lambda: Option<f64>,
    seed: Option<u64>,
    lr: Option<f64>,
    epochs: Option<usize>,
    tau: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Comma-separated loss names.
    #[arg(long, value_delimiter = ',')]
    pub losses: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    scenario: Option<ScenarioName>,
    scenario_spec: Option<ScenarioSpec>,
    losses: Option<Vec<String>>,
    lambdas: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    lr: Option<f64>,
    epochs: Option<usize>,
    tau: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckFile {
    seed: Option<u64>,
    instances: Option<usize>,
    out: Option<PathBuf>,
}

/// Error carrying the exit code it should produce.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

type CmdResult = Result<i32, Failure>;

/// Fixed-point number formatting shared by every CSV.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.9}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn out_dir(flag: &Option<PathBuf>, file: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = flag.clone().or(file).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn verify_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("check_id,parameters,max_violation,status\n");
    for r in rows {
        let status = if r.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{},{},{},{}", r.check_id, r.parameters, fmt_num(r.max_violation), status);
    }
    out
}

pub fn curves_csv(table: &CurveTable) -> String {
    let mut out = String::from("p1,db1,kl,l1\n");
    for r in &table.rows {
        let _ = writeln!(out, "{},{},{},{}", fmt_num(r.p1), fmt_num(r.db1), fmt_num(r.kl), fmt_num(r.l1));
    }
    out
}

/// Columns `p1..pK` and `dsc1..dscK` refer to classes `0..K−1`.
pub fn trace_csv(rows: &[TraceRow], num_classes: usize) -> String {
    let mut out = String::from("iteration,loss");
    for k in 1..=num_classes {
        let _ = write!(out, ",p{k}");
    }
    for k in 1..=num_classes {
        let _ = write!(out, ",dsc{k}");
    }
    out.push_str(",miou\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.iteration, fmt_num(r.loss));
        for v in r.marginal.iter().chain(&r.dsc) {
            let _ = write!(out, ",{}", fmt_num(*v));
        }
        let _ = writeln!(out, ",{}", fmt_num(r.miou));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow], num_classes: usize) -> String {
    let mut out = String::from("loss,lambda,seed,status,mean_dsc,mean_iou,marginal_l1_error");
    for k in 1..=num_classes {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.loss,
            fmt_num(r.lambda),
            r.seed,
            status_name(r.status),
            fmt_num(r.metrics.mean_dsc),
            fmt_num(r.metrics.mean_iou),
            fmt_num(r.metrics.marginal_l1_error)
        );
        for v in &r.final_marginal {
            let _ = write!(out, ",{}", fmt_num(*v));
        }
        out.push('\n');
    }
    out
}

fn status_name(s: TrainStatus) -> &'static str {
    match s {
        TrainStatus::Completed => "completed",
        TrainStatus::Diverged { .. } => "diverged",
    }
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let file: VerifyFile = load_file(args.common.config.as_deref()).map_err(usage)?;
    let perturb = args.perturb_constant.or(file.perturb_constant).unwrap_or(0.0);
    if !perturb.is_finite() {
        return Err(usage(anyhow::anyhow!("--perturb-constant must be finite")));
    }
    let cfg = VerifyConfig {
        seed: args.seed.or(file.seed).unwrap_or(0),
        perturb_constant: perturb,
        ..VerifyConfig::default()
    };
    let dir = out_dir(&args.common.out, file.out).map_err(usage)?;
    let rows = run_verify(&cfg).map_err(usage)?;
    write(&dir, "verify.csv", &verify_csv(&rows)).map_err(usage)?;
    let failed: Vec<&CheckRow> = rows.iter().filter(|r| !r.pass).collect();
    println!("verify: {} checks, {} failed", rows.len(), failed.len());
    for r in &failed {
        println!("FAIL {} ({}) max_violation={}", r.check_id, r.parameters, fmt_num(r.max_violation));
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_curves(args: &CurvesArgs) -> CmdResult {
    let file: CurvesFile = load_file(args.common.config.as_deref()).map_err(usage)?;
    let y1 = args.y1.or(file.y1).unwrap_or(0.1);
    let points = args.points.or(file.points).unwrap_or(99);
    let table = bias_curves(y1, points).map_err(usage)?;
    let dir = out_dir(&args.common.out, file.out).map_err(usage)?;
    write(&dir, "curves.csv", &curves_csv(&table)).map_err(usage)?;
    println!("curves: y1={} rows={}", fmt_num(y1), table.rows.len());
    Ok(EXIT_OK)
}

fn resolve_scenario(
    flag: &Option<String>,
    name: Option<ScenarioName>,
    custom: Option<ScenarioSpec>,
    default: ScenarioName,
) -> anyhow::Result<ScenarioSpec> {
    let from_flag = flag.as_deref().map(str::parse::<ScenarioName>).transpose()?;
    Ok(match (from_flag, custom) {
        (Some(n), _) => ScenarioSpec::preset(n, 0),
        (None, Some(spec)) => spec,
        (None, None) => ScenarioSpec::preset(name.unwrap_or(default), 0),
    })
}

fn train_config(opts: &TrainOpts, lr: Option<f64>, epochs: Option<usize>, tau: Option<f64>) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig {
        lr: opts.lr.or(lr).unwrap_or(DEFAULT_LR),
        epochs: opts.epochs.or(epochs).unwrap_or(DEFAULT_EPOCHS),
        tau: opts.tau.or(tau).unwrap_or(DEFAULT_TAU),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let file: TrainFile = load_file(args.common.config.as_deref()).map_err(usage)?;
    let mut scenario = resolve_scenario(
        &args.opts.scenario,
        file.scenario,
        file.scenario_spec.clone(),
        ScenarioName::BinaryImbalanced,
    )
    .map_err(usage)?;
    if let Some(seed) = args.seed.or(file.seed) {
        scenario.seed = seed;
    }
    let cfg = train_config(&args.opts, file.lr, file.epochs, file.tau).map_err(usage)?;
    let loss_name = args.loss.clone().or(file.loss).unwrap_or_else(|| "ce".into());
    let lambda = args.lambda.or(file.lambda);
    let loss = loss_from_name(&loss_name, lambda, scenario.num_classes).map_err(usage)?;
    let data = make_scenario(&scenario).map_err(usage)?;
    let dir = out_dir(&args.common.out, file.out).map_err(usage)?;

    let model0 = Model::zeros(scenario.num_classes, scenario.feature_dim);
    let trace = train(&model0, &loss, &data, &cfg).map_err(usage)?;
    write(&dir, "trace.csv", &trace_csv(&trace.rows, scenario.num_classes)).map_err(usage)?;
    write(&dir, "labels.pgm", &write_pgm(&data.labels)).map_err(usage)?;

    let status = status_name(trace.status);
    match trace.model.predict(&data, cfg.tau) {
        Ok(p) if p.as_slice().iter().all(|v| v.is_finite()) => {
            let shape = data.labels.shape();
            let mask = LabelField::new(shape.height, shape.width, shape.num_classes, p.argmax()).map_err(usage)?;
            write(&dir, "mask.pgm", &write_pgm(&mask)).map_err(usage)?;
            let m = evaluate(&p, &data.labels);
            let marginal: Vec<String> = predicted_marginal(&p).values().iter().map(|v| fmt_num(*v)).collect();
            println!(
                "train: scenario={} loss={} seed={} status={} mean_dsc={} mean_iou={} marginal_l1_error={} marginal=[{}]",
                scenario.name.as_str(),
                loss_name,
                scenario.seed,
                status,
                fmt_num(m.mean_dsc),
                fmt_num(m.mean_iou),
                fmt_num(m.marginal_l1_error),
                marginal.join(";")
            );
        }
        _ => println!("train: scenario={} loss={} status={status}", scenario.name.as_str(), loss_name),
    }
    Ok(if trace.diverged() { EXIT_DIVERGED } else { EXIT_OK })
}

/// Reads `SEGLAB_THREADS`; unset means the default pool.
pub fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{THREADS_ENV}={v}"))?)),
        Err(_) => Ok(None),
    }
}

fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let file: SweepFile = load_file(args.common.config.as_deref()).map_err(usage)?;
    let scenario = resolve_scenario(
        &args.opts.scenario,
        file.scenario,
        file.scenario_spec.clone(),
        ScenarioName::BinaryImbalanced,
    )
    .map_err(usage)?;
    let cfg = train_config(&args.opts, file.lr, file.epochs, file.tau).map_err(usage)?;
    let losses = args
        .losses
        .clone()
        .or(file.losses)
        .unwrap_or_else(|| vec!["ours-l1".into(), "ours-kl".into()]);
    let lambdas = args
        .lambdas
        .clone()
        .or(file.lambdas)
        .unwrap_or_else(|| vec![0.0, 0.001, 0.01, 0.1, 1.0, 10.0]);
    let seeds = args.seeds.clone().or(file.seeds).unwrap_or_else(|| (1..=5).collect());
    for name in &losses {
        loss_from_name(name, None, scenario.num_classes).map_err(usage)?;
    }
    let threads = threads_from_env().map_err(usage)?;
    let dir = out_dir(&args.common.out, file.out).map_err(usage)?;
    let rows = sweep(&scenario, &losses, &lambdas, &seeds, &cfg, threads).map_err(usage)?;
    write(&dir, "sweep.csv", &sweep_csv(&rows, scenario.num_classes)).map_err(usage)?;
    let diverged = rows.iter().filter(|r| r.status != TrainStatus::Completed).count();
    println!("sweep: scenario={} runs={} diverged={}", scenario.name.as_str(), rows.len(), diverged);
    Ok(if diverged == 0 { EXIT_OK } else { EXIT_DIVERGED })
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let file: GradcheckFile = load_file(args.common.config.as_deref()).map_err(usage)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let instances = args.instances.or(file.instances).unwrap_or(10);
    if instances == 0 {
        return Err(usage(anyhow::anyhow!("--instances must be positive")));
    }
    let dir = out_dir(&args.common.out, file.out).map_err(usage)?;
    let mut csv = String::from("spec_id,instance_seed,max_rel_err,status\n");
    let mut failed = 0;
    let mut worst: f64 = 0.0;
    for (id, spec) in loss_kinds().into_iter().chain(recommended_composites()) {
        let report = gradcheck(id, &spec, seed, instances).map_err(usage)?;
        for r in &report.rows {
            let status = if r.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(csv, "{},{},{},{}", r.spec_id, r.instance_seed, fmt_num(r.max_rel_err), status);
            failed += usize::from(!r.pass);
        }
        worst = worst.max(report.max_rel_err());
    }
    write(&dir, "gradcheck.csv", &csv).map_err(usage)?;
    println!("gradcheck: max_rel_err={worst:.3e} failed={failed}");
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
