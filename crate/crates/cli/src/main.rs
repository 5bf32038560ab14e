//! `sla`: correctness checks, FLOP/operation-count reports, weight
//! diagnostics and the toy distillation run.
//!
//! JSON goes to stdout (or `--out`), a human summary to stderr.
//! Exit status: 0 pass, 1 a suite or run failed, 2 invalid arguments.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sla_core::aggregation::{count_operations, resolve_strategy, OpCounter};
use sla_core::analysis::{decompose_weights, sparse_approx_error, weight_histogram, DecompositionReport, WeightHistogram};
use sla_core::check::run_checks;
use sla_core::config::AggregationStrategy;
use sla_core::feature_maps::FeatureMapKind;
use sla_core::finetune::{toy_finetune, FinetuneConfig, FinetuneReport, GRAD_CHECK_TOL};
use sla_core::flops::{flops_report, FlopsReport};
use sla_core::forward::sla_forward_with_mask;
use sla_core::layout::{make_block_layout, BlockLayout};
use sla_core::mask::{classify_mask, predict_compressed_weights, BlockLabel, CompressedMask};
use sla_core::oracle::dense_attention_forward;
use sla_core::rng::{gaussian_tensor, SplitMix64};
use sla_core::tensor::{load_tensor, DType, Real, Tensor};
use sla_core::{SlaConfig, SlaError};

#[derive(Parser, Debug)]
#[command(name = "sla", version, about = "Sparse-linear attention kernels and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oracle, finite-difference, aggregation and decomposition suites.
    Check {
        #[command(flatten)]
        run: RunSpec,
        /// Seeds per suite.
        #[arg(long, default_value_t = 3)]
        cases: usize,
    },
    /// FLOP accounting and aggregation operation counts for one mask.
    Bench {
        #[command(flatten)]
        run: RunSpec,
        /// Also run the forward kernel and report its measured counters.
        #[arg(long)]
        execute: bool,
    },
    /// Weight histogram, stable ranks and sparse-approximation error curve.
    Analyze {
        #[command(flatten)]
        run: RunSpec,
        /// Fraction of entries in the sparse component.
        #[arg(long, default_value_t = 0.08)]
        top_fraction: f64,
        /// Comma-separated keep fractions for the error curve.
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0])]
        keep: Vec<f64>,
        /// Std of the seeded Gaussian Q and K entries.
        #[arg(long, default_value_t = 1.0)]
        qk_std: f64,
        /// Error-curve CSV; defaults to the `--out` path with a `.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Distill an SLA layer into a dense-attention teacher.
    TrainToy {
        #[command(flatten)]
        run: RunSpec,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        /// Number of input sequences.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Keep the step-0 masks for the whole run.
        #[arg(long)]
        freeze_mask: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct RunSpec {
    #[arg(long, default_value_t = 128)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    bq: usize,
    #[arg(long, default_value_t = 16)]
    bkv: usize,
    /// Percent of blocks per row kept exact.
    #[arg(long, default_value_t = 25.0)]
    kh: f64,
    /// Percent of blocks per row skipped.
    #[arg(long, default_value_t = 25.0)]
    kl: f64,
    #[arg(long, default_value = "elu1")]
    phi: FeatureMapKind,
    #[arg(long, default_value = "direct")]
    agg: AggregationStrategy,
    #[arg(long, default_value_t = 4)]
    g: usize,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding `q`, `k`, `v` tensor files to use instead of seeded inputs.
    #[arg(long)]
    input: Option<PathBuf>,
}

impl RunSpec {
    fn validate(&self) -> sla_core::Result<(BlockLayout, SlaConfig)> {
        let layout = make_block_layout(self.n, self.d, self.bq, self.bkv)?;
        let cfg = SlaConfig {
            k_h: self.kh,
            k_l: self.kl,
            phi: self.phi,
            aggregation: self.agg,
            g: self.g,
            dtype: self.dtype,
            seed: self.seed,
            ..Default::default()
        };
        cfg.validate()?;
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(SlaError::Config("--threads must be at least 1".into()));
            }
        }
        Ok((layout, cfg))
    }

    /// Seeded Gaussian `Q`, `K`, `V`, or the tensors under `--input`.
    fn inputs<T: Real>(&self, qk_std: f64) -> sla_core::Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        match &self.input {
            Some(dir) => {
                let load = |name: &str| -> sla_core::Result<Tensor<T>> {
                    let path = dir.join(name);
                    let t = load_tensor(&path).map_err(|e| match e {
                        SlaError::Io(io) => SlaError::TensorFile { path, message: io.to_string() },
                        other => other,
                    })?;
                    if t.shape() != (self.n, self.d) {
                        return Err(SlaError::Shape(format!(
                            "{name} is {:?}, expected ({}, {})",
                            t.shape(),
                            self.n,
                            self.d
                        )));
                    }
                    Ok(t.to_dtype())
                };
                Ok((load("q")?, load("k")?, load("v")?))
            }
            None => {
                let mut rng = SplitMix64::new(self.seed);
                Ok((
                    gaussian_tensor(&mut rng, self.n, self.d, qk_std),
                    gaussian_tensor(&mut rng, self.n, self.d, qk_std),
                    gaussian_tensor(&mut rng, self.n, self.d, 1.0),
                ))
            }
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(anyhow::Error),
    Run(anyhow::Error),
}

impl From<SlaError> for Failure {
    fn from(e: SlaError) -> Self {
        match e {
            SlaError::Shape(_)
            | SlaError::Layout(_)
            | SlaError::Config(_)
            | SlaError::Mask(_)
            | SlaError::NonFiniteInput { .. }
            | SlaError::TensorFile { .. } => Failure::Invalid(e.into()),
            other => Failure::Run(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn emit<S: Serialize>(value: &S, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn build_pool(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    Ok(())
}

fn check(run: &RunSpec, cases: usize) -> Result<bool, Failure> {
    let (layout, cfg) = run.validate()?;
    if cases == 0 {
        return Err(SlaError::Config("--cases must be at least 1".into()).into());
    }
    build_pool(run.threads)?;
    let report = run_checks(&layout, &cfg, cases)?;
    eprintln!("{:<28} {:>5} {:>12} {:>10}  result  worst", "suite", "cases", "max_error", "tol");
    for s in &report.suites {
        eprintln!(
            "{:<28} {:>5} {:>12.3e} {:>10.1e}  {:<6}  seed {} {}",
            s.suite,
            s.cases,
            s.max_error,
            s.tolerance,
            if s.passed { "pass" } else { "FAIL" },
            s.worst_seed,
            s.worst_at
        );
    }
    emit(&report, run.out.as_deref())?;
    Ok(report.passed)
}

#[derive(Serialize)]
struct StrategyCount {
    strategy: AggregationStrategy,
    g: usize,
    ops: OpCounter,
    total: u64,
}

#[derive(Serialize)]
struct Measured {
    critical_blocks: u64,
    strategy: AggregationStrategy,
    ops: OpCounter,
    matches_dry_run: bool,
}

#[derive(Serialize)]
struct BenchReport {
    layout: BlockLayout,
    config: SlaConfig,
    flops: FlopsReport,
    critical_blocks: u64,
    marginal_blocks: u64,
    negligible_blocks: u64,
    marginal_fraction: f64,
    /// Forward-pass aggregation cost under each strategy for this mask.
    aggregation: Vec<StrategyCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    measured: Option<Measured>,
}

fn count_labels(mask: &CompressedMask, label: BlockLabel) -> u64 {
    mask.labels().iter().filter(|&&l| l == label).count() as u64
}

fn forward_rows(mask: &CompressedMask) -> Vec<Vec<bool>> {
    (0..mask.t_m())
        .map(|i| (0..mask.t_n()).map(|j| mask.label(i, j) == BlockLabel::Marginal).collect())
        .collect()
}

fn bench_typed<T: Real>(run: &RunSpec, layout: BlockLayout, cfg: SlaConfig, execute: bool) -> Result<BenchReport, Failure> {
    let (q, k, v) = run.inputs::<T>(1.0)?;
    let weights = predict_compressed_weights(&q, &k, &layout)?;
    let mask = classify_mask(&weights, cfg.k_h, cfg.k_l)?;
    let flops = flops_report(&layout, &mask)?;
    let rows = forward_rows(&mask);
    let marginal_fraction = mask.fraction(BlockLabel::Marginal);
    let mut aggregation = Vec::new();
    for strategy in [
        AggregationStrategy::Direct,
        AggregationStrategy::Complement,
        AggregationStrategy::FourRussians,
    ] {
        let ops = count_operations(strategy, cfg.g, mask.t_n(), rows.iter().map(Vec::as_slice));
        aggregation.push(StrategyCount { strategy, g: cfg.g, total: ops.total(), ops });
    }
    let measured = if execute {
        let started = std::time::Instant::now();
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout)?;
        eprintln!("forward kernel: {:.3} s", started.elapsed().as_secs_f64());
        let strategy = resolve_strategy(cfg.aggregation, &cfg.auto, marginal_fraction);
        let dry = count_operations(strategy, cfg.g, mask.t_n(), rows.iter().map(Vec::as_slice));
        Some(Measured {
            critical_blocks: st.critical_blocks,
            strategy: st.strategy,
            matches_dry_run: dry == st.counter && st.critical_blocks == count_labels(&mask, BlockLabel::Critical),
            ops: st.counter,
        })
    } else {
        None
    };
    Ok(BenchReport {
        layout,
        critical_blocks: count_labels(&mask, BlockLabel::Critical),
        marginal_blocks: count_labels(&mask, BlockLabel::Marginal),
        negligible_blocks: count_labels(&mask, BlockLabel::Negligible),
        marginal_fraction,
        config: cfg,
        flops,
        aggregation,
        measured,
    })
}

fn bench(run: &RunSpec, execute: bool) -> Result<bool, Failure> {
    let (layout, cfg) = run.validate()?;
    build_pool(run.threads)?;
    let report = match cfg.dtype {
        DType::F32 => bench_typed::<f32>(run, layout, cfg, execute)?,
        DType::F64 => bench_typed::<f64>(run, layout, cfg, execute)?,
    };
    let f = &report.flops;
    eprintln!("full      {:>20}", f.full_flops);
    eprintln!("sparse    {:>20}", f.sparse_flops);
    eprintln!("linear    {:>20}", f.linear_flops);
    eprintln!("proj      {:>20}", f.proj_flops);
    eprintln!("mask      {:>20}", f.mask_flops);
    eprintln!("sla_total {:>20}", f.sla_total);
    eprintln!("ratio {:.5}  sparsity {:.5}", f.ratio, f.sparsity);
    for a in &report.aggregation {
        eprintln!("{:<14} g={:<2} total ops {}", format!("{:?}", a.strategy), a.g, a.total);
    }
    let ok = report.measured.as_ref().is_none_or(|m| m.matches_dry_run);
    if !ok {
        eprintln!("measured kernel counters disagree with the dry run");
    }
    emit(&report, run.out.as_deref())?;
    Ok(ok)
}

#[derive(Serialize)]
struct CurvePoint {
    keep_fraction: f64,
    error: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    n: usize,
    d: usize,
    seed: u64,
    qk_std: f64,
    histogram: WeightHistogram,
    stable_ranks: DecompositionReport,
    error_curve: Vec<CurvePoint>,
}

fn analyze(run: &RunSpec, top_fraction: f64, keep: &[f64], qk_std: f64, csv: Option<&Path>) -> Result<bool, Failure> {
    run.validate()?;
    if !(qk_std > 0.0 && qk_std.is_finite()) {
        return Err(SlaError::Config(format!("--qk-std must be positive, got {qk_std}")).into());
    }
    if keep.is_empty() || keep.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(SlaError::Config("--keep fractions must lie in (0, 1]".into()).into());
    }
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(SlaError::Config("--top-fraction must lie in (0, 1)".into()).into());
    }
    build_pool(run.threads)?;
    let (q, k, v) = run.inputs::<f64>(qk_std)?;
    let p = dense_attention_forward(&q, &k, &v)?.p;
    let histogram = weight_histogram(&p)?;
    let stable_ranks = decompose_weights(&p, top_fraction)?;
    let error_curve = keep
        .iter()
        .map(|&f| Ok(CurvePoint { keep_fraction: f, error: sparse_approx_error(&q, &k, &v, f)? }))
        .collect::<sla_core::Result<Vec<_>>>()?;

    eprintln!(
        "P > 1/N: {:.4}   P < 1/(100N): {:.4}   middle: {:.4}",
        histogram.frac_above_mean, histogram.frac_below_tiny, histogram.frac_middle
    );
    eprintln!(
        "stable rank full {:.3}  top {:.3}  rest {:.3}",
        stable_ranks.stable_rank_full, stable_ranks.stable_rank_top, stable_ranks.stable_rank_rest
    );
    for c in &error_curve {
        eprintln!("keep {:>6.3}  rel L1 error {:.5}", c.keep_fraction, c.error);
    }

    let csv_path = csv.map(Path::to_path_buf).or_else(|| run.out.as_ref().map(|o| o.with_extension("csv")));
    if let Some(path) = csv_path {
        let mut text = String::from("keep_fraction,error\n");
        for c in &error_curve {
            text.push_str(&format!("{},{}\n", c.keep_fraction, c.error));
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let report = AnalyzeReport { n: run.n, d: run.d, seed: run.seed, qk_std, histogram, stable_ranks, error_curve };
    emit(&report, run.out.as_deref())?;
    Ok(true)
}

#[derive(Serialize)]
struct TrainReport {
    config: FinetuneConfig,
    #[serde(flatten)]
    report: FinetuneReport,
    grad_check_passed: bool,
    loss_decreased: bool,
}

fn train_toy(
    run: &RunSpec,
    steps: usize,
    lr: f64,
    d_model: usize,
    batch: usize,
    freeze_mask: bool,
) -> Result<bool, Failure> {
    let (_, sla) = run.validate()?;
    if run.dtype != DType::F64 {
        return Err(SlaError::Config("train-toy runs in f64 only".into()).into());
    }
    if run.bq != run.bkv {
        return Err(SlaError::Config("train-toy needs --bq equal to --bkv".into()).into());
    }
    if run.input.is_some() {
        return Err(SlaError::Config("train-toy generates its own inputs; --input is not supported".into()).into());
    }
    if batch == 0 || d_model == 0 {
        return Err(SlaError::Config("--batch and --d-model must be at least 1".into()).into());
    }
    build_pool(run.threads)?;
    let config = FinetuneConfig {
        n: run.n,
        d: run.d,
        d_model,
        block: run.bq,
        steps,
        lr,
        seed: run.seed,
        batch,
        freeze_mask,
        sla,
        ..Default::default()
    };
    let report = toy_finetune(&config)?;
    let grad_check_passed = report.grad_check_error <= GRAD_CHECK_TOL;
    let loss_decreased = report.final_loss < report.initial_loss;
    eprintln!(
        "initial loss {:.6e}  final loss {:.6e}  ratio {:.4}  step-0 gradient check {:.2e}",
        report.initial_loss,
        report.final_loss,
        report.final_loss / report.initial_loss,
        report.grad_check_error
    );
    let out = TrainReport { config, report, grad_check_passed, loss_decreased };
    emit(&out, run.out.as_deref())?;
    Ok(grad_check_passed && loss_decreased)
}

fn run(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Check { run, cases } => check(run, *cases),
        Command::Bench { run, execute } => bench(run, *execute),
        Command::Analyze { run, top_fraction, keep, qk_std, csv } => {
            analyze(run, *top_fraction, keep, *qk_std, csv.as_deref())
        }
        Command::TrainToy { run, steps, lr, d_model, batch, freeze_mask } => {
            train_toy(run, *steps, *lr, *d_model, *batch, *freeze_mask)
        }
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(&Cli::parse()))
}
