//! `toptheta`: calibrate threshold stores, run sparse-attention evaluations
//! and merge their CSV reports.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 bad configuration
//! (including a store/run mode mismatch), 3 calibration failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use top_theta::calibration::{calibrate_sdc_offline, calibrate_single_k, KPolicy, ThresholdMode};
use top_theta::harness::{evaluate, merge_reports, read_report, write_report, Method, Phase, RunConfig, RunReport};
use top_theta::mkc::{calibrate_multi_k, MultiKOptions};
use top_theta::sparse::{CompensationConfig, SdcEstimator};
use top_theta::store::ThresholdStore;
use top_theta::workload::{Workload, WorkloadSpec};
use top_theta::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;

#[derive(Parser)]
#[command(name = "toptheta", version, about = "Calibrated-threshold sparse attention harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate thresholds on a workload's calibration stream and write a store.
    Calibrate(CalibrateArgs),
    /// Evaluate a configuration on the evaluation stream and write a CSV report.
    Run(RunArgs),
    /// Merge CSV reports and print them with deltas against dense rows.
    Report(ReportArgs),
}

#[derive(Args)]
struct WorkloadArgs {
    /// Workload spec (TOML); the built-in desk-scale default when omitted.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long, env = "TOPTHETA_SEED")]
    seed: Option<u64>,
    /// Use only the first N samples of the stream.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pre,
    Post,
}

impl From<ModeArg> for ThresholdMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pre => ThresholdMode::PreSoftmax,
            ModeArg::Post => ThresholdMode::PostSoftmax,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Target number of kept elements per row.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Layers (from the first) calibrated at `--dense-k` instead.
    #[arg(long, default_value_t = 0)]
    dense_layers: usize,
    /// k of the leading layers; defaults to 4k, kept below the shortest sequence.
    #[arg(long)]
    dense_k: Option<usize>,
    /// Threshold = mean + alpha * std of the per-sample thresholds.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "pre")]
    mode: ModeArg,
    /// Also store offline softmax-denominator estimates (pre-softmax only).
    #[arg(long)]
    sdc_offline: bool,
    /// Spread multiplier of the offline estimates.
    #[arg(long, default_value_t = 0.0)]
    e_alpha: f64,
    /// Multi-k calibration: the store then serves any k up to `--mkc-max-k`.
    #[arg(long)]
    mkc: bool,
    /// Keep every s-th interval boundary per row.
    #[arg(long, default_value_t = 4)]
    mkc_subsample: usize,
    /// Calibrate every r-th row id; others use the nearest row.
    #[arg(long, default_value_t = 4)]
    mkc_row_stride: usize,
    #[arg(long, default_value_t = 256)]
    mkc_max_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Dense,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum SdcArg {
    None,
    Offline,
    ExpThreshold,
    Exact,
}

impl From<SdcArg> for SdcEstimator {
    fn from(s: SdcArg) -> Self {
        match s {
            SdcArg::None => SdcEstimator::None,
            SdcArg::Offline => SdcEstimator::Offline,
            SdcArg::ExpThreshold => SdcEstimator::ExpThreshold,
            SdcArg::Exact => SdcEstimator::Exact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Threshold store; required unless a baseline is chosen.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Run a baseline instead of Top-θ.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Must match the store's mode for Top-θ runs; defaults to it.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// One configuration per value (comma separated). Top-θ needs a multi-k
    /// store for values other than its calibrated k.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "none")]
    sdc: SdcArg,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    #[arg(long)]
    vmc: bool,
    #[arg(long)]
    capk: bool,
    #[arg(long, value_enum, default_value = "prefill")]
    phase: PhaseArg,
    /// Write per-row selection records as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// CSV report; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Reports written by `run`.
    reports: Vec<PathBuf>,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if is_config_error(e) => EXIT_BAD_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_)
            | Error::InvalidWorkload(_)
            | Error::InvalidGeometry(_)
            | Error::Store(_)
            | Error::Report(_)
            | Error::MissingCompensation { .. }
            | Error::KNotAchievable { .. }
    )
}

fn bad_config(msg: String) -> Failure {
    Failure { code: EXIT_BAD_CONFIG, error: anyhow::anyhow!(msg) }
}

/// Errors raised while calibrating exit with 3 unless the input itself was invalid.
fn calibration_failure(e: Error) -> Failure {
    let code = if is_config_error(&e) { EXIT_BAD_CONFIG } else { EXIT_CALIBRATION };
    Failure { code, error: anyhow::Error::from(e).context("calibration failed") }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_workload(args: &WorkloadArgs) -> Result<Workload, Failure> {
    let spec = match &args.workload {
        Some(path) => WorkloadSpec::load(path).map_err(|e| match e {
            Error::Io(io) => Failure {
                code: EXIT_FAILURE,
                error: anyhow::Error::from(io).context(format!("reading {}", path.display())),
            },
            other => other.into(),
        })?,
        None => WorkloadSpec::default(),
    };
    let seed = args.seed.unwrap_or(spec.seed);
    Ok(Workload::with_seed(spec, seed)?)
}

fn take<T>(items: &[T], limit: Option<usize>) -> &[T] {
    &items[..limit.unwrap_or(items.len()).min(items.len())]
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let workload = load_workload(&args.workload)?;
    let g = *workload.geometry();
    let streams = workload.streams()?;
    let samples = take(&streams.calibration, args.workload.samples);
    let mode = ThresholdMode::from(args.mode);
    if args.dense_layers > g.num_layers {
        return Err(bad_config(format!("--dense-layers {} exceeds {} layers", args.dense_layers, g.num_layers)));
    }
    let policy = if args.dense_layers == 0 {
        KPolicy::uniform(args.k, g.num_layers)
    } else {
        let shortest = samples.iter().map(|s| s.seq_len).min().unwrap_or(0);
        let dense_k = args.dense_k.unwrap_or((4 * args.k).min(shortest.saturating_sub(1)).max(args.k));
        KPolicy::dense_first(args.k, args.dense_layers, dense_k, g.num_layers)
    };
    if args.sdc_offline && mode != ThresholdMode::PreSoftmax {
        return Err(bad_config("--sdc-offline needs --mode pre".into()));
    }

    let (table, multi_k) = if args.mkc {
        let options = MultiKOptions {
            subsample: args.mkc_subsample,
            row_stride: args.mkc_row_stride,
            max_k: args.mkc_max_k.max(policy.max_k()),
        };
        let multi = calibrate_multi_k(&workload, samples, mode, options).map_err(calibration_failure)?;
        (multi.table_for(&policy).map_err(calibration_failure)?, Some(multi))
    } else {
        let cal = calibrate_single_k(&workload, samples, &policy, args.alpha, mode).map_err(calibration_failure)?;
        (cal.table, None)
    };
    let table = if args.sdc_offline {
        calibrate_sdc_offline(&workload, samples, &table, args.e_alpha).map_err(calibration_failure)?
    } else {
        table
    };

    let store = ThresholdStore { table, multi_k };
    let layout = store.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let t = &store.table;
    println!("layer,k,rows,theta_min,theta_mean,theta_max");
    for layer in 0..g.num_layers {
        let rows: usize = (0..g.num_heads).map(|h| t.head(layer, h).len()).sum();
        let (lo, mean, hi) = t.layer_summary(layer).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        println!("{layer},{},{rows},{lo:.6},{mean:.6},{hi:.6}", t.k_for_layer(layer));
    }
    eprintln!(
        "wrote {} ({} thresholds, {} bytes, {} samples, {} mode{})",
        args.out.display(),
        t.total_thresholds(),
        layout.total(),
        samples.len(),
        t.mode,
        if store.multi_k.is_some() { ", multi-k" } else { "" }
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let workload = load_workload(&args.workload)?;
    let g = *workload.geometry();
    let streams = workload.streams()?;
    let samples = take(&streams.evaluation, args.workload.samples);
    let compensation = CompensationConfig { sdc: args.sdc.into(), gamma: args.gamma, vmc: args.vmc, capk: args.capk };
    let phase = match args.phase {
        PhaseArg::Prefill => Phase::Prefill,
        PhaseArg::Decode => Phase::Decode,
    };

    // (config, table) pairs to evaluate.
    let mut runs = Vec::new();
    match args.baseline {
        Some(baseline) => {
            let mode = args.mode.map_or(ThresholdMode::PreSoftmax, ThresholdMode::from);
            let method = if baseline == Baseline::Dense { Method::Dense } else { Method::TopK };
            let ks = if args.k.is_empty() { vec![32] } else { args.k.clone() };
            let ks = if method == Method::Dense { vec![ks[0]] } else { ks };
            for k in ks {
                let name = if method == Method::Dense { "dense".to_string() } else { format!("topk-k{k}") };
                let config = RunConfig {
                    name,
                    method,
                    mode,
                    k_policy: KPolicy::uniform(k, g.num_layers),
                    compensation,
                    phase,
                };
                runs.push((config, None));
            }
        }
        None => {
            let path = args.store.as_ref().ok_or_else(|| bad_config("a Top-θ run needs --store".into()))?;
            let store = ThresholdStore::load(path).map_err(|e| match e {
                Error::Io(io) => Failure {
                    code: EXIT_FAILURE,
                    error: anyhow::Error::from(io).context(format!("reading {}", path.display())),
                },
                other => other.into(),
            })?;
            let mode = store.table.mode;
            if let Some(requested) = args.mode.map(ThresholdMode::from) {
                if requested != mode {
                    return Err(bad_config(format!(
                        "mode mismatch: store {} was calibrated {mode}-softmax, run asks for {requested}-softmax",
                        path.display()
                    )));
                }
            }
            let tables = if args.k.is_empty() {
                vec![store.table.clone()]
            } else {
                args.k
                    .iter()
                    .map(|&k| {
                        let policy = KPolicy::uniform(k, g.num_layers);
                        match &store.multi_k {
                            Some(multi) => multi.table_for(&policy).map_err(Failure::from),
                            None if store.table.k_policy == policy => Ok(store.table.clone()),
                            None => Err(bad_config(format!(
                                "store {} holds k = {:?} only; calibrate with --mkc to query other k",
                                path.display(),
                                store.table.k_policy.0
                            ))),
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            for table in tables {
                let k = &table.k_policy;
                let label = if k.0.windows(2).all(|w| w[0] == w[1]) {
                    k.0[0].to_string()
                } else {
                    k.0.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
                };
                let config = RunConfig {
                    name: format!("top-theta-k{label}"),
                    method: Method::TopTheta,
                    mode,
                    k_policy: table.k_policy.clone(),
                    compensation,
                    phase,
                };
                runs.push((config, Some(table)));
            }
        }
    }

    let mut reports = Vec::new();
    let mut trace = args.trace.as_deref().map(create).transpose()?;
    for (config, table) in &runs {
        let eval = evaluate(&workload, samples, config, table.as_ref(), trace.is_some())?;
        if let Some(out) = &mut trace {
            for t in &eval.traces {
                writeln!(out, "{}", t.to_line()).context("writing trace")?;
            }
        }
        let k_policy = table.as_ref().map_or(&config.k_policy, |t| &t.k_policy);
        let s = &eval.summary;
        eprintln!(
            "{}: kept ratio {:.4}, V-row ratio {:.4}, k~/k {:.4}, rel L2 mean {:.4e}, cosine {:.6}",
            config.name, s.kept_ratio, s.vrow_ratio, s.k_tilde_over_k_mean, s.rel_l2_mean, s.cosine_mean
        );
        reports.push(RunReport::new(config, k_policy, &eval));
    }
    if let Some(out) = &mut trace {
        out.flush().context("writing trace")?;
    }
    match &args.out {
        Some(path) => write_report(create(path)?, &reports)?,
        None => write_report(std::io::stdout().lock(), &reports)?,
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut inputs = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let rows = read_report(file).map_err(|e| bad_config(format!("{}: {e}", path.display())))?;
        inputs.push(rows);
    }
    merge_reports(std::io::stdout().lock(), &inputs)?;
    Ok(())
}
