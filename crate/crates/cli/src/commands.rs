use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use progtta::baselines::train_clipft;
use progtta::checkpoint;
use progtta::config::KeyValueConfig;
use progtta::data::{load_vector, Manifest};
use progtta::eval::{self, Estimator, EvalReport, Format};
use progtta::gradcheck;
use progtta::meta::{render_log_csv, train, TrainConfig};
use progtta::synth::{generate, write_bundle, SynthSpec};
use progtta::ttt::{AdaptConfig, MetaGradMode, Variant};
use progtta::Error;

/// Invalid combination of command-line arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 0 success, 1 usage, 2 data or format, 3 numerical failure.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Numerical(_) | Error::NonFinite(_)) => 3,
        Some(Error::UnknownEstimator(_)) => 1,
        _ => 2,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "progtta",
    version,
    about = "Test-time adaptation for task progress estimation"
)]
pub struct Cli {
    /// Worker threads for trajectory-parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle with shifted evaluation splits.
    Synth(SynthArgs),
    /// Meta-train a model (or, with --clipft, the supervised regressor).
    Train(TrainArgs),
    /// Evaluate a meta-trained model with one adaptation variant.
    Eval(EvalArgs),
    /// Evaluate a reference estimator.
    Baseline(BaselineArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Merge JSON reports into one table.
    Report(ReportArgs),
    /// Train and evaluate over a grid of config overrides.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Key-value spec file; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetaGradArg {
    Exact,
    FirstOrder,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest with a labeled `train` split.
    #[arg(long)]
    data: PathBuf,
    /// Key-value training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    meta_grad: Option<MetaGradArg>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss log path (default: `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train the supervised regressor without adaptation instead.
    #[arg(long)]
    clipft: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Tsv,
    Md,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => Format::Tsv,
            FormatArg::Md => Format::Markdown,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value = "tsv")]
    format: FormatArg,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-frame predictions CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// ttt-im, ttt-ex, ttt-tr or ttt-rs.
    #[arg(long, default_value = "ttt-im")]
    variant: String,
    /// Inner learning rate (default depends on the variant).
    #[arg(long)]
    eta: Option<f64>,
    /// Context frames before the current one (EX only).
    #[arg(long)]
    k: Option<usize>,
    /// Gradient steps per update.
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Carry the adapted parameters from one trajectory to the next.
    #[arg(long)]
    carry: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Clip,
    Vlmrm,
    Clipft,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    data: PathBuf,
    /// Reference-prompt embedding (vlmrm).
    #[arg(long)]
    baseline_embedding: Option<PathBuf>,
    /// Regressor checkpoint from `train --clipft` (clipft).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Also check gradients through the inner update.
    #[arg(long)]
    second_order: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// JSON reports from `eval` or `baseline`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=v1,v2,...`; repeat for a cartesian grid.
    #[arg(long = "grid", required = true)]
    grid: Vec<String>,
    #[arg(long, default_value = "ttt-im")]
    variant: String,
    /// Directory for per-point checkpoints and configs.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Baseline(a) => baseline(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Report(a) => report(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_text(&read_text(p)?).with_context(|| format!("in spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let occupied = a.out.is_dir() && fs::read_dir(&a.out).map_err(Error::from)?.next().is_some();
    if occupied && !a.force {
        return Err(usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let bundle = generate(&spec)?;
    let manifest = write_bundle(&bundle, &a.out)?;
    for split in &bundle.splits {
        let frames: usize = split.records.iter().map(|r| r.len()).sum();
        println!(
            "{:6} {:5} trajectories {:6} frames",
            split.name,
            split.records.len(),
            frames
        );
    }
    println!("manifest {}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_text(&read_text(p)?).with_context(|| format!("in config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(m) = a.meta_grad {
        cfg.meta_grad_mode = match m {
            MetaGradArg::Exact => MetaGradMode::Exact,
            MetaGradArg::FirstOrder => MetaGradMode::FirstOrder,
        };
    }
    let manifest = load_manifest(&a.data)?;
    let data = manifest.load_training()?;
    let outcome = if a.clipft {
        train_clipft(&data, &cfg)?
    } else {
        train(&data, &cfg)?
    };
    checkpoint::save(&a.out, &outcome.params)?;
    let log = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        p.into()
    });
    fs::write(&log, render_log_csv(&outcome.log)).map_err(Error::from)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs: pred_loss {:.6} self_loss {:.6}",
            last.epoch, last.pred_loss, last.self_loss
        );
    }
    println!("checkpoint {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn emit(report: &EvalReport, out: &OutputArgs) -> Result<()> {
    let text = eval::render(std::slice::from_ref(report), out.format.into());
    match &out.out {
        Some(p) => fs::write(p, text).map_err(Error::from)?,
        None => print!("{text}"),
    }
    if let Some(p) = &out.predictions {
        fs::write(p, report.predictions_csv()).map_err(Error::from)?;
    }
    Ok(())
}

fn adapt_config(variant: &str, eta: Option<f64>, k: Option<usize>, epochs: usize, carry: bool) -> Result<AdaptConfig> {
    let variant: Variant = variant.parse()?;
    let mut cfg = AdaptConfig::for_variant(variant);
    if let Some(eta) = eta {
        cfg.lr = eta;
    }
    if let Some(k) = k {
        cfg.context = k;
    }
    cfg.epochs = epochs;
    cfg.carry_across_episodes = carry;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let cfg = adapt_config(&a.variant, a.eta, a.k, a.epochs, a.carry)?;
    let meta = checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let splits = eval::load_splits(&load_manifest(&a.data)?)?;
    let report = eval::evaluate(&splits, &Estimator::Ttt { meta: &meta, cfg })?;
    emit(&report, &a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn baseline(a: BaselineArgs) -> Result<ExitCode> {
    let splits = eval::load_splits(&load_manifest(&a.data)?)?;
    let (baseline, meta);
    let estimator = match a.method {
        Method::Clip => Estimator::Clip,
        Method::Vlmrm => {
            let path = a
                .baseline_embedding
                .ok_or_else(|| usage("--method vlmrm requires --baseline-embedding"))?;
            baseline = load_vector(&path)?.into_iter().map(f64::from).collect::<Vec<f64>>();
            Estimator::VlmRm { baseline: &baseline }
        }
        Method::Clipft => {
            let path = a.model.ok_or_else(|| usage("--method clipft requires --model"))?;
            meta = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            Estimator::ClipFt { meta: &meta }
        }
    };
    let report = eval::evaluate(&splits, &estimator)?;
    emit(&report, &a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck::run(a.second_order, a.seed)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let mut reports = Vec::new();
    for p in &a.inputs {
        reports.extend(eval::parse_reports(&read_text(p)?).with_context(|| format!("in {}", p.display()))?);
    }
    print!("{}", eval::render(&reports, a.format.into()));
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (key, values) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("grid entry {s:?} must look like key=v1,v2")))?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(usage(format!("grid entry {s:?} has no values")));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

/// Cartesian product of the grid, first key varying slowest.
fn grid_points(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    grid.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let base = train_config(a.config.as_deref())?;
    let grid = parse_grid(&a.grid)?;
    let adapt = adapt_config(&a.variant, None, None, 1, false)?;
    let manifest = load_manifest(&a.data)?;
    let data = manifest.load_training()?;
    let splits = eval::load_splits(&manifest)?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let keys: Vec<&str> = grid.iter().map(|(k, _)| k.as_str()).collect();
    let mut table = format!("point\t{}", keys.join("\t"));
    for s in &splits {
        table.push_str(&format!("\t{}", s.name));
    }
    table.push_str("\tpooled\n");
    for (i, point) in grid_points(&grid).iter().enumerate() {
        let overrides: String = point.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let cfg = base.clone().apply_text(&overrides).map_err(|e| usage(e.to_string()))?;
        let outcome = train(&data, &cfg)?;
        let stem = a.out_dir.join(format!("point{i:03}"));
        checkpoint::save(stem.with_extension("ttpm"), &outcome.params)?;
        fs::write(stem.with_extension("cfg"), cfg.render()).map_err(Error::from)?;
        let report = eval::evaluate(
            &splits,
            &Estimator::Ttt {
                meta: &outcome.params,
                cfg: adapt,
            },
        )?;
        table.push_str(&format!("{i}"));
        for (_, v) in point {
            table.push_str(&format!("\t{v}"));
        }
        for d in &report.datasets {
            table.push_str(&format!("\t{:.4}", d.mean_voc));
        }
        table.push_str(&format!("\t{:.4}\n", report.pooled_mean()));
    }
    print!("{table}");
    fs::write(a.out_dir.join("sweep.tsv"), &table).map_err(Error::from)?;
    Ok(ExitCode::SUCCESS)
}
