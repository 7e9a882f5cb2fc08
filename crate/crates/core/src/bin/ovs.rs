//! `ovs`: dataset generation, estimator training, sampling, registration,
//! evaluation sweeps and reports.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, unknown
//! sampler, unreadable config, missing checkpoint), 1 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use overlap_sampling::config::KvConfig;
use overlap_sampling::estimator::{train_with_progress, EstimatorModel, TrainConfig, TrainPair, TRAIN_CONFIG_KEYS};
use overlap_sampling::harness::{
    parse_budgets, parse_methods, report, sweep, write_records, write_training_log, SweepConfig, SWEEP_CONFIG_KEYS,
};
use overlap_sampling::io::{load_manifest, read_ply, write_dataset, write_ply, PlyFormat, Regime, SceneConfig, ShapeKind};
use overlap_sampling::io::synth::generate_set;
use overlap_sampling::pipeline::{run_pair, sample_cloud, sample_pair, MemoryLedger, Method};
use overlap_sampling::{Error, RigidTransform};

/// Environment variable naming the default dataset directory.
const DATA_ENV: &str = "OVERLAP_SAMPLING_DATA";

#[derive(Parser)]
#[command(name = "ovs", version, about = "Overlap-aware point cloud sampling for registration")]
struct Cli {
    /// Key-value config file; its values replace the defaults and explicit
    /// flags replace its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of scan pairs.
    Generate(GenerateArgs),
    /// Train the overlap estimator on a dataset.
    Train(TrainArgs),
    /// Sample one cloud (or one pair) with one method.
    Sample(SampleArgs),
    /// Sample and register one pair.
    Register(RegisterArgs),
    /// Run the sampler × budget sweep and write per-pair records.
    Evaluate(EvaluateArgs),
    /// Summarise a records CSV into a summary CSV and SVG plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataDir {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataDir,
    /// Pairs per regime.
    #[arg(long)]
    pairs: Option<usize>,
    /// Comma-separated regimes.
    #[arg(long)]
    regimes: Option<String>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Restrict to one shape kind; by default kinds alternate.
    #[arg(long)]
    shape: Option<ShapeKind>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataDir,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Regime of the training pairs.
    #[arg(long, default_value = "match")]
    regime: Regime,
    /// Use at most this many pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    src: PathBuf,
    /// Second cloud; required by the estimator methods.
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 0.2)]
    budget: f64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sampled source cloud.
    #[arg(long)]
    out: PathBuf,
    /// Sampled target cloud.
    #[arg(long)]
    out_tgt: Option<PathBuf>,
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value = "random")]
    method: Method,
    #[arg(long, default_value_t = 0.2)]
    budget: f64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ground-truth transform, 16 comma-separated row-major values.
    #[arg(long)]
    truth: Option<String>,
    /// Result JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataDir,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Records CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods; defaults to all methods the checkpoint allows.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated budget fractions.
    #[arg(long)]
    budgets: Option<String>,
    /// Evaluate only the first N pairs of the manifest.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    /// Output directory for summary.csv and the SVG plots.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(path: Option<&Path>, known: &[&str]) -> CliResult<KvConfig> {
    let Some(path) = path else {
        return Ok(KvConfig::default());
    };
    let kv = KvConfig::load(path).map_err(usage)?;
    kv.reject_unknown(known).map_err(usage)?;
    Ok(kv)
}

fn load_model(path: Option<&Path>, needed: bool) -> CliResult<Option<EstimatorModel>> {
    match path {
        Some(p) if !p.exists() => Err(usage(format!("checkpoint {} not found", p.display()))),
        Some(p) => Ok(Some(EstimatorModel::load(p)?)),
        None if needed => Err(usage("this method needs --checkpoint")),
        None => Ok(None),
    }
}

const GENERATE_KEYS: &[&str] = &[
    "pairs",
    "regimes",
    "points",
    "noise",
    "shape",
    "seed",
    "scale",
    "base_factor",
    "max_translation",
    "overlap_radius",
];

fn parse_regimes(raw: &str) -> CliResult<Vec<Regime>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Regime>().map_err(usage))
        .collect()
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let kv = load_config(cli.config.as_deref(), GENERATE_KEYS)?;
    let mut tpl = SceneConfig::default();
    let mut pairs = 10usize;
    let mut regimes = "match,lomatch".to_string();
    let mut shape: Option<ShapeKind> = None;
    kv.read_into("pairs", &mut pairs).map_err(usage)?;
    kv.read_into("regimes", &mut regimes).map_err(usage)?;
    kv.read_into("points", &mut tpl.points_per_cloud).map_err(usage)?;
    kv.read_into("noise", &mut tpl.noise_sigma).map_err(usage)?;
    kv.read_into("seed", &mut tpl.seed).map_err(usage)?;
    kv.read_into("scale", &mut tpl.scale).map_err(usage)?;
    kv.read_into("base_factor", &mut tpl.base_factor).map_err(usage)?;
    kv.read_into("max_translation", &mut tpl.max_translation).map_err(usage)?;
    kv.read_into("overlap_radius", &mut tpl.overlap_radius).map_err(usage)?;
    if let Some(s) = kv.get::<ShapeKind>("shape").map_err(usage)? {
        shape = Some(s);
    }
    pairs = a.pairs.unwrap_or(pairs);
    tpl.points_per_cloud = a.points.unwrap_or(tpl.points_per_cloud);
    tpl.noise_sigma = a.noise.unwrap_or(tpl.noise_sigma);
    tpl.seed = cli.seed.unwrap_or(tpl.seed);
    shape = a.shape.or(shape);
    let regimes = parse_regimes(a.regimes.as_deref().unwrap_or(&regimes))?;
    let mut all = Vec::new();
    for regime in regimes {
        for pair in generate_set(regime, pairs, shape, &tpl)? {
            all.push((regime, pair));
        }
    }
    let manifest = write_dataset(&a.data.data, &all)?;
    println!("wrote {} pairs to {}", manifest.entries.len(), a.data.data.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let kv = load_config(cli.config.as_deref(), TRAIN_CONFIG_KEYS)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&kv).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.model.init_seed = s;
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.adam.lr = a.lr.unwrap_or(cfg.adam.lr);
    cfg.validate().map_err(usage)?;
    let manifest = load_manifest(&a.data.data)?;
    let mut pairs = Vec::new();
    for entry in manifest.regime(a.regime).take(a.limit.unwrap_or(usize::MAX)) {
        let (src, tgt) = manifest.load_pair(entry)?;
        pairs.push(TrainPair {
            src,
            tgt,
            t_true: entry.t_true,
        });
    }
    if pairs.is_empty() {
        return Err(Failure::Runtime(Error::InvalidArgument(format!(
            "no {} pairs in {}",
            a.regime.name(),
            a.data.data.display()
        ))));
    }
    let outcome = train_with_progress(&pairs, &cfg, |e| {
        println!(
            "epoch {} loss {:.5} circle {:.5} overlap {:.5} matchability {:.5} accuracy {:.3}",
            e.epoch, e.total, e.components.circle, e.components.overlap, e.components.matchability, e.matching_accuracy
        )
    })?;
    outcome.model.save(&a.out)?;
    if let Some(log) = &a.log {
        write_training_log(log, &outcome.log)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ply_format(ascii: bool) -> PlyFormat {
    if ascii {
        PlyFormat::Ascii
    } else {
        PlyFormat::BinaryLittleEndian
    }
}

fn sample(cli: &Cli, a: &SampleArgs) -> CliResult<()> {
    let kv = load_config(cli.config.as_deref(), SWEEP_CONFIG_KEYS)?;
    let mut sc = SweepConfig::default();
    sc.apply_kv(&kv).map_err(usage)?;
    let seed = cli.seed.unwrap_or(sc.seed);
    if !(a.budget > 0.0 && a.budget <= 1.0) {
        return Err(usage(format!("--budget must be in (0, 1], got {}", a.budget)));
    }
    let model = load_model(a.checkpoint.as_deref(), a.method.needs_model())?;
    let src = read_ply(&a.src)?;
    let fmt = ply_format(a.ascii);
    match &a.tgt {
        None if a.method.needs_model() => return Err(usage(format!("method {} needs --tgt", a.method))),
        None => {
            let s = sample_cloud(&src, a.method, a.budget, seed)?;
            write_ply(&s.points, &a.out, fmt)?;
            println!("{} -> {} points", src.len(), s.points.len());
        }
        Some(tgt_path) => {
            let tgt = read_ply(tgt_path)?;
            let mut ledger = MemoryLedger::new();
            let (s, t, _) = sample_pair(&src, &tgt, a.method, a.budget, model.as_ref(), &sc.pipeline, seed, &mut ledger)?;
            write_ply(&s.points, &a.out, fmt)?;
            if let Some(out_tgt) = &a.out_tgt {
                write_ply(&t.points, out_tgt, fmt)?;
            }
            println!(
                "{} -> {} points, {} -> {} points, sampling peak {} bytes",
                src.len(),
                s.points.len(),
                tgt.len(),
                t.points.len(),
                ledger.sampling_peak()
            );
        }
    }
    Ok(())
}

fn parse_transform(raw: &str) -> CliResult<RigidTransform> {
    let values: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("bad transform value '{s}'"))))
        .collect::<CliResult<_>>()?;
    let m: [f64; 16] = values
        .try_into()
        .map_err(|_| usage("--truth needs 16 comma-separated values"))?;
    RigidTransform::from_row_major(&m).map_err(usage)
}

fn register(cli: &Cli, a: &RegisterArgs) -> CliResult<()> {
    let kv = load_config(cli.config.as_deref(), SWEEP_CONFIG_KEYS)?;
    let mut sc = SweepConfig::default();
    sc.apply_kv(&kv).map_err(usage)?;
    let seed = cli.seed.unwrap_or(sc.seed);
    let truth = a.truth.as_deref().map(parse_transform).transpose()?;
    let model = load_model(a.checkpoint.as_deref(), a.method.needs_model())?;
    let src = read_ply(&a.src)?;
    let tgt = read_ply(&a.tgt)?;
    let run = run_pair(&src, &tgt, a.method, a.budget, model.as_ref(), &sc.pipeline, seed)?;
    let transform = run.registration.transform.map(|t| t.to_row_major().to_vec());
    let rmse = match &truth {
        Some(t) => run.rmse(&src, t)?,
        None => None,
    };
    let result = serde_json::json!({
        "method": a.method.name(),
        "budget": a.budget,
        "transform": transform,
        "matches": run.registration.matches.len(),
        "inliers": run.registration.inliers.len(),
        "peak_bytes": run.ledger.reported(),
        "sampling_peak_bytes": run.ledger.sampling_peak(),
        "registration_peak_bytes": run.ledger.registration_peak(),
        "rmse": rmse,
        "success": rmse.map(|r| r < sc.pipeline.recall_rmse),
    });
    let text = serde_json::to_string_pretty(&result).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let kv = load_config(cli.config.as_deref(), SWEEP_CONFIG_KEYS)?;
    let mut sc = SweepConfig::default();
    sc.apply_kv(&kv).map_err(usage)?;
    if let Some(s) = cli.seed {
        sc.seed = s;
    }
    if let Some(m) = &a.methods {
        sc.methods = parse_methods(m).map_err(usage)?;
    } else if kv.get_str("methods").is_none() && a.checkpoint.is_none() {
        sc.methods.retain(|m| !m.needs_model());
    }
    if let Some(b) = &a.budgets {
        sc.budgets = parse_budgets(b).map_err(usage)?;
    }
    let model = load_model(a.checkpoint.as_deref(), sc.methods.iter().any(|m| m.needs_model()))?;
    let mut manifest = load_manifest(&a.data.data)?;
    if let Some(limit) = a.limit {
        manifest.entries.truncate(limit);
    }
    let records = sweep(&manifest, model.as_ref(), &sc)?;
    write_records(&a.out, &records)?;
    let failed = records.iter().filter(|r| !r.error.is_empty()).count();
    println!("wrote {} records ({failed} failed runs) to {}", records.len(), a.out.display());
    Ok(())
}

fn run_report(a: &ReportArgs) -> CliResult<()> {
    let rows = report(&a.records, &a.out)?;
    for r in &rows {
        println!(
            "{:<8} {:<21} {:<5} recall {:.3} ({}/{}) peak {:.0} B",
            r.regime.name(),
            r.method.name(),
            r.budget,
            r.recall,
            r.successes,
            r.pairs,
            r.mean_peak_bytes
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Sample(a) => sample(&cli, a),
        Command::Register(a) => register(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
