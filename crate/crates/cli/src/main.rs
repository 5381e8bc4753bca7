//! `apr`: run, average, sweep and inspect pseudo-replay experiments.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use apr_core::calib::PrototypeStore;
use apr_core::classify::ClassifierKind;
use apr_core::data::AugFamily;
use apr_core::pipeline::{run_benchmark, RunConfig, RunOutcome};
use apr_core::storage::{storage_report, total_bytes, CovMode, Precision, StorageInputs};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Seed pairs `(class_seed, seed)` used by `bench`.
const BENCH_SEEDS: [(u64, u64); 3] = [(1993, 0), (2993, 1000), (3993, 2000)];

#[derive(Parser)]
#[command(name = "apr", version, about = "Adversarial pseudo-replay benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration.
    Run(RunArgs),
    /// Run the three standard seed pairs and report mean ± std.
    Bench(RunArgs),
    /// Grid over attack magnitude and iteration count.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated attack magnitudes.
        #[arg(long, value_delimiter = ',', default_value = "64")]
        alpha: Vec<f64>,
        /// Comma-separated attack iteration counts.
        #[arg(long, value_delimiter = ',', default_value = "4")]
        n_attack: Vec<usize>,
    },
    /// Re-store a prototype checkpoint with rank-k covariances.
    Decompose {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Byte accounting for retained state.
    Report(ReportArgs),
    /// Print the resolved configuration as TOML.
    Config(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; omitted keys take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set replay.attack.alpha=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to `$APR_OUTPUT_ROOT/<name>` (root `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value_t = 90)]
    classes: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// `full` or `svd-<k>`.
    #[arg(long, default_value = "full")]
    cov: String,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 200)]
    candidates: usize,
    /// Read the augmentation family from this config instead of defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Read class count and feature dim from a prototype checkpoint.
    #[arg(long)]
    store: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run(args) => {
            let cfg = config::load(args.config.as_deref(), &args.overrides)?;
            let out = output_dir(&cfg, args.out.as_deref());
            let outcome = run_once(&cfg, &out)?;
            print_summary(&cfg.name, &outcome);
            println!("run directory: {}", out.display());
        }
        Cmd::Bench(args) => bench(&args)?,
        Cmd::Sweep { run, alpha, n_attack } => sweep(&run, &alpha, &n_attack)?,
        Cmd::Decompose { store, k, out } => {
            let mut s = PrototypeStore::load_json(&store)?;
            let before = s.covariance_scalars();
            s.compress(k)?;
            s.save_json(&out)?;
            println!("{} classes: {before} -> {} covariance scalars", s.len(), s.covariance_scalars());
        }
        Cmd::Report(args) => report(&args)?,
        Cmd::Config(args) => {
            let cfg = config::load(args.config.as_deref(), &args.overrides)?;
            print!("{}", toml::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn output_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os("APR_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.name)
}

fn run_meta() -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("command".into(), std::env::args().collect::<Vec<_>>().join(" "));
    if let Ok(out) = Command::new("git").args(["rev-parse", "HEAD"]).output() {
        if out.status.success() {
            meta.insert("git_rev".into(), String::from_utf8_lossy(&out.stdout).trim().to_string());
        }
    }
    meta
}

fn run_once(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    run_benchmark(cfg, out, &run_meta()).with_context(|| format!("run `{}` failed", cfg.name))
}

fn print_summary(name: &str, outcome: &RunOutcome) {
    for (kind, r) in &outcome.results {
        println!(
            "{name} {:<12} A_inc {:6.2}  A_last {:6.2}",
            kind.name(),
            100.0 * r.a_inc,
            100.0 * r.a_last
        );
    }
    println!("{name} wall time {:.1}s", outcome.wall_seconds);
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn bench(args: &RunArgs) -> Result<()> {
    let base = config::load(args.config.as_deref(), &args.overrides)?;
    let root = output_dir(&base, args.out.as_deref());
    let mut collected: BTreeMap<(ClassifierKind, &str), Vec<f64>> = BTreeMap::new();
    for (class_seed, seed) in BENCH_SEEDS {
        let cfg = RunConfig {
            class_seed,
            seed,
            ..base.clone()
        };
        let outcome = run_once(&cfg, &root.join(format!("seed_{class_seed}_{seed}")))?;
        print_summary(&format!("{} [{class_seed}/{seed}]", base.name), &outcome);
        for (kind, r) in &outcome.results {
            collected.entry((*kind, "a_inc")).or_default().push(r.a_inc);
            collected.entry((*kind, "a_last")).or_default().push(r.a_last);
        }
    }
    let mut csv = String::from("classifier,metric,mean,std,values\n");
    for ((kind, metric), vals) in &collected {
        let (m, s) = mean_std(vals);
        let joined: Vec<String> = vals.iter().map(f64::to_string).collect();
        csv.push_str(&format!("{},{metric},{m},{s},{}\n", kind.name(), joined.join(";")));
        println!("{} {:<12} {metric:<6} {:6.2} ± {:.2}", base.name, kind.name(), 100.0 * m, 100.0 * s);
    }
    fs::write(root.join("bench.csv"), csv)?;
    println!("bench directory: {}", root.display());
    Ok(())
}

fn sweep(args: &RunArgs, alphas: &[f64], iters: &[usize]) -> Result<()> {
    let base = config::load(args.config.as_deref(), &args.overrides)?;
    let root = output_dir(&base, args.out.as_deref());
    let mut csv = String::from("alpha,n_attack,classifier,a_inc,a_last\n");
    for &alpha in alphas {
        for &n in iters {
            let mut cfg = base.clone();
            cfg.replay.attack.alpha = alpha;
            cfg.replay.attack.n_attack = n;
            let outcome = run_once(&cfg, &root.join(format!("alpha_{alpha}_n_{n}")))?;
            print_summary(&format!("{} [alpha {alpha}, n {n}]", base.name), &outcome);
            for (kind, r) in &outcome.results {
                csv.push_str(&format!("{alpha},{n},{},{},{}\n", kind.name(), r.a_inc, r.a_last));
            }
        }
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("sweep.csv"), csv)?;
    println!("sweep directory: {}", root.display());
    Ok(())
}

fn parse_cov(s: &str) -> Result<CovMode> {
    if s == "full" {
        return Ok(CovMode::Full);
    }
    match s.strip_prefix("svd-").map(str::parse::<usize>) {
        Some(Ok(k)) => Ok(CovMode::Svd { k }),
        _ => bail!("--cov must be `full` or `svd-<k>`, got `{s}`"),
    }
}

fn report(args: &ReportArgs) -> Result<()> {
    let family = match &args.config {
        Some(p) => config::load(Some(p), &[])?.replay.family,
        None => AugFamily::default(),
    };
    let (classes, dim) = match &args.store {
        Some(p) => {
            let s = PrototypeStore::load_json(p)?;
            (s.len(), s.dim().unwrap_or(0))
        }
        None => (args.classes, args.dim),
    };
    let inputs = StorageInputs {
        old_classes: classes,
        feature_dim: dim,
        cov_mode: parse_cov(&args.cov)?,
        precision: match args.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        candidates_per_class: args.candidates,
        family,
    };
    let rows = storage_report(&inputs)?;
    println!("{:<28} {:>14} {:>10}", "item", "bytes", "MB");
    for r in &rows {
        println!("{:<28} {:>14} {:>10.2}", r.item, r.bytes, r.megabytes());
    }
    let total = total_bytes(&rows);
    println!("{:<28} {:>14} {:>10.2}", "total", total, total as f64 / 1e6);
    Ok(())
}
