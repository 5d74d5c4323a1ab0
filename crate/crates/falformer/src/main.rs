//! Command-line entry points: training, evaluation, synthetic-data
//! generation, attention approximation-error studies and the complexity
//! benchmark.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use falformer::attention::{AttentionMode, Pinv};
use falformer::bench::{
    bench_attention_point, format_approx_report, format_bench_report, run_approx_error,
    skipped_record,
};
use falformer::checkpoint::{load_checkpoint, save_checkpoint};
use falformer::data::{load_manifest, save_dataset, synth_generate, Split, SynthSpec};
use falformer::error::{Error, Result};
use falformer::model::ModelConfig;
use falformer::training::{evaluate_threaded, history_log, train, Averaging, TrainOptions};

#[derive(Parser)]
#[command(name = "falformer", version, about = "Bag-level classifier with feature-aware landmark attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a manifest-listed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Generate a synthetic multiple-instance dataset on disk.
    Synth(SynthArgs),
    /// Benchmark attention forward time, memory and FLOPs across N.
    BenchAttn(BenchAttnArgs),
    /// Compare landmark schemes by approximation error vs exact attention.
    ApproxError(ApproxErrorArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "falsa")]
    mode: String,
    #[arg(long, default_value_t = 768)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    segments: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// History log path; defaults to <out>.history.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pinv_iters: usize,
    #[arg(long, default_value_t = 0)]
    kmeans_seed: u64,
    /// Disable global-norm gradient clipping.
    #[arg(long, default_value_t = false)]
    no_clip: bool,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Override the class count inferred from the manifest.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for bags and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Total bag count, split 60/20/20 into train/val/test.
    #[arg(long, default_value_t = 100)]
    bags: usize,
    #[arg(long, default_value_t = 32)]
    d_f: usize,
    #[arg(long, default_value_t = 64)]
    min_tokens: usize,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    signal_cluster: usize,
    #[arg(long, default_value_t = 0.2)]
    signal_fraction: f64,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchAttnArgs {
    /// Comma-separated token counts, e.g. 512,1024,2048.
    #[arg(long, default_value = "1024,2048,4096,8192")]
    n_list: String,
    /// Comma-separated subset of exact,nystrom,falsa.
    #[arg(long, default_value = "exact,nystrom,falsa")]
    modes: String,
    #[arg(long, default_value_t = 257)]
    landmarks: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Exact mode is skipped above this token count.
    #[arg(long, default_value_t = 4096)]
    exact_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApproxErrorArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 5.0)]
    separation: f64,
    #[arg(long, default_value_t = 4)]
    landmarks: usize,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("FALFORMER_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.segments == 0 || args.epochs == 0 || args.d_model == 0 || args.heads == 0 {
        return Err(Error::InvalidArg(
            "segments, epochs, d-model and heads must be positive".into(),
        ));
    }
    if args.pinv_iters == 0 {
        return Err(Error::InvalidArg("pinv-iters must be at least 1".into()));
    }
    let mode = AttentionMode::parse(&args.mode)?;
    let dataset = load_manifest(&args.manifest)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::EmptyInput("manifest needs train and val bags"));
    }
    let d_f = dataset.d_f().ok_or(Error::EmptyInput("dataset has no bags"))?;
    let n_classes = args.classes.unwrap_or(dataset.n_classes).max(2);
    let config = ModelConfig {
        d_f,
        d_model: args.d_model,
        layers: args.layers,
        n_segments: args.segments,
        heads: args.heads,
        n_classes,
        attention_mode: mode,
        pinv: Pinv::Iterative {
            iters: args.pinv_iters,
        },
        kmeans_seed: args.kmeans_seed,
        kmeans_iters: 50,
        recluster_per_layer: false,
        cluster_raw_features: false,
    };
    config.validate()?;
    println!(
        "train: mode={} L={} d_model={} N_s={} heads={} d_f={} classes={} lr={} epochs={} patience={} seed={} clip={}",
        mode.as_str(),
        config.layers,
        config.d_model,
        config.n_segments,
        config.heads,
        config.d_f,
        config.n_classes,
        args.lr,
        args.epochs,
        args.patience,
        args.seed,
        if args.no_clip { "off".to_string() } else { "5".to_string() },
    );
    let opts = TrainOptions {
        lr: args.lr,
        epochs: args.epochs,
        patience: args.patience,
        seed: args.seed,
        clip: if args.no_clip { None } else { Some(5.0) },
        weight_decay: args.weight_decay,
        averaging: Averaging::Macro,
    };
    let outcome = train(&dataset.train, &dataset.val, &config, &opts)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.history", args.out.display())));
    let log = history_log(&outcome.history);
    for line in log.lines() {
        println!("{line}");
    }
    fs::write(&history_path, log).map_err(|e| Error::Io {
        path: history_path.display().to_string(),
        source: e,
    })?;
    save_checkpoint(&outcome.params, &config, Some(&outcome.opt_state), &args.out)?;
    println!(
        "best_epoch={} checkpoint={} history={}",
        outcome.best_epoch,
        args.out.display(),
        history_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = Split::parse(&args.split).ok_or_else(|| {
        Error::InvalidArg(format!("unknown split {:?} (train, val or test)", args.split))
    })?;
    let (params, config, _) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_manifest(&args.manifest)?;
    if let Some(d_f) = dataset.d_f() {
        if d_f != config.d_f {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint expects d_f {}, dataset has {}",
                config.d_f, d_f
            )));
        }
    }
    let bags = dataset.split(split);
    if bags.is_empty() {
        return Err(Error::EmptyInput("requested split has no bags"));
    }
    let report = evaluate_threaded(
        bags,
        &params,
        &config,
        resolve_threads(args.threads),
        Averaging::Macro,
    )?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.bags == 0 {
        return Err(Error::InvalidArg("need at least one bag".into()));
    }
    let train = args.bags * 6 / 10;
    let val = args.bags * 2 / 10;
    let test = args.bags - train - val;
    let spec = SynthSpec {
        bags: [train, val, test],
        d_f: args.d_f,
        tokens_min: args.min_tokens,
        tokens_max: args.max_tokens,
        n_clusters: args.clusters,
        signal_cluster: args.signal_cluster,
        signal_fraction: args.signal_fraction,
        separation: args.separation,
        noise_sigma: args.sigma,
    };
    let dataset = synth_generate(&spec, args.seed)?;
    let manifest = save_dataset(&dataset, &args.out)?;
    println!(
        "synth: bags={} (train={train} val={val} test={test}) d_f={} manifest={}",
        args.bags,
        args.d_f,
        manifest.display()
    );
    Ok(())
}

fn cmd_bench_attn(args: BenchAttnArgs) -> Result<()> {
    if args.repeats < 3 {
        return Err(Error::InvalidArg("repeats must be at least 3".into()));
    }
    if args.landmarks == 0 || args.d == 0 {
        return Err(Error::InvalidArg("landmarks and d must be positive".into()));
    }
    let ns: Vec<usize> = args
        .n_list
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidArg(format!("bad n {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let modes: Vec<String> = args.modes.split(',').map(|m| m.trim().to_string()).collect();
    for m in &modes {
        if !matches!(m.as_str(), "exact" | "nystrom" | "falsa") {
            return Err(Error::InvalidArg(format!("unknown mode {m:?}")));
        }
    }
    let mut records = Vec::new();
    for mode in &modes {
        for &n in &ns {
            if mode == "exact" && n > args.exact_cap {
                records.push(skipped_record(mode, n, n, args.d, args.repeats));
                continue;
            }
            let rec = bench_attention_point(mode, n, args.landmarks, args.d, args.repeats, args.seed)?;
            println!(
                "bench: mode={mode} n={n} median_ms={:.3} peak_bytes={} flops={}",
                rec.median_ms.unwrap(),
                rec.peak_bytes.unwrap(),
                rec.flops
            );
            records.push(rec);
        }
    }
    let report = format_bench_report(&records);
    fs::write(&args.out, report).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    println!("report={}", args.out.display());
    Ok(())
}

fn cmd_approx_error(args: ApproxErrorArgs) -> Result<()> {
    if args.seeds == 0 || args.landmarks == 0 {
        return Err(Error::InvalidArg("seeds and landmarks must be positive".into()));
    }
    let records = run_approx_error(
        args.n,
        args.d,
        args.clusters,
        args.separation,
        args.landmarks,
        args.seeds,
        args.sigma,
    )?;
    for r in records.iter().filter(|r| r.seed.is_none()) {
        println!("approx-error: mode={} median_error={:.6e}", r.mode, r.error);
    }
    let report = format_approx_report(&records);
    fs::write(&args.out, report).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    println!("report={}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::BenchAttn(args) => cmd_bench_attn(args),
        Cmd::ApproxError(args) => cmd_approx_error(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
