//! Command-line interface: task dumping, meta-training, single-episode
//! adaptation, and the stepsize-robustness sweep/report pipeline.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use restep::bench::{self, DomainSpec, PresetConfig, StepsizeGrid, SweepConfig};
use restep::checkpoint::{
    load_checkpoint, save_checkpoint, save_episodes, CheckpointMeta, Dtype,
};
use restep::metatrain::{maml_train, select_checkpoint, MetaTrainConfig, SelectPolicy};
use restep_core::rng::{derive_seed, Purpose};
use restep_core::{
    adapt, sample_episode, shifted_domain, AdaptConfig, DomainParams, ModelSpec, OptimizerKind,
    Preset,
};

#[derive(Parser)]
#[command(
    name = "restep",
    version,
    about = "Repurpose pretrained few-shot checkpoints at test time and benchmark stepsize robustness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump synthetic episode sets in the checkpoint blob format.
    MakeTasks(MakeTasksArgs),
    /// Meta-train a desk-scale checkpoint on the base toy domain.
    Metatrain(MetatrainArgs),
    /// Adapt a checkpoint to one episode and report query accuracy.
    Adapt(AdaptArgs),
    /// Run the stepsize sweep and write the raw accuracy table.
    Sweep(SweepArgs),
    /// Reduce a raw table to All / Top-1 / Top-40% and emit reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct EpisodeShape {
    /// Ways (classes) per episode.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Shots (support examples) per class.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Query examples per class.
    #[arg(long, default_value_t = 15)]
    q: usize,
}

#[derive(Args)]
struct MakeTasksArgs {
    #[arg(long)]
    out: PathBuf,
    /// Episodes to dump.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[command(flatten)]
    shape: EpisodeShape,
    /// Domain shift in [0, 1] applied to the base domain.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Blob dtype (f64 keeps the dump bit-exact).
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    dtype: Dtype,
}

#[derive(Args)]
struct MetatrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Architecture:`conv` (two BN conv blocks) or `mlp`.
    #[arg(long, default_value = "conv")]
    arch: String,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 0.1)]
    inner_stepsize: f64,
    #[arg(long, default_value_t = 5)]
    inner_steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    outer_stepsize: f64,
    #[arg(long, default_value_t = 4)]
    meta_batch: usize,
    #[command(flatten)]
    shape: EpisodeShape,
    #[arg(long, default_value_t = 40)]
    val_episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint selection policy copied into `<out>/selected`.
    #[arg(long, default_value = "best_validation", value_parser = parse_policy)]
    select: SelectPolicy,
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    dtype: Dtype,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON output file for the full adaptation result.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method preset; individual flags below override its selections.
    #[arg(long, default_value = "sgd")]
    preset: String,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long)]
    lambda_alpha: Option<u8>,
    #[arg(long)]
    lambda_at: Option<u8>,
    #[arg(long)]
    lambda_aug: Option<u8>,
    #[arg(long)]
    enaug: Option<u8>,
    #[arg(long)]
    ufgsm: Option<u8>,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Ensemble size.
    #[arg(long, default_value_t = 5)]
    members: usize,
    /// Gradient steps per phase.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value = "sgd", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long)]
    freeze_bn: bool,
    #[arg(long)]
    inverse_usa: bool,
    #[arg(long)]
    inverse_ufgsm: bool,
    #[arg(long)]
    clip_inputs: bool,
    /// Seed of the ensemble perturbation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the evaluation episode.
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    /// Domain shift of the evaluation episode.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[command(flatten)]
    shape: EpisodeShape,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    grid_points: usize,
    #[arg(long, default_value_t = 1e-4)]
    grid_min: f64,
    #[arg(long, default_value_t = 1.0)]
    grid_max: f64,
    /// Episodes per (domain, seed), shared across stepsizes and presets.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Comma-separated seed list.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Comma-separated `name:shift` pairs.
    #[arg(long, default_value = "base:0,shift1:1")]
    domains: String,
    /// Comma-separated preset names (including `sgd_i_usa`, `sgd_usa_i_ufgsm`).
    #[arg(long, default_value = "sgd,sgd_all")]
    presets: String,
    #[arg(long, default_value = "sgd", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long)]
    freeze_bn: bool,
    #[command(flatten)]
    shape: EpisodeShape,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    members: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    clip_inputs: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Raw table: a sweep output directory or a raw.csv path.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of csv,json,svg.
    #[arg(long, default_value = "csv,json,svg")]
    formats: String,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    Dtype::parse(s).ok_or_else(|| format!("unknown dtype {s:?}, expected f32 or f64"))
}

fn parse_policy(s: &str) -> Result<SelectPolicy, String> {
    SelectPolicy::parse(s)
        .ok_or_else(|| format!("unknown policy {s:?}, expected best_validation or last"))
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(format!("unknown optimizer {other:?}, expected sgd or adam")),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::MakeTasks(args) => make_tasks(args),
        Command::Metatrain(args) => metatrain(args),
        Command::Adapt(args) => run_adapt(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Report(args) => run_report(args),
    }
}

fn make_tasks(args: MakeTasksArgs) -> Result<()> {
    if args.episodes == 0 {
        bail!("need at least one episode");
    }
    if !(0.0..=1.0).contains(&args.shift) {
        bail!("shift must be in [0, 1], got {}", args.shift);
    }
    let domain = shifted_domain(&DomainParams::base(), args.shift);
    let episodes: Vec<_> = (0..args.episodes)
        .map(|i| {
            let episode_seed = derive_seed(args.seed, Purpose::BenchTask, &[i as u64]);
            sample_episode(&domain, args.shape.n, args.shape.k, args.shape.q, episode_seed)
        })
        .collect();
    let meta = CheckpointMeta {
        dtype: args.dtype,
        provenance: format!(
            "episodes n={} k={} q={} shift={}",
            args.shape.n, args.shape.k, args.shape.q, args.shift
        ),
        seed: args.seed,
    };
    save_episodes(&args.out, &episodes, &meta)
        .with_context(|| format!("writing episode dump to {}", args.out.display()))?;
    println!("wrote {} episodes to {}", episodes.len(), args.out.display());
    Ok(())
}

fn metatrain(args: MetatrainArgs) -> Result<()> {
    let cfg = MetaTrainConfig {
        inner_stepsize: args.inner_stepsize,
        inner_steps: args.inner_steps,
        outer_stepsize: args.outer_stepsize,
        meta_batch: args.meta_batch,
        iterations: args.iterations,
        eval_every: args.eval_every,
        n_way: args.shape.n,
        k_shot: args.shape.k,
        q_per_class: args.shape.q,
        val_episodes: args.val_episodes,
        seed: args.seed,
    };
    let spec = match args.arch.as_str() {
        "conv" => ModelSpec::conv_default(cfg.n_way),
        "mlp" => ModelSpec::mlp_default(cfg.n_way),
        other => bail!("unknown architecture {other:?}, expected conv or mlp"),
    };
    let domain = DomainParams::base();
    let history = maml_train(&spec, &domain, &cfg)?;

    fs::create_dir_all(&args.out)?;
    let mut csv = String::from("iteration,train_acc,val_acc\n");
    for record in &history.records {
        let dir = args.out.join(format!("iter_{:06}", record.iteration));
        let meta = CheckpointMeta {
            dtype: args.dtype,
            provenance: format!(
                "metatrain arch={} iteration={} val_acc={:.4}",
                args.arch, record.iteration, record.val_accuracy
            ),
            seed: args.seed,
        };
        save_checkpoint(&dir, &spec, &record.params, &meta)?;
        // Train accuracy averaged over the window ending at this record.
        let window_acc = if record.iteration == 0 {
            String::new()
        } else {
            let end = record.iteration.min(history.train_accuracy.len());
            let start = end.saturating_sub(cfg.eval_every);
            let w = &history.train_accuracy[start..end];
            format!("{}", w.iter().sum::<f64>() / w.len() as f64)
        };
        csv.push_str(&format!("{},{},{}\n", record.iteration, window_acc, record.val_accuracy));
        println!(
            "iteration {:>6}: val_acc {:.4}{}",
            record.iteration,
            record.val_accuracy,
            if window_acc.is_empty() { String::new() } else { format!("  train_acc {window_acc}") }
        );
    }
    fs::write(args.out.join("history.csv"), csv)?;

    let selected = select_checkpoint(&history.records, args.select)
        .ok_or_else(|| anyhow!("empty training history"))?;
    let meta = CheckpointMeta {
        dtype: args.dtype,
        provenance: format!(
            "metatrain arch={} policy={} iteration={} val_acc={:.4}",
            args.arch,
            args.select.name(),
            selected.iteration,
            selected.val_accuracy
        ),
        seed: args.seed,
    };
    save_checkpoint(&args.out.join("selected"), &spec, &selected.params, &meta)?;
    println!(
        "selected ({}) iteration {} with val_acc {:.4} -> {}",
        args.select.name(),
        selected.iteration,
        selected.val_accuracy,
        args.out.join("selected").display()
    );
    Ok(())
}

fn run_adapt(args: AdaptArgs) -> Result<()> {
    let (spec, params) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let preset = Preset::parse(&args.preset)
        .ok_or_else(|| anyhow!("unknown preset {:?}", args.preset))?;
    let mut cfg = AdaptConfig::preset(preset, args.alpha, args.seed);
    cfg.sigma = args.sigma;
    cfg.epsilon = args.epsilon;
    cfg.ensemble_size = args.members;
    cfg.steps = args.steps;
    cfg.optimizer = args.optimizer;
    cfg.freeze_bn = args.freeze_bn;
    cfg.inverse_usa = args.inverse_usa;
    cfg.inverse_ufgsm = args.inverse_ufgsm;
    cfg.clip_inputs = args.clip_inputs;
    if let Some(v) = args.lambda_alpha {
        cfg.use_adapted_stepsize = v == 0;
    }
    if let Some(v) = args.lambda_at {
        cfg.use_at_loss = v != 0;
    }
    if let Some(v) = args.lambda_aug {
        cfg.use_aug_loss = v != 0;
    }
    if let Some(v) = args.enaug {
        cfg.collect_enaug = v != 0;
    }
    if let Some(v) = args.ufgsm {
        cfg.collect_ufgsm = v != 0;
    }

    let domain = shifted_domain(&DomainParams::base(), args.shift);
    let episode =
        sample_episode(&domain, args.shape.n, args.shape.k, args.shape.q, args.episode_seed);
    let result = adapt(&spec, &params, &episode, &cfg)?;
    println!(
        "query accuracy {:.4} ({} aug examples, {})",
        result.query_accuracy,
        result.aug_counts.ensemble + result.aug_counts.uncertainty,
        restep_core::adapt::lambda_summary(&cfg),
    );
    if let Some(out) = args.out {
        let json = serde_json::to_string_pretty(&result)?;
        fs::write(&out, json)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    checkpoint: String,
    config: &'a SweepConfig,
}

fn parse_sweep_config(args: &SweepArgs) -> Result<SweepConfig> {
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("bad seed {s:?}: {e}")))
        .collect::<Result<_>>()?;
    let domains: Vec<DomainSpec> = args
        .domains
        .split(',')
        .map(|d| {
            let (name, shift) =
                d.split_once(':').ok_or_else(|| anyhow!("domain {d:?} is not name:shift"))?;
            Ok(DomainSpec {
                name: name.trim().to_string(),
                shift: shift.trim().parse().map_err(|e| anyhow!("bad shift in {d:?}: {e}"))?,
            })
        })
        .collect::<Result<_>>()?;
    let presets: Vec<PresetConfig> = args
        .presets
        .split(',')
        .map(|p| {
            PresetConfig::parse(p.trim(), args.optimizer, args.freeze_bn)
                .ok_or_else(|| anyhow!("unknown preset {p:?}"))
        })
        .collect::<Result<_>>()?;
    Ok(SweepConfig {
        grid: StepsizeGrid { min: args.grid_min, max: args.grid_max, points: args.grid_points },
        episodes: args.episodes,
        base_domain: DomainParams::base(),
        domains,
        presets,
        seeds,
        n_way: args.shape.n,
        k_shot: args.shape.k,
        q_per_class: args.shape.q,
        sigma: args.sigma,
        epsilon: args.epsilon,
        ensemble_size: args.members,
        steps: args.steps,
        clip_inputs: args.clip_inputs,
    })
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = parse_sweep_config(&args)?;
    let (spec, params) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    fs::create_dir_all(&args.out)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        checkpoint: args.checkpoint.display().to_string(),
        config: &cfg,
    };
    fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let table = bench::sweep(&spec, &params, &cfg)?;
    bench::write_raw_csv(&table, &args.out.join("raw.csv"))?;
    println!(
        "swept {} presets x {} domains x {} stepsizes x {} seeds -> {}",
        cfg.presets.len(),
        cfg.domains.len(),
        cfg.grid.points,
        cfg.seeds.len(),
        args.out.join("raw.csv").display()
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let raw_path = if args.raw.is_dir() { args.raw.join("raw.csv") } else { args.raw.clone() };
    let table = bench::read_raw_csv(&raw_path)
        .with_context(|| format!("reading raw table {}", raw_path.display()))?;
    let report = bench::metrics(&table);
    fs::create_dir_all(&args.out)?;

    for entry in &report.entries {
        println!(
            "{:<20} {:<8}  All {:6.2} (+/-{:.2})  Top-1 {:6.2} (+/-{:.2})  Top-40% {:6.2} (+/-{:.2})",
            entry.preset,
            entry.domain,
            entry.all.mean,
            entry.all.std,
            entry.top1.mean,
            entry.top1.std,
            entry.top40.mean,
            entry.top40.std,
        );
    }

    for format in args.formats.split(',') {
        match format.trim() {
            "csv" => {
                let path = args.out.join("report.csv");
                bench::write_report_csv(&report, &path)?;
                println!("wrote {}", path.display());
            }
            "json" => {
                let path = args.out.join("report.json");
                bench::write_report_json(&report, &path)?;
                println!("wrote {}", path.display());
            }
            "svg" => {
                for path in bench::write_report_svgs(&report, &args.out)? {
                    println!("wrote {}", path.display());
                }
            }
            other => bail!("unknown format {other:?}, expected csv, json, or svg"),
        }
    }
    Ok(())
}
