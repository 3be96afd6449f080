//! `dac`: synthetic data, adaptation, embedding, evaluation and merging.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use serde::Serialize;

use dac_core::dataio::manifest::load_manifest;
use dac_core::dataio::synth::{gen_synthetic, SynthConfig};
use dac_core::dataio::{
    load_adapters, load_backbone, load_descriptors, save_adapters, save_descriptors, save_merged, Manifest,
};
use dac_core::encoder::DualEncoder;
use dac_core::fusion::{default_alpha, FusionConfig, FusionScheme};
use dac_core::numcore::Activation;
use dac_core::pipeline::{embed_dataset, evaluate_set, run_experiment, EmbedOptions};
use dac_core::retrieval::{EvalOptions, MetricsReport, OpenSetDataset};
use dac_core::training::{relative_error, train, LoraMode, TrainConfig, TrainSet};
use dac_core::{DacError, Result};

use config::ConfigFile;

pub const ADAPTERS_FILE: &str = "adapters.dacf";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const DESCRIPTORS_FILE: &str = "descriptors.dacf";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_QUERY_FILE: &str = "per_query.csv";
pub const MERGED_FILE: &str = "merged_backbone.dacf";
pub const PROBE_REPORT_FILE: &str = "probe_report.json";

/// Largest merged-vs-adapted deviation merge-lora accepts.
const MERGE_TOLERANCE: f64 = 1e-8;

#[derive(Parser, Debug)]
#[command(name = "dac", version, about = "Adapt frozen dual encoders for open-set multi-view retrieval")]
struct Cli {
    /// JSON file with `synth`, `train`, `fusion` or `eval` sections; its
    /// values override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic open-set dataset.
    GenSynth(GenSynthArgs),
    /// Train adapters on the train split of a manifest.
    Adapt(AdaptArgs),
    /// Embed and fuse the query and target splits.
    Embed(EmbedArgs),
    /// Evaluate descriptors, or run a cross-dataset transfer.
    Eval(EvalArgs),
    /// Fold adapters into the frozen weights and verify on probes.
    MergeLora(MergeArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long, env = "DAC_OUT_DIR")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seen: Option<usize>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    text_noise: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// ablora, plain_lora or frozen.
    #[arg(long)]
    lora_mode: Option<LoraMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Use `gamma = lora_alpha / rank`.
    #[arg(long, conflicts_with = "gamma")]
    lora_alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Re-normalize pooled descriptors before the loss.
    #[arg(long)]
    normalize_pooled: bool,
}

#[derive(Args, Debug, Clone)]
struct FusionFlags {
    /// Fusion weight; defaults to the tuned value for the dataset/backbone
    /// tags, else 0.4.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    fusion: Option<FusionScheme>,
    #[arg(long)]
    act: Option<Activation>,
    /// L2-normalize fused descriptors.
    #[arg(long)]
    post_norm: bool,
    /// Dataset tag for the tuned-alpha table (defaults to the manifest name).
    #[arg(long)]
    dataset_tag: Option<String>,
    /// Backbone tag for the tuned-alpha table, e.g. `L/14`.
    #[arg(long, default_value = "")]
    backbone_tag: String,
    /// Ignore descriptions; descriptors become `act(g)`.
    #[arg(long)]
    image_only: bool,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Backbone file; defaults to the one named in the manifest.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, env = "DAC_OUT_DIR")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Adapter file written by `adapt`.
    #[arg(long, conflicts_with = "zero_shot")]
    adapters: Option<PathBuf>,
    /// Embed with the frozen backbone.
    #[arg(long)]
    zero_shot: bool,
    /// Re-normalize pooled descriptors (match the training setting).
    #[arg(long)]
    normalize_pooled: bool,
    #[arg(long, env = "DAC_OUT_DIR")]
    out: PathBuf,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Descriptor file written by `embed`.
    #[arg(long, required_unless_present = "train_manifest", conflicts_with = "train_manifest")]
    descriptors: Option<PathBuf>,
    /// Validate this manifest's open-set split before evaluating.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Cross-dataset mode: adapt on this manifest ...
    #[arg(long, requires = "eval_manifest")]
    train_manifest: Option<PathBuf>,
    /// ... and evaluate on this one.
    #[arg(long, requires = "train_manifest")]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    ndcg_cutoff: Option<usize>,
    /// Write metrics.json and per_query.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    fusion: FusionFlags,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    adapters: PathBuf,
    #[arg(long, env = "DAC_OUT_DIR")]
    out: PathBuf,
    /// Number of probe inputs per tower.
    #[arg(long, default_value_t = 500)]
    probes: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Warn,
        (false, 1) => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a, &cfg),
        Command::Adapt(a) => cmd_adapt(a, &cfg),
        Command::Embed(a) => cmd_embed(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::MergeLora(a) => cmd_merge_lora(a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DacError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| DacError::io(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(DacError::usage(format!("{what} '{}' does not exist", path.display())))
    }
}

fn cmd_gen_synth(a: GenSynthArgs, cfg: &ConfigFile) -> Result<()> {
    let mut s = SynthConfig::default();
    set(&mut s.seed, a.seed);
    set(&mut s.seen, a.seen);
    set(&mut s.unseen, a.unseen);
    set(&mut s.items_per_class, a.items);
    set(&mut s.views, a.views);
    set(&mut s.dim, a.dim);
    set(&mut s.sigma, a.sigma);
    set(&mut s.shift, a.shift);
    set(&mut s.text_noise, a.text_noise);
    let s = cfg.apply("synth", s)?;
    let hashes = gen_synthetic(&s, &a.out)?;
    println!("wrote synthetic dataset (seed {}) to {}", s.seed, a.out.display());
    for (name, hash) in hashes {
        println!("{hash}  {name}");
    }
    Ok(())
}

fn train_config(f: &TrainFlags, cfg: &ConfigFile) -> Result<TrainConfig> {
    let mut t = TrainConfig::default();
    set(&mut t.lora_mode, f.lora_mode);
    set(&mut t.epochs, f.epochs);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.lr, f.lr);
    set(&mut t.rank, f.rank);
    set(&mut t.gamma, f.gamma);
    set(&mut t.dropout_p, f.dropout);
    set(&mut t.seed, f.seed);
    if let Some(alpha) = f.lora_alpha {
        t.gamma = t.adapter().with_lora_alpha(alpha).gamma;
    }
    t.normalize_pooled |= f.normalize_pooled;
    let t = cfg.apply("train", t)?;
    t.validate()?;
    Ok(t)
}

fn fusion_config(f: &FusionFlags, manifest_name: &str, cfg: &ConfigFile) -> Result<FusionConfig> {
    let tag = f.dataset_tag.as_deref().unwrap_or(manifest_name);
    let mut c = FusionConfig {
        alpha: f.alpha.unwrap_or_else(|| default_alpha(tag, &f.backbone_tag)),
        ..Default::default()
    };
    set(&mut c.scheme, f.fusion);
    set(&mut c.act, f.act);
    c.post_norm |= f.post_norm;
    let c = cfg.apply("fusion", c)?;
    c.validate()?;
    Ok(c)
}

fn load_with_backbone(manifest: &Path, backbone: Option<&Path>) -> Result<(Manifest, OpenSetDataset, DualEncoder)> {
    require_file(manifest, "manifest")?;
    let (m, ds) = load_manifest(manifest)?;
    let path = match backbone {
        Some(p) => p.to_path_buf(),
        None => m
            .backbone_path(manifest)
            .ok_or_else(|| DacError::usage("manifest names no backbone; pass --backbone"))?,
    };
    require_file(&path, "backbone")?;
    let bb = load_backbone(&path)?;
    if bb.visual.in_dim() != m.input_dim || bb.text.in_dim() != m.input_dim {
        return Err(DacError::data(format!(
            "backbone expects {}-dim inputs, manifest declares {}",
            bb.visual.in_dim(),
            m.input_dim
        )));
    }
    Ok((m, ds, bb))
}

fn cmd_adapt(a: AdaptArgs, cfg: &ConfigFile) -> Result<()> {
    let t = train_config(&a.train, cfg)?;
    let (_, ds, backbone) = load_with_backbone(&a.manifest, a.backbone.as_deref())?;
    println!(
        "adapt: lora_mode={} rank={} dropout={} lr={} epochs={} batch_size={} gamma={} temperature={} seed={}",
        t.lora_mode, t.rank, t.dropout_p, t.lr, t.epochs, t.batch_size, t.gamma, t.temperature, t.seed
    );
    let data = TrainSet::from_dataset(&ds)?;
    info!("{} training objects over {} classes", data.items.len(), data.class_names.len());
    let (model, report) = train(&backbone, &data, &t)?;
    ensure_dir(&a.out)?;
    save_adapters(a.out.join(ADAPTERS_FILE), &model, t.lora_mode)?;
    write_json(&a.out.join(TRAIN_REPORT_FILE), &report)?;
    if let (Some(first), Some(last)) = (report.epoch_loss.first(), report.epoch_loss.last()) {
        println!("loss {first:.6} -> {last:.6} over {} steps", report.steps);
    }
    println!("wrote {} and {}", ADAPTERS_FILE, TRAIN_REPORT_FILE);
    Ok(())
}

fn cmd_embed(a: EmbedArgs, cfg: &ConfigFile) -> Result<()> {
    if a.adapters.is_none() && !a.zero_shot {
        return Err(DacError::usage("pass --adapters FILE, or --zero-shot to embed without adapters"));
    }
    let (m, ds, backbone) = load_with_backbone(&a.manifest, a.backbone.as_deref())?;
    let model = match &a.adapters {
        Some(p) => {
            require_file(p, "adapter file")?;
            load_adapters(p, &backbone)?.0
        }
        None => backbone,
    };
    let fusion = fusion_config(&a.fusion, &m.name, cfg)?;
    let opts = EmbedOptions {
        fusion,
        normalize_pooled: a.normalize_pooled,
        image_only: a.fusion.image_only,
    };
    let set = embed_dataset(&model, &ds, &opts)?;
    ensure_dir(&a.out)?;
    save_descriptors(a.out.join(DESCRIPTORS_FILE), &set)?;
    println!(
        "embed: alpha={} fusion={} act={} post_norm={} -> {} query, {} target descriptors",
        fusion.alpha,
        fusion.scheme,
        fusion.act,
        fusion.post_norm,
        set.splits["query"].len(),
        set.splits["target"].len()
    );
    Ok(())
}

fn emit_report(report: &MetricsReport, out: Option<&Path>, json: bool) -> Result<()> {
    let report = report.rounded();
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("mAP / NDCG / ANMRR: {}", report.triple());
        println!("{report}");
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join(METRICS_FILE), &report)?;
        let csv = dir.join(PER_QUERY_FILE);
        fs::write(&csv, report.to_csv()).map_err(|e| DacError::io(&csv, e))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, cfg: &ConfigFile) -> Result<()> {
    let mut opts = EvalOptions::default();
    set(&mut opts.ndcg_cutoff, a.ndcg_cutoff.map(Some));
    let opts = cfg.apply("eval", opts)?;
    if let (Some(train_m), Some(eval_m)) = (&a.train_manifest, &a.eval_manifest) {
        let t = train_config(&a.train, cfg)?;
        let (_, train_ds, backbone) = load_with_backbone(train_m, None)?;
        require_file(eval_m, "manifest")?;
        let (em, eval_ds) = load_manifest(eval_m)?;
        let fusion = fusion_config(&a.fusion, &em.name, cfg)?;
        let embed = EmbedOptions {
            fusion,
            normalize_pooled: t.normalize_pooled,
            image_only: a.fusion.image_only,
        };
        println!("eval: adapt on '{}', evaluate on '{}'", train_ds.name, eval_ds.name);
        let res = run_experiment(&backbone, &train_ds, &eval_ds, &t, &embed, &opts)?;
        return emit_report(&res.metrics, a.out.as_deref(), a.json);
    }
    if let Some(m) = &a.manifest {
        require_file(m, "manifest")?;
        load_manifest(m)?;
    }
    let path = a.descriptors.as_deref().ok_or_else(|| DacError::usage("--descriptors is required"))?;
    require_file(path, "descriptor file")?;
    let set = load_descriptors(path)?;
    let report = evaluate_set(&set, &opts)?;
    emit_report(&report, a.out.as_deref(), a.json)
}

#[derive(Debug, Serialize)]
struct ProbeReport {
    probes: usize,
    visual_max_rel_deviation: f64,
    text_max_rel_deviation: f64,
    tolerance: f64,
}

fn probe_deviation(adapted: &dac_core::encoder::EncoderTower, merged: &dac_core::encoder::EncoderTower, probes: &[Vec<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in probes {
        let (a, m) = (adapted.embed(x)?, merged.embed(x)?);
        worst = worst.max(relative_error(&a, &m));
    }
    Ok(worst)
}

fn cmd_merge_lora(a: MergeArgs) -> Result<()> {
    require_file(&a.adapters, "adapter file")?;
    let (_, ds, backbone) = load_with_backbone(&a.manifest, a.backbone.as_deref())?;
    let (model, mode) = load_adapters(&a.adapters, &backbone)?;
    let merged = model.merged();
    let views: Vec<Vec<f64>> = ds
        .objects()
        .flat_map(|o| o.views.views().map(<[f64]>::to_vec).collect::<Vec<_>>())
        .take(a.probes)
        .collect();
    let texts: Vec<Vec<f64>> = ds
        .objects()
        .filter_map(|o| o.description.clone())
        .chain(ds.class_descriptions.values().cloned())
        .take(a.probes)
        .collect();
    let report = ProbeReport {
        probes: views.len() + texts.len(),
        visual_max_rel_deviation: probe_deviation(&model.visual, &merged.visual, &views)?,
        text_max_rel_deviation: probe_deviation(&model.text, &merged.text, &texts)?,
        tolerance: MERGE_TOLERANCE,
    };
    ensure_dir(&a.out)?;
    write_json(&a.out.join(PROBE_REPORT_FILE), &report)?;
    println!(
        "merge-lora ({mode}): {} probes, max relative deviation visual {:.3e}, text {:.3e}",
        report.probes, report.visual_max_rel_deviation, report.text_max_rel_deviation
    );
    let worst = report.visual_max_rel_deviation.max(report.text_max_rel_deviation);
    if !(worst <= MERGE_TOLERANCE) {
        return Err(DacError::data(format!(
            "merged towers deviate by {worst:.3e} > {MERGE_TOLERANCE:e}; merged file not written"
        )));
    }
    save_merged(a.out.join(MERGED_FILE), &model)?;
    println!("wrote {MERGED_FILE}");
    Ok(())
}
