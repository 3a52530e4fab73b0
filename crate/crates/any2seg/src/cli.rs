//! Command-line entry point: `gen-data`, `train`, `eval`, and `gradcheck`
//! subcommands over the library, plus a flat `key = value` configuration
//! file with flag overrides (flags win).
//!
//! Exit codes: 0 success, 1 check failure (gradcheck), 2 runtime error,
//! 64 usage or configuration error. The `A2S_SEED` environment variable
//! supplies the seed when neither a flag nor the config file does.
//!
//! Every command writes deterministic output for identical flags and
//! inputs; nothing timestamps its artifacts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{eval_miss_sensor, eval_miss_system, eval_mss, eval_subset, EvalReport};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::lscd::{
    inter_modal_corr_student, loss_cr, loss_kd, loss_se, map_pool, KlOrder, TeacherEmbeddings,
    UpsampleMode,
};
use crate::mff::{fuse, parse_subset, AggregateMode, FuseConfig, Modality, ModalityBundle};
use crate::segnet::{ModelDims, ModelParams};
use crate::synthdata::{generate_dataset, Condition, Dataset, Manifest};
use crate::tensor::{grad_check_detailed, Tape, Tensor};
use crate::trainer::{train_loop, write_curve_csv, TrainConfig};

/// Relative-error threshold the gradient suite must meet.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Resolved run settings: training hyperparameters, artifact paths, the
/// teacher source, and process-level knobs. Every field has a default;
/// unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed (model init, shuffling, dropout draws).
    pub seed: u64,
    /// Dataset directory; empty means "not set".
    pub dataset: String,
    /// Directory for checkpoints, curves, and resolved configs.
    pub out_dir: String,
    /// Checkpoint path. `train` records it so a resolved config can be
    /// replayed; `eval` reads it.
    pub checkpoint: String,
    /// Worker-thread cap for generation/evaluation; 0 = automatic.
    pub threads: usize,
    /// 0 silences summary lines; JSON/report output is never suppressed.
    pub verbosity: u32,
    /// Teacher embedding file; empty means synthesize.
    pub teacher: String,
    pub teacher_seed: u64,
    pub teacher_gamma: f64,
    pub teacher_dim: usize,
    /// Encoder channel width (patch size is fixed by the model family).
    pub width: usize,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub poly_power: f64,
    pub tau: f64,
    pub tau_w: f64,
    pub weight_sup: f64,
    pub weight_cr: f64,
    pub weight_se: f64,
    pub weight_base: f64,
    /// "mean" or "sum".
    pub aggregate: String,
    /// "teacher_target" or "literal".
    pub kl_order: String,
    pub fuse_steps: usize,
    pub enable_base_loss: bool,
    pub modality_dropout_prob: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            dataset: String::new(),
            out_dir: "out".to_string(),
            checkpoint: String::new(),
            threads: 0,
            verbosity: 1,
            teacher: String::new(),
            teacher_seed: 0,
            teacher_gamma: 0.8,
            teacher_dim: 16,
            width: ModelDims::default().width,
            base_lr: t.base_lr,
            total_steps: t.total_steps,
            warmup_steps: t.warmup_steps,
            poly_power: t.poly_power,
            tau: t.tau,
            tau_w: t.tau_w,
            weight_sup: t.weight_sup,
            weight_cr: t.weight_cr,
            weight_se: t.weight_se,
            weight_base: t.weight_base,
            aggregate: t.aggregate.name().to_string(),
            kl_order: t.kl_order.name().to_string(),
            fuse_steps: t.fuse_steps,
            enable_base_loss: t.enable_base_loss,
            modality_dropout_prob: t.modality_dropout_prob,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            base_lr: self.base_lr,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            poly_power: self.poly_power,
            tau: self.tau,
            tau_w: self.tau_w,
            weight_sup: self.weight_sup,
            weight_cr: self.weight_cr,
            weight_se: self.weight_se,
            weight_base: self.weight_base,
            aggregate: AggregateMode::parse(&self.aggregate)?,
            kl_order: KlOrder::parse(&self.kl_order)?,
            fuse_steps: self.fuse_steps,
            enable_base_loss: self.enable_base_loss,
            modality_dropout_prob: self.modality_dropout_prob,
            seed: self.seed,
        })
    }

    pub fn fuse_config(&self) -> Result<FuseConfig> {
        Ok(FuseConfig {
            steps: self.fuse_steps,
            tau_w: self.tau_w,
            aggregate: AggregateMode::parse(&self.aggregate)?,
            ..FuseConfig::default()
        })
    }
}

/// Parses either flat `key = value` lines (blank lines and `#` comments
/// allowed) or, when the text opens with `{`, a JSON object — so the
/// emitted `config.resolved.json` feeds straight back in. Values on
/// `key = value` lines are read as JSON scalars where possible, bare
/// strings otherwise.
pub fn parse_config_text(text: &str) -> Result<Map<String, Value>> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config is not valid JSON: {}", e)))?;
        return match v {
            Value::Object(m) => Ok(m),
            _ => Err(Error::config("config JSON must be an object")),
        };
    }
    let mut map = Map::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected `key = value`", idx + 1))
        })?;
        let key = k.trim().to_string();
        let raw_value = v.trim();
        let value = serde_json::from_str::<Value>(raw_value)
            .unwrap_or_else(|_| Value::String(raw_value.to_string()));
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!("config line {}: duplicate key {:?}", idx + 1, key)));
        }
    }
    Ok(map)
}

/// Layered resolution: defaults, then the `A2S_SEED` fallback, then the
/// config file, then flag overrides.
pub fn resolve_config(
    file: Option<&Path>,
    env_seed: Option<&str>,
    overrides: Map<String, Value>,
) -> Result<RunConfig> {
    let mut merged = match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().map_err(|_| {
            Error::config(format!("A2S_SEED must be an unsigned integer, got {:?}", s))
        })?;
        merged.insert("seed".to_string(), seed.into());
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {}", path.display(), e)))?;
        for (k, v) in parse_config_text(&text)? {
            merged.insert(k, v);
        }
    }
    for (k, v) in overrides {
        merged.insert(k, v);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::config(format!("invalid configuration: {}", e)))
}

/// `--loss sup,cr,se,base` → the four weights plus the base-loss switch.
/// Listed terms keep weight 1, omitted terms get 0.
fn parse_loss_list(s: &str) -> Result<(f64, f64, f64, f64, bool)> {
    let mut seen = BTreeSet::new();
    for token in s.split(',') {
        let t = token.trim();
        match t {
            "sup" | "cr" | "se" | "base" => {
                seen.insert(t.to_string());
            }
            "" => {}
            other => {
                return Err(Error::usage(format!(
                    "unknown loss term {:?} (expected sup, cr, se, base)",
                    other
                )))
            }
        }
    }
    if seen.is_empty() {
        return Err(Error::usage("--loss needs at least one of sup, cr, se, base"));
    }
    let on = |k: &str| if seen.contains(k) { 1.0 } else { 0.0 };
    Ok((on("sup"), on("cr"), on("se"), on("base"), seen.contains("base")))
}

#[derive(Parser, Debug)]
#[command(
    name = "any2seg",
    version,
    about = "Synthetic multi-modal segmentation: data generation, fusion/distillation training, MISS evaluation, gradient verification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic multi-modal dataset (RGB, depth, event, LiDAR).
    #[command(name = "gen-data")]
    GenData(GenArgs),
    /// Train the fusion model with distillation losses on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the MSS or MISS protocols.
    Eval(EvalArgs),
    /// Verify tape gradients of every loss and the fusion pipeline
    /// against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples.
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Validation samples.
    #[arg(long = "val-count", default_value_t = 64)]
    val_count: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Square raster size (height = width); must be divisible by the patch.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Shapes placed per scene.
    #[arg(long, default_value_t = 5)]
    shapes: usize,
    /// Allow scenes that miss some foreground classes.
    #[arg(long = "no-require-all")]
    no_require_all: bool,
    /// Conditions to record in the manifest, comma separated `kind[:severity]`.
    #[arg(long)]
    conditions: Option<String>,
    /// Replace an existing non-empty directory.
    #[arg(long)]
    force: bool,
    /// Worker-thread cap (0 = automatic).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file: flat `key = value` lines or a resolved-config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for checkpoint.a2sg, curve.csv, config.resolved.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long = "base-lr")]
    base_lr: Option<f64>,
    /// Loss terms to enable, e.g. `sup` or `sup,cr,se`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "tau-w")]
    tau_w: Option<f64>,
    /// Teacher coherence γ for the synthesized teacher.
    #[arg(long)]
    gamma: Option<f64>,
    /// Teacher embedding file; synthesized when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long = "teacher-seed")]
    teacher_seed: Option<u64>,
    /// Per-step modality dropout probability for D, E, L.
    #[arg(long)]
    dropout: Option<f64>,
    /// Encoder channel width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress the summary line.
    #[arg(long, short = 'q')]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Protocol: mss, miss (system-level), or sensor.
    #[arg(long, default_value = "mss")]
    mode: String,
    /// Restrict availability to one subset, e.g. `R,D` or `RD`; runs a
    /// single-subset evaluation instead of `--mode`.
    #[arg(long)]
    modalities: Option<String>,
    /// Conditions for sensor mode, comma separated `kind[:severity]`;
    /// defaults to the dataset manifest's list.
    #[arg(long)]
    conditions: Option<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a CSV mirror of the table.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Central-difference step. The default balances truncation against
    /// roundoff: smaller steps let float noise dominate coordinates whose
    /// true gradient is near the relative-error floor.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

fn env_seed_var() -> Option<String> {
    std::env::var("A2S_SEED").ok()
}

/// Entry point for the binary: parses `std::env::args`, runs, returns the
/// process exit code.
pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    run_from(args, env_seed_var().as_deref())
}

/// Testable entry point; `env_seed` stands in for `A2S_SEED`.
pub fn run_from(argv: Vec<String>, env_seed: Option<&str>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{}", e);
                    0
                }
                _ => {
                    eprint!("{}", e);
                    64
                }
            };
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => cmd_gen(&a, env_seed),
        Cmd::Train(a) => cmd_train(&a, env_seed),
        Cmd::Eval(a) => cmd_eval(&a, env_seed),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a, env_seed),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Usage(_) | Error::Config(_) => 64,
                _ => 2,
            }
        }
    }
}

fn resolve_seed(flag: Option<u64>, env_seed: Option<&str>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_seed {
        Some(s) => s.trim().parse().map_err(|_| {
            Error::config(format!("A2S_SEED must be an unsigned integer, got {:?}", s))
        }),
        None => Ok(0),
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

fn cmd_gen(args: &GenArgs, env_seed: Option<&str>) -> Result<i32> {
    let patch = ModelDims::default().patch;
    if args.size == 0 || args.size % patch != 0 {
        return Err(Error::usage(format!(
            "--size {} is not divisible by the {}-pixel patch",
            args.size, patch
        )));
    }
    let seed = resolve_seed(args.seed, env_seed)?;
    let conditions = match &args.conditions {
        Some(s) => parse_condition_list(s)?,
        None => Manifest::default().conditions,
    };
    if args.out.exists() && dir_is_nonempty(&args.out) {
        if !args.force {
            return Err(Error::usage(format!(
                "{} already exists and is not empty (use --force to replace it)",
                args.out.display()
            )));
        }
        std::fs::remove_dir_all(&args.out)?;
    }
    if let Some(t) = args.threads {
        crate::par::set_worker_cap(t);
    }
    let manifest = Manifest {
        seed,
        num_classes: args.classes,
        height: args.size,
        width: args.size,
        train_count: args.count,
        val_count: args.val_count,
        n_shapes: args.shapes,
        require_all_classes: !args.no_require_all,
        conditions,
    };
    // Every input here came from a flag, so invalid combinations are
    // usage errors rather than runtime failures.
    generate_dataset(&args.out, &manifest).map_err(|e| match e {
        Error::Domain(m) | Error::Gen(m) => Error::usage(m),
        other => other,
    })?;
    println!(
        "wrote {} train + {} val samples ({} classes, {}x{}, seed {}) to {}",
        manifest.train_count,
        manifest.val_count,
        manifest.num_classes,
        manifest.height,
        manifest.width,
        manifest.seed,
        args.out.display()
    );
    Ok(0)
}

fn parse_condition_list(s: &str) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for token in s.split(',') {
        let t = token.trim();
        if t.is_empty() {
            continue;
        }
        out.push(Condition::parse(t).map_err(|e| Error::usage(format!("--conditions: {}", e)))?);
    }
    if out.is_empty() {
        return Err(Error::usage("--conditions lists no conditions"));
    }
    Ok(out)
}

fn train_overrides(args: &TrainArgs) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    if let Some(v) = &args.dataset {
        m.insert("dataset".into(), v.display().to_string().into());
    }
    if let Some(v) = &args.out {
        m.insert("out_dir".into(), v.display().to_string().into());
    }
    if let Some(v) = args.seed {
        m.insert("seed".into(), v.into());
    }
    if let Some(v) = args.steps {
        m.insert("total_steps".into(), (v as u64).into());
    }
    if let Some(v) = args.warmup {
        m.insert("warmup_steps".into(), (v as u64).into());
    }
    if let Some(v) = args.base_lr {
        m.insert("base_lr".into(), v.into());
    }
    if let Some(s) = &args.loss {
        let (sup, cr, se, base, enable) = parse_loss_list(s)?;
        m.insert("weight_sup".into(), sup.into());
        m.insert("weight_cr".into(), cr.into());
        m.insert("weight_se".into(), se.into());
        m.insert("weight_base".into(), base.into());
        m.insert("enable_base_loss".into(), enable.into());
    }
    if let Some(v) = args.tau {
        m.insert("tau".into(), v.into());
    }
    if let Some(v) = args.tau_w {
        m.insert("tau_w".into(), v.into());
    }
    if let Some(v) = args.gamma {
        m.insert("teacher_gamma".into(), v.into());
    }
    if let Some(v) = &args.teacher {
        m.insert("teacher".into(), v.display().to_string().into());
    }
    if let Some(v) = args.teacher_seed {
        m.insert("teacher_seed".into(), v.into());
    }
    if let Some(v) = args.dropout {
        m.insert("modality_dropout_prob".into(), v.into());
    }
    if let Some(v) = args.width {
        m.insert("width".into(), (v as u64).into());
    }
    if let Some(v) = args.threads {
        m.insert("threads".into(), (v as u64).into());
    }
    if args.quiet {
        m.insert("verbosity".into(), 0u32.into());
    }
    Ok(m)
}

fn cmd_train(args: &TrainArgs, env_seed: Option<&str>) -> Result<i32> {
    let overrides = train_overrides(args)?;
    let mut cfg = resolve_config(args.config.as_deref(), env_seed, overrides)?;
    if cfg.dataset.is_empty() {
        return Err(Error::usage(
            "a dataset directory is required (--dataset or `dataset = ...` in the config)",
        ));
    }
    crate::par::set_worker_cap(cfg.threads);
    let dataset = Dataset::open(Path::new(&cfg.dataset))?;
    let teacher = if cfg.teacher.is_empty() {
        TeacherEmbeddings::synthesize(
            cfg.teacher_seed,
            dataset.manifest.num_classes,
            cfg.teacher_dim,
            cfg.teacher_gamma,
        )?
    } else {
        TeacherEmbeddings::load(Path::new(&cfg.teacher))?
    };
    let dims = ModelDims {
        patch: ModelDims::default().patch,
        width: cfg.width,
        classes: dataset.manifest.num_classes,
    };
    let train_cfg = cfg.train_config()?;
    // Bad hyperparameter combinations are configuration mistakes, not
    // runtime failures.
    train_cfg.validate().map_err(|e| match e {
        Error::Domain(m) => Error::config(m),
        other => other,
    })?;
    let outcome = train_loop(&dataset, &teacher, &dims, &train_cfg)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.a2sg");
    outcome.params.save(&ckpt_path)?;
    write_curve_csv(&out_dir.join("curve.csv"), &outcome.curve)?;
    cfg.checkpoint = ckpt_path.display().to_string();
    let resolved = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::config(format!("cannot serialize resolved config: {}", e)))?;
    std::fs::write(out_dir.join("config.resolved.json"), resolved + "\n")?;

    if cfg.verbosity > 0 {
        match outcome.curve.last() {
            Some(row) => println!(
                "trained {} steps (final L_total {:.6}); checkpoint at {}",
                outcome.curve.len(),
                row.losses.l_total,
                ckpt_path.display()
            ),
            None => println!(
                "trained 0 steps (checkpoint holds the initialization); checkpoint at {}",
                ckpt_path.display()
            ),
        }
    }
    Ok(0)
}

fn cmd_eval(args: &EvalArgs, env_seed: Option<&str>) -> Result<i32> {
    let mut overrides = Map::new();
    if let Some(v) = &args.checkpoint {
        overrides.insert("checkpoint".into(), v.display().to_string().into());
    }
    if let Some(v) = &args.dataset {
        overrides.insert("dataset".into(), v.display().to_string().into());
    }
    if let Some(v) = args.threads {
        overrides.insert("threads".into(), (v as u64).into());
    }
    let cfg = resolve_config(args.config.as_deref(), env_seed, overrides)?;
    if cfg.checkpoint.is_empty() {
        return Err(Error::usage("--checkpoint is required (or `checkpoint = ...` in the config)"));
    }
    if cfg.dataset.is_empty() {
        return Err(Error::usage("--dataset is required (or `dataset = ...` in the config)"));
    }
    let ckpt = Path::new(&cfg.checkpoint);
    if !ckpt.exists() {
        return Err(Error::usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    crate::par::set_worker_cap(cfg.threads);
    let params = ModelParams::load(ckpt)?;
    let dataset = Dataset::open(Path::new(&cfg.dataset))?;
    let fuse_cfg = cfg.fuse_config()?;

    let report: EvalReport = if let Some(subset_str) = &args.modalities {
        if args.mode != "mss" {
            return Err(Error::usage(
                "--modalities runs a single-subset evaluation; drop --mode or use --mode mss",
            ));
        }
        let subset =
            parse_subset(subset_str).map_err(|e| Error::usage(format!("--modalities: {}", e)))?;
        eval_subset(&params, &dataset, &subset, &fuse_cfg)?
    } else {
        match args.mode.as_str() {
            "mss" => eval_mss(&params, &dataset, &fuse_cfg)?,
            "miss" => eval_miss_system(&params, &dataset, &fuse_cfg)?,
            "sensor" => {
                let conditions = match &args.conditions {
                    Some(s) => parse_condition_list(s)?,
                    None => dataset.manifest.conditions.clone(),
                };
                eval_miss_sensor(&params, &dataset, &conditions, &fuse_cfg)?
            }
            other => {
                return Err(Error::usage(format!(
                    "--mode must be mss, miss, or sensor, got {:?}",
                    other
                )))
            }
        }
    };

    let json = report.to_json_string()?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            if cfg.verbosity > 0 {
                println!("wrote report to {}", path.display());
            }
        }
        None => println!("{}", json),
    }
    if let Some(path) = &args.csv {
        report.write_csv(path)?;
    }
    Ok(0)
}

// --- gradcheck -----------------------------------------------------------

const GC_CHANNELS: usize = 8;
const GC_SIDE: usize = 4;
const GC_CLASSES: usize = 3;
const GC_TEACHER_DIM: usize = 16;
const GC_INSTANCES: usize = 10;

struct ComponentOutcome {
    max_rel: f64,
    /// (instance, input index, flat coordinate, analytic, numeric).
    worst: Option<(usize, usize, usize, f64, f64)>,
}

fn instance_rng(seed: u64, component: usize, instance: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((component as u64) << 32)
            .wrapping_add(instance as u64 + 1),
    )
}

fn random_feature_map(rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> =
        (0..GC_CHANNELS * GC_SIDE * GC_SIDE).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(vec![GC_CHANNELS, GC_SIDE, GC_SIDE], data).expect("sized to shape")
}

/// Random labels in `0..k` with a sprinkling of ignore pixels; redraws
/// until at least `min_classes` distinct real classes appear.
fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, min_classes: usize) -> LabelMap {
    loop {
        let data: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.gen::<f64>() < 0.1 {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..k) as u8
                }
            })
            .collect();
        let distinct: BTreeSet<u8> =
            data.iter().copied().filter(|&v| v != IGNORE_LABEL).collect();
        if distinct.len() >= min_classes {
            return LabelMap::new(h, w, data).expect("sized to shape");
        }
    }
}

fn bundle_from(maps: &[Tensor]) -> Result<ModalityBundle> {
    let pairs: Vec<(Modality, Tensor)> =
        Modality::ALL.into_iter().zip(maps.iter().cloned()).collect();
    ModalityBundle::from_pairs(pairs)
}

/// One gradient-checked scalar function per component, each over
/// `GC_INSTANCES` seeded instances. Feature maps are the watched inputs.
fn run_component(name: &str, seed: u64, comp_idx: usize, eps: f64) -> Result<ComponentOutcome> {
    let mut outcome = ComponentOutcome { max_rel: 0.0, worst: None };
    for inst in 0..GC_INSTANCES {
        let mut rng = instance_rng(seed, comp_idx, inst);
        let fuse_cfg = FuseConfig::default();
        let (inputs, f): (Vec<Tensor>, Box<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>>) = match name
        {
            "fuse" => {
                let maps: Vec<Tensor> = (0..4).map(|_| random_feature_map(&mut rng)).collect();
                (
                    maps,
                    Box::new(move |tape, xs| {
                        let bundle = bundle_from(xs)?;
                        let (f_ma, _) = fuse(tape, &bundle, &fuse_cfg)?;
                        tape.sum(&f_ma)
                    }),
                )
            }
            "l_sup" => {
                let logits = {
                    let data: Vec<f64> = (0..GC_CLASSES * GC_SIDE * GC_SIDE)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect();
                    Tensor::from_vec(vec![GC_CLASSES, GC_SIDE, GC_SIDE], data).expect("sized")
                };
                let labels = random_labels(&mut rng, GC_SIDE, GC_SIDE, GC_CLASSES, 1);
                (
                    vec![logits],
                    Box::new(move |tape, xs| tape.cross_entropy(&xs[0], &labels, IGNORE_LABEL)),
                )
            }
            "l_cr" => {
                let maps: Vec<Tensor> = (0..4).map(|_| random_feature_map(&mut rng)).collect();
                let teacher = TeacherEmbeddings::synthesize(
                    rng.gen::<u64>(),
                    GC_CLASSES,
                    GC_TEACHER_DIM,
                    0.8,
                )?;
                let t_corr = teacher.inter_modal_corr(&Modality::ALL)?;
                (
                    maps,
                    Box::new(move |tape, xs| {
                        let bundle = bundle_from(xs)?;
                        let (f_ma, _) = fuse(tape, &bundle, &fuse_cfg)?;
                        let s_corr = inter_modal_corr_student(tape, &bundle, &f_ma)?;
                        loss_cr(tape, &s_corr, &t_corr, 1.0, KlOrder::TeacherTarget)
                    }),
                )
            }
            "l_se" => {
                let f_ma = random_feature_map(&mut rng);
                let teacher = TeacherEmbeddings::synthesize(
                    rng.gen::<u64>(),
                    GC_CLASSES,
                    GC_TEACHER_DIM,
                    0.8,
                )?;
                let labels =
                    random_labels(&mut rng, 2 * GC_SIDE, 2 * GC_SIDE, GC_CLASSES, 2);
                (
                    vec![f_ma],
                    Box::new(move |tape, xs| {
                        let reps = map_pool(
                            tape,
                            &xs[0],
                            &labels,
                            IGNORE_LABEL,
                            GC_CLASSES,
                            UpsampleMode::Bilinear,
                        )?;
                        loss_se(tape, &reps, &teacher, 1.0, KlOrder::TeacherTarget)
                    }),
                )
            }
            "l_kd" => {
                let maps: Vec<Tensor> = (0..4).map(|_| random_feature_map(&mut rng)).collect();
                let teacher = TeacherEmbeddings::synthesize(
                    rng.gen::<u64>(),
                    GC_CLASSES,
                    GC_TEACHER_DIM,
                    0.8,
                )?;
                let t_corr = teacher.inter_modal_corr(&Modality::ALL)?;
                let labels =
                    random_labels(&mut rng, 2 * GC_SIDE, 2 * GC_SIDE, GC_CLASSES, 2);
                (
                    maps,
                    Box::new(move |tape, xs| {
                        let bundle = bundle_from(xs)?;
                        let (f_ma, _) = fuse(tape, &bundle, &fuse_cfg)?;
                        let s_corr = inter_modal_corr_student(tape, &bundle, &f_ma)?;
                        let cr = loss_cr(tape, &s_corr, &t_corr, 1.0, KlOrder::TeacherTarget)?;
                        let reps = map_pool(
                            tape,
                            &f_ma,
                            &labels,
                            IGNORE_LABEL,
                            GC_CLASSES,
                            UpsampleMode::Bilinear,
                        )?;
                        let se = loss_se(tape, &reps, &teacher, 1.0, KlOrder::TeacherTarget)?;
                        loss_kd(tape, &cr, &se)
                    }),
                )
            }
            other => return Err(Error::domain(format!("unknown gradcheck component {:?}", other))),
        };
        let report = grad_check_detailed(|tape, xs| f(tape, xs), &inputs, eps)?;
        if report.max_rel_err > outcome.max_rel {
            outcome.max_rel = report.max_rel_err;
            outcome.worst =
                report.worst.map(|(input, coord, ad, fd)| (inst, input, coord, ad, fd));
        }
    }
    Ok(outcome)
}

/// Names in reporting order.
pub const GRADCHECK_COMPONENTS: [&str; 5] = ["l_sup", "l_cr", "l_se", "l_kd", "fuse"];

/// Runs the whole suite; returns (component, outcome) pairs.
fn run_gradcheck_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, ComponentOutcome)>> {
    GRADCHECK_COMPONENTS
        .iter()
        .enumerate()
        .map(|(idx, name)| Ok((*name, run_component(name, seed, idx, eps)?)))
        .collect()
}

/// Library-facing summary of a gradcheck run: per-component max relative
/// errors in `GRADCHECK_COMPONENTS` order, and whether all pass.
pub fn gradcheck_suite(seed: u64, eps: f64) -> Result<(Vec<(&'static str, f64)>, bool)> {
    let results = run_gradcheck_suite(seed, eps)?;
    let rows: Vec<(&'static str, f64)> = results.iter().map(|(n, o)| (*n, o.max_rel)).collect();
    let pass = rows.iter().all(|(_, e)| *e <= GRADCHECK_TOL);
    Ok((rows, pass))
}

fn cmd_gradcheck(args: &GradcheckArgs, env_seed: Option<&str>) -> Result<i32> {
    if !(args.eps > 0.0) || !args.eps.is_finite() {
        return Err(Error::usage(format!("--eps must be a positive number, got {}", args.eps)));
    }
    let seed = resolve_seed(args.seed, env_seed)?;
    let results = run_gradcheck_suite(seed, args.eps)?;
    let mut failing: Option<(&str, &ComponentOutcome)> = None;
    for (name, outcome) in &results {
        println!("{:<6} max rel err {:.3e}  ({} instances)", name, outcome.max_rel, GC_INSTANCES);
        let worse = match failing {
            Some((_, cur)) => outcome.max_rel > cur.max_rel,
            None => true,
        };
        if outcome.max_rel > GRADCHECK_TOL && worse {
            failing = Some((name, outcome));
        }
    }
    match failing {
        None => {
            println!("gradcheck PASS: all components within {:e} (seed {}, eps {:e})", GRADCHECK_TOL, seed, args.eps);
            Ok(0)
        }
        Some((name, outcome)) => {
            let (inst, input, coord, ad, fd) =
                outcome.worst.expect("a failing component has a worst coordinate");
            println!(
                "gradcheck FAIL: {} max rel err {:.3e} at instance {}, input {}, coordinate {} (analytic {:.6e}, numeric {:.6e})",
                name, outcome.max_rel, inst, input, coord, ad, fd
            );
            Ok(1)
        }
    }
}
