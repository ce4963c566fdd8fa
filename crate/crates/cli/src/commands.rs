use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use seabed_core::gmrf::{estimate_traced, GmrfConfig};
use seabed_core::grid::{read_grid, write_grid, GridKind, HeightMap, IntensityImage};
use seabed_core::nn::{load_checkpoint, save_checkpoint, ModelSpec, TrainingStats};
use seabed_core::pipeline::dataset::{generate_dataset, Dataset, DatasetConfig, Fold};
use seabed_core::pipeline::eval::{
    diff_map, evaluate_estimator, pair_evaluate, reports_to_csv, EvalReport, Estimator, PairEvalConfig,
};
use seabed_core::pipeline::predict::predict;
use seabed_core::pipeline::train::{finetune, train, TrainConfig, TrainOutcome};
use seabed_core::relief::{synthesize, TextureParams};
use seabed_core::sas::{render_with, RenderOptions, SonarGeometry};
use seabed_core::Exec;

use crate::config::{layered, read_json};
use crate::{Cli, Command, Shared};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SynthConfig {
    texture: TextureParams,
    size: usize,
    spacing: f64,
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            texture: TextureParams::default(),
            size: 256,
            spacing: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RenderConfig {
    geometry: SonarGeometry,
    render: RenderOptions,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct GmrfCommandConfig {
    geometry: SonarGeometry,
    gmrf: GmrfConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalConfig {
    gmrf: GmrfConfig,
    batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gmrf: GmrfConfig::default(),
            batch_size: 20,
        }
    }
}

struct Ctx<'a> {
    shared: &'a Shared,
    overrides: Option<Value>,
    exec: Exec,
}

impl Ctx<'_> {
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, defaults: &T) -> Result<T> {
        layered(defaults, self.overrides.as_ref())
    }

    fn has_override(&self, key: &str) -> bool {
        self.overrides.as_ref().is_some_and(|o| o.get(key).is_some())
    }

    fn out(&self) -> Result<&Path> {
        self.shared.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    /// Prints the config and reports whether the command should stop there.
    fn dumped<T: Serialize>(&self, cfg: &T) -> Result<bool> {
        if self.shared.dump_config {
            emit(&format!("{}\n", serde_json::to_string_pretty(cfg)?))?;
        }
        Ok(self.shared.dump_config)
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &Value) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("--{flag} is required"))
}

pub fn run(cli: &Cli) -> Result<()> {
    let shared = &cli.shared;
    let overrides = shared.config.as_deref().map(read_json).transpose()?;
    let exec = if shared.sequential { Exec::Sequential } else { Exec::default() };
    let ctx = Ctx {
        shared,
        overrides,
        exec,
    };
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Render { input } => render(&ctx, input),
        Command::Dataset { profile } => dataset(&ctx, *profile),
        Command::Gmrf { input } => gmrf(&ctx, input),
        Command::Train { dataset } => train_cmd(&ctx, dataset),
        Command::Finetune {
            checkpoint,
            dataset,
            mode,
        } => finetune_cmd(&ctx, checkpoint, dataset, *mode),
        Command::Predict { checkpoint, input } => predict_cmd(&ctx, checkpoint, input),
        Command::Eval {
            dataset,
            checkpoint,
            fold,
        } => eval_cmd(&ctx, dataset, checkpoint.as_deref(), fold),
        Command::PairEval {
            checkpoint,
            dataset,
            gmrf,
        } => pair_eval_cmd(&ctx, checkpoint.as_deref(), dataset.as_deref(), *gmrf),
        Command::Diff { a, b } => diff_cmd(&ctx, a, b),
        Command::Params { model } => params(&ctx, model),
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let mut cfg = ctx.resolve(&SynthConfig::default())?;
    if let Some(s) = ctx.shared.seed {
        cfg.seed = s;
    }
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let out = ctx.out()?;
    let h = synthesize(&cfg.texture, cfg.seed, cfg.size, cfg.spacing)?;
    write_grid(out, h.as_grid(), GridKind::Height)?;
    print_json(&json!({
        "out": out,
        "size": cfg.size,
        "spacing": cfg.spacing,
        "seed": cfg.seed,
        "mean": h.as_grid().mean(),
        "rms": h.as_grid().rms(),
    }))
}

fn render(ctx: &Ctx, input: &Option<PathBuf>) -> Result<()> {
    let mut cfg = ctx.resolve(&RenderConfig::default())?;
    if let Some(s) = ctx.shared.seed {
        cfg.render.seed = s;
    }
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let input = require(input, "input")?;
    let out = ctx.out()?;
    let (_, relief) = read_grid(input)?;
    let img = render_with(&HeightMap::new(relief), &cfg.geometry, &cfg.render, ctx.exec)?;
    write_grid(out, img.as_grid(), GridKind::Intensity)?;
    let (min, max) = img.as_grid().min_max();
    print_json(&json!({
        "out": out,
        "width": img.as_grid().width(),
        "height": img.as_grid().height(),
        "mean": img.as_grid().mean(),
        "min": min,
        "max": max,
    }))
}

fn dataset(ctx: &Ctx, profile: seabed_core::pipeline::dataset::Profile) -> Result<()> {
    let mut cfg = ctx.resolve(&DatasetConfig::for_profile(profile))?;
    if let Some(s) = ctx.shared.seed {
        cfg.seed = s;
    }
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let out = ctx.out()?;
    let manifest = generate_dataset(&cfg, out, ctx.exec)?;
    let folds: serde_json::Map<String, Value> = ["0", "1", "2", "3", "4", "val", "test"]
        .iter()
        .map(|f| {
            let fold: Fold = f.parse().expect("fold label");
            (f.to_string(), json!(manifest.count(|x| x == fold)))
        })
        .collect();
    print_json(&json!({
        "out": out,
        "scenes": cfg.scene_count(),
        "tiles": manifest.entries.len(),
        "folds": folds,
        "stats": manifest.stats,
    }))
}

fn gmrf(ctx: &Ctx, input: &Option<PathBuf>) -> Result<()> {
    let cfg = ctx.resolve(&GmrfCommandConfig::default())?;
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let input = require(input, "input")?;
    let out = ctx.out()?;
    let (_, grid) = read_grid(input)?;
    let img = IntensityImage::new(grid)?;
    let (h, trace) = estimate_traced(&img, &cfg.geometry, &cfg.gmrf, ctx.exec)?;
    write_grid(out, h.as_grid(), GridKind::Height)?;
    print_json(&json!({
        "out": out,
        "sweeps": trace.sweeps.len(),
        "shadow_fraction": trace.shadow_fraction,
        "stopped_degenerate": trace.stopped_degenerate,
        "params": trace.params.last(),
    }))
}

/// Train config with the tile size taken from the dataset unless the
/// config file sets it.
fn train_config(ctx: &Ctx, defaults: TrainConfig, ds: Option<&Dataset>) -> Result<TrainConfig> {
    let mut cfg = ctx.resolve(&defaults)?;
    if let Some(s) = ctx.shared.seed {
        cfg.seed = s;
    }
    if let Some(ds) = ds {
        if !ctx.has_override("tile_size") {
            cfg.tile_size = ds.manifest.config.tile_size;
        }
    }
    Ok(cfg)
}

fn open_dataset(p: &Option<PathBuf>) -> Result<Option<Dataset>> {
    p.as_deref().map(Dataset::open).transpose().map_err(Into::into)
}

fn save_outcome(ctx: &Ctx, out: TrainOutcome) -> Result<()> {
    let path = ctx.out()?;
    save_checkpoint(path, &out.model, Some(&out.adam), Some(&out.stats))?;
    let history_path = path.with_extension("history.json");
    fs::write(&history_path, serde_json::to_string_pretty(&out.history)?)
        .with_context(|| format!("writing {}", history_path.display()))?;
    print_json(&json!({
        "checkpoint": path,
        "history": history_path,
        "model": out.model.spec().name,
        "epochs": out.history.epochs.len(),
        "initial_val_l1": out.history.initial_val_l1,
        "best_val_l1": out.history.best_val_l1,
        "best_epoch": out.history.best_epoch,
    }))
}

fn train_cmd(ctx: &Ctx, dataset: &Option<PathBuf>) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let cfg = train_config(ctx, TrainConfig::default(), ds.as_ref())?;
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let ds = ds.ok_or_else(|| anyhow!("--dataset is required"))?;
    ctx.out()?;
    save_outcome(ctx, train(&ds, &cfg, ctx.exec)?)
}

fn finetune_cmd(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    dataset: &Option<PathBuf>,
    mode: seabed_core::pipeline::train::FinetuneMode,
) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let ckpt = checkpoint.as_deref().map(|p| load_checkpoint(p, None)).transpose()?;
    let mut defaults = TrainConfig::finetune(mode);
    if let Some(c) = &ckpt {
        defaults.model = c.model.spec().name.clone();
    }
    let cfg = train_config(ctx, defaults, ds.as_ref())?;
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let ckpt = ckpt.ok_or_else(|| anyhow!("--checkpoint is required"))?;
    let ds = ds.ok_or_else(|| anyhow!("--dataset is required"))?;
    ctx.out()?;
    save_outcome(ctx, finetune(ckpt, &ds, &cfg, ctx.exec)?)
}

fn checkpoint_stats(path: &Path, stats: Option<TrainingStats>) -> Result<TrainingStats> {
    stats.ok_or_else(|| anyhow!("checkpoint {} carries no normalization statistics", path.display()))
}

fn predict_cmd(ctx: &Ctx, checkpoint: &Path, input: &Path) -> Result<()> {
    if ctx.dumped(&json!({}))? {
        return Ok(());
    }
    let out = ctx.out()?;
    let ckpt = load_checkpoint(checkpoint, None)?;
    let stats = checkpoint_stats(checkpoint, ckpt.stats)?;
    let (_, img) = read_grid(input)?;
    let h = predict(&ckpt.model, &stats, &img)?;
    write_grid(out, h.as_grid(), GridKind::Height)?;
    let (min, max) = h.as_grid().min_max();
    print_json(&json!({
        "out": out,
        "model": ckpt.model.spec().name,
        "width": h.as_grid().width(),
        "height": h.as_grid().height(),
        "min": min,
        "max": max,
    }))
}

/// CSV when the output path ends in `.csv`, JSON otherwise; stdout always
/// gets the CSV table.
fn write_reports(ctx: &Ctx, reports: &[EvalReport]) -> Result<()> {
    let csv = reports_to_csv(reports);
    if let Some(out) = &ctx.shared.out {
        let body = if out.extension().is_some_and(|e| e == "csv") {
            csv.clone()
        } else {
            serde_json::to_string_pretty(reports)?
        };
        fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    }
    emit(&csv)?;
    Ok(())
}

fn eval_cmd(ctx: &Ctx, dataset: &Path, checkpoint: Option<&Path>, fold: &str) -> Result<()> {
    let cfg = ctx.resolve(&EvalConfig::default())?;
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    if cfg.batch_size == 0 {
        bail!("batch_size must be >= 1");
    }
    let fold: Fold = fold.parse()?;
    let ds = Dataset::open(dataset)?;
    let samples = ds.load(|f| f == fold, ctx.exec)?;
    if samples.is_empty() {
        bail!("fold {fold} of {} is empty", dataset.display());
    }
    let ckpt = checkpoint.map(|p| load_checkpoint(p, None)).transpose()?;
    let est = match (&ckpt, checkpoint) {
        (Some(c), Some(p)) => Estimator::Network {
            model: &c.model,
            stats: checkpoint_stats(p, c.stats)?,
            batch: cfg.batch_size,
        },
        _ => Estimator::Gmrf {
            config: cfg.gmrf,
            geometry: ds.manifest.config.geometry,
        },
    };
    let report = evaluate_estimator(&est, &samples, &ds.manifest.stats, ctx.exec)?;
    write_reports(ctx, &[report])
}

fn pair_eval_cmd(ctx: &Ctx, checkpoint: Option<&Path>, dataset: Option<&Path>, with_gmrf: bool) -> Result<()> {
    let ds = dataset.map(Dataset::open).transpose()?;
    let mut defaults = PairEvalConfig::default();
    if let Some(ds) = &ds {
        let c = &ds.manifest.config;
        defaults.textures = c.textures.clone();
        defaults.tile_size = c.tile_size;
        defaults.spacing = c.spacing;
        defaults.geometry = c.geometry;
        defaults.render = c.render;
    }
    let mut cfg = ctx.resolve(&defaults)?;
    if let Some(s) = ctx.shared.seed {
        cfg.seed = s;
    }
    if ctx.dumped(&cfg)? {
        return Ok(());
    }
    let ckpt = checkpoint.map(|p| load_checkpoint(p, None)).transpose()?;
    let stats = match (&ckpt, checkpoint, &ds) {
        (Some(c), Some(p), _) => checkpoint_stats(p, c.stats)?,
        (_, _, Some(ds)) => ds.manifest.stats,
        _ => bail!("pair-eval needs --checkpoint or --dataset for normalization statistics"),
    };
    let mut estimators = vec![Estimator::Intensity];
    if with_gmrf {
        estimators.push(Estimator::Gmrf {
            config: GmrfConfig::default(),
            geometry: cfg.geometry,
        });
    }
    if let Some(c) = &ckpt {
        estimators.push(Estimator::Network {
            model: &c.model,
            stats,
            batch: 20,
        });
    }
    let reports = pair_evaluate(&cfg, &estimators, &stats, ctx.exec)?;
    write_reports(ctx, &reports)
}

fn diff_cmd(ctx: &Ctx, a: &Path, b: &Path) -> Result<()> {
    if ctx.dumped(&json!({}))? {
        return Ok(());
    }
    let (_, ga) = read_grid(a)?;
    let (_, gb) = read_grid(b)?;
    let (d, l1) = diff_map(&HeightMap::new(ga), &HeightMap::new(gb))?;
    if let Some(out) = &ctx.shared.out {
        write_grid(out, d.as_grid(), GridKind::Height)?;
    }
    print_json(&json!({
        "out": ctx.shared.out,
        "width": d.as_grid().width(),
        "height": d.as_grid().height(),
        "l1": l1,
    }))
}

fn params(ctx: &Ctx, model: &str) -> Result<()> {
    if ctx.dumped(&json!({}))? {
        return Ok(());
    }
    let spec = ModelSpec::by_name(model)?;
    let layers: Vec<Value> = spec
        .layers
        .iter()
        .filter(|l| l.param_count() > 0)
        .map(|l| json!({"name": l.name, "kind": l.kind, "params": l.param_count()}))
        .collect();
    let report = json!({
        "model": spec.name,
        "layers": layers,
        "conv_params": spec.conv_params(),
        "batchnorm_params": spec.batchnorm_params(),
        "total": spec.total_params(),
    });
    if let Some(out) = &ctx.shared.out {
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&report)
}
