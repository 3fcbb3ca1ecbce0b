//! CLI verbs. Each runs one pipeline operation against a workspace and
//! returns the text printed on success.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use yolic_core::benchkit::{bench_latency, cost_report, decode_agreement, quantize_int8, BenchOptions};
use yolic_core::cellgeom::{mirror_config, rasterize, save_config, CellConfig};
use yolic_core::decode::{decode, decode_cell, read_predictions, write_predictions, CellPrediction, DEFAULT_THETA};
use yolic_core::evalkit::evaluate;
use yolic_core::imageio::{encode_pgm, encode_ppm};
use yolic_core::labelkit::{mask_to_labels, synth_scene, write_annotation, SceneParams, DEFAULT_TAU};
use yolic_core::yolicnet::{build_model, save_weights, train, ModelSpec, Sample, TrainConfig, WidthPreset, YolicModel};

use crate::diag::{ToolError, ToolResult};
use crate::workspace::{check_id, parse_config, write_atomic, ImageEntry, LoadedModel, Workspace};

#[derive(Debug, Parser)]
#[command(name = "yolic", version, about = "Cell-based object localization and classification toolkit")]
pub struct Cli {
    /// Workspace root (created if missing).
    #[arg(long, short = 'w', global = true, default_value = ".")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate or mirror a cell configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Rasterize a configuration and report per-cell pixel areas.
    Rasterize(RasterizeArgs),
    /// Convert class-id masks into per-cell annotations.
    Convert(ConvertArgs),
    /// Generate synthetic scenes with masks and annotations.
    Synth(SynthArgs),
    /// Train a model on the annotated images of one configuration.
    Train(TrainArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Run a model over workspace images and write prediction files.
    Infer(InferArgs),
    /// Report parameter/FLOP counts and single-image latency.
    Bench(BenchArgs),
    /// Quantize a float model to INT8 weights.
    Quantize(QuantizeArgs),
    /// Serve the workspace over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum ConfigAction {
    /// Check a configuration and print its output layout.
    Validate {
        /// File path, workspace config name or preset name.
        config: String,
    },
    /// Print the left-right mirror permutation and optionally write the mirrored config.
    Mirror {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    pub config: String,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    /// Write a PGM map holding the index of the first cell covering each pixel (255 = none).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub config: Option<String>,
    /// Minimum fraction of a cell a class must cover.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Image ids; all images of the config when empty.
    pub ids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    pub max_shapes: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<String>,
    /// Width preset: tiny or table1.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Input side; defaults to 224 for table1 and to the image side for tiny.
    #[arg(long)]
    pub size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Comma-separated epochs at which the learning rate is multiplied by 0.1.
    /// Defaults to 100,125 for epoch-bounded runs and to none with --steps alone.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f32,
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weights output; defaults to weights/<config>.yw.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<String>,
    /// Directory of <id>.pred files; defaults to reports/predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Re-decode stored probabilities at this threshold.
    #[arg(long)]
    pub theta: Option<f32>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f32,
    /// Output directory; defaults to reports/predictions.
    #[arg(long)]
    pub out: Option<PathBuf>,
    pub ids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time; without it a freshly initialized model is used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Configuration fixing the head width when no weights are given.
    #[arg(long, default_value = "outdoor104")]
    pub config: String,
    #[arg(long, default_value = "table1")]
    pub preset: String,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Only report parameter and FLOP counts.
    #[arg(long)]
    pub cost_only: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Output; defaults to the input name with a .q8 extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
}

/// Runs every verb except `serve`, which needs an async runtime.
pub fn run(ws: &Workspace, command: &Command) -> ToolResult<String> {
    match command {
        Command::Config { action } => config(ws, action),
        Command::Rasterize(a) => rasterize_cmd(ws, a),
        Command::Convert(a) => convert(ws, a),
        Command::Synth(a) => synth(ws, a),
        Command::Train(a) => train_cmd(ws, a),
        Command::Eval(a) => eval(ws, a),
        Command::Infer(a) => infer(ws, a),
        Command::Bench(a) => bench(ws, a),
        Command::Quantize(a) => quantize(ws, a),
        Command::Serve(_) => Err(ToolError::usage("serve is handled by the binary entry point")),
    }
}

fn describe(cfg: &CellConfig) -> String {
    format!(
        "config {}: N={} M={} C={} ({} x ({} + 1))",
        cfg.name(),
        cfg.n_cells(),
        cfg.n_classes(),
        cfg.n_outputs(),
        cfg.n_cells(),
        cfg.n_classes()
    )
}

fn config(ws: &Workspace, action: &ConfigAction) -> ToolResult<String> {
    match action {
        ConfigAction::Validate { config } => {
            let cfg = ws.resolve_config(config)?;
            Ok(format!(
                "{}\nclasses: {}\nvalid: 0 violations\n",
                describe(&cfg),
                cfg.class_names().join(", ")
            ))
        }
        ConfigAction::Mirror { config, out } => {
            let cfg = ws.resolve_config(config)?;
            let (mirrored, perm) = mirror_config(&cfg);
            let mut text = describe(&cfg);
            match &perm {
                Some(p) => {
                    let _ = write!(text, "\nmirror permutation: {p:?}");
                }
                None => text.push_str("\nno mirror permutation: the configuration is not left-right symmetric, flip augmentation is disabled"),
            }
            if let Some(path) = out {
                write_atomic(path, &save_config(&mirrored))?;
                let _ = write!(text, "\nwrote {}", path.display());
            }
            text.push('\n');
            Ok(text)
        }
    }
}

fn rasterize_cmd(ws: &Workspace, a: &RasterizeArgs) -> ToolResult<String> {
    let cfg = ws.resolve_config(&a.config)?;
    let cells = rasterize(&cfg, a.width, a.height)?;
    let mut text = format!("{}\nraster {}x{}\n", describe(&cfg), a.width, a.height);
    for (i, m) in cells.masks().iter().enumerate() {
        let _ = writeln!(text, "cell {i}: {} px", m.area());
    }
    if let Some(path) = &a.out {
        if cfg.n_cells() > 255 {
            return Err(ToolError::usage(format!(
                "a PGM cell map holds at most 255 cells, config has {}",
                cfg.n_cells()
            )));
        }
        let map: Vec<u8> = (0..a.height)
            .flat_map(|r| (0..a.width).map(move |c| (r, c)))
            .map(|(r, c)| (0..cells.len()).find(|&i| cells.contains(i, r, c)).map_or(255, |i| i as u8))
            .collect();
        write_atomic(path, &encode_pgm(a.width, a.height, &map))?;
        let _ = writeln!(text, "wrote {}", path.display());
    }
    Ok(text)
}

fn config_name(ws: &Workspace, given: &Option<String>) -> ToolResult<String> {
    match given {
        Some(c) => Ok(ws.resolve_config(c)?.name().to_string()),
        None => ws.default_config(),
    }
}

/// Stores a configuration in the workspace; an existing one with the same
/// name must have the same layout.
fn store_config(ws: &Workspace, cfg: &CellConfig) -> ToolResult<()> {
    check_id(cfg.name())?;
    let path = ws.config_path(cfg.name());
    if path.is_file() {
        let existing = parse_config(&std::fs::read(&path)?)?;
        if existing.layout() != cfg.layout() {
            return Err(ToolError::conflict(format!(
                "workspace config {} has layout {}x{}, refusing to replace it with {}x{}",
                cfg.name(),
                existing.n_cells(),
                existing.n_classes(),
                cfg.n_cells(),
                cfg.n_classes()
            )));
        }
        return Ok(());
    }
    write_atomic(&path, &save_config(cfg))
}

fn convert(ws: &Workspace, a: &ConvertArgs) -> ToolResult<String> {
    let name = config_name(ws, &a.config)?;
    let cfg = ws.resolve_config(&name)?;
    let entries = ws.images_for(&name, &a.ids)?;
    let mut done = 0;
    let mut cached: Option<((usize, usize), yolic_core::cellgeom::CellMaskSet)> = None;
    for e in &entries {
        let mask = ws.read_mask(&e.id, cfg.n_classes())?;
        let dims = (mask.width(), mask.height());
        if cached.as_ref().is_none_or(|(d, _)| *d != dims) {
            cached = Some((dims, rasterize(&cfg, dims.0, dims.1)?));
        }
        let cells = &cached.as_ref().expect("set above").1;
        let labels = mask_to_labels(&mask, cells, cfg.n_classes(), a.tau)
            .map_err(|e2| ToolError::from(e2).context(format!("mask {}", e.id)))?;
        write_atomic(&ws.annotation_path(&e.id), &write_annotation(&labels))?;
        done += 1;
    }
    Ok(format!("converted {done} mask(s) for config {name} (tau {})\n", a.tau))
}

fn synth(ws: &Workspace, a: &SynthArgs) -> ToolResult<String> {
    let cfg = ws.resolve_config(&a.config)?;
    if a.size == 0 || a.min_shapes > a.max_shapes {
        return Err(ToolError::usage("size must be positive and min-shapes <= max-shapes"));
    }
    store_config(ws, &cfg)?;
    let cells = rasterize(&cfg, a.size, a.size)?;
    let params = SceneParams {
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        ..SceneParams::new(a.size, a.size, cfg.n_classes())
    };
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count as u64 {
        let seed = a.seed + i;
        let id = format!("{}-s{seed}", cfg.name());
        let scene = synth_scene(&params, seed);
        let labels = mask_to_labels(&scene.mask, &cells, cfg.n_classes(), a.tau)?;
        write_atomic(&ws.image_path(&id), &encode_ppm(&scene.image))?;
        write_atomic(&ws.mask_path(&id), &encode_pgm(a.size, a.size, scene.mask.ids()))?;
        write_atomic(&ws.annotation_path(&id), &write_annotation(&labels))?;
        entries.push(ImageEntry {
            id,
            config: cfg.name().to_string(),
        });
    }
    ws.register(&entries)?;
    Ok(format!(
        "wrote {} synthetic scene(s) for config {} at {}x{} (seeds {}..{})\n",
        a.count,
        cfg.name(),
        a.size,
        a.size,
        a.seed,
        a.seed + a.count as u64
    ))
}

fn parse_preset(s: &str) -> ToolResult<WidthPreset> {
    WidthPreset::parse(s).ok_or_else(|| ToolError::usage(format!("unknown width preset {s:?}; use tiny or table1")))
}

fn train_cmd(ws: &Workspace, a: &TrainArgs) -> ToolResult<String> {
    let name = config_name(ws, &a.config)?;
    let cfg = ws.resolve_config(&name)?;
    let preset = parse_preset(&a.preset)?;
    let mut data = Vec::new();
    for e in ws.images_for(&name, &[])? {
        if !ws.annotation_path(&e.id).is_file() {
            continue;
        }
        data.push(Sample {
            labels: ws.read_annotation(&e.id, &cfg)?,
            image: ws.read_image(&e.id)?,
        });
    }
    if data.is_empty() {
        return Err(ToolError::not_found(format!("no annotated images for config {name}")));
    }
    let size = a.size.unwrap_or(match preset {
        WidthPreset::Table1 => 224,
        WidthPreset::Tiny => data[0].image.width(),
    });
    let spec = ModelSpec::for_config(preset, &cfg, size);
    spec.validate()?;
    let tc = TrainConfig {
        lr: a.lr,
        milestones: match (&a.milestones, a.steps, a.epochs) {
            (Some(m), _, _) => m.clone(),
            (None, Some(_), None) => Vec::new(),
            (None, _, _) => TrainConfig::default().milestones,
        },
        batch_size: a.batch,
        epochs: a.epochs.unwrap_or(match a.steps {
            Some(s) => s.max(1),
            None => TrainConfig::default().epochs,
        }),
        max_steps: a.steps,
        flip: !a.no_flip,
        jitter: a.jitter,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut model: YolicModel<f32> = build_model(&spec, a.seed)?;
    let (_, perm) = mirror_config(&cfg);
    let report = train(&mut model, &data, &tc, perm.as_deref())?;
    let out = a.out.clone().unwrap_or_else(|| ws.weights_dir().join(format!("{name}.yw")));
    write_atomic(&out, &save_weights(&model, &name))?;
    let trace = ws.reports_dir().join(format!("train-{name}.json"));
    #[derive(Serialize)]
    struct TraceDoc<'a> {
        config: &'a str,
        preset: &'a str,
        input_size: usize,
        images: usize,
        train: &'a TrainConfig,
        report: &'a yolic_core::yolicnet::TrainReport,
    }
    let doc = TraceDoc {
        config: &name,
        preset: preset.name(),
        input_size: size,
        images: data.len(),
        train: &tc,
        report: &report,
    };
    write_atomic(&trace, serde_json::to_string_pretty(&doc).expect("serializes").as_bytes())?;
    let first = report.step_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.step_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} model on {} image(s) of {name} at {size}px: {} steps, {} epochs, loss {first:.4} -> {last:.4}{}\nwrote {}\nwrote {}\n",
        preset.name(),
        data.len(),
        report.steps,
        report.epoch_losses.len(),
        if report.flip_applied { ", flip on" } else { "" },
        out.display(),
        trace.display()
    ))
}

fn redecode(preds: &[CellPrediction], theta: f32) -> Vec<CellPrediction> {
    preds
        .iter()
        .map(|p| {
            let mut block = p.object_probs.clone();
            block.push(p.background_prob);
            decode_cell(&block, theta)
        })
        .collect()
}

fn eval(ws: &Workspace, a: &EvalArgs) -> ToolResult<String> {
    let name = config_name(ws, &a.config)?;
    let cfg = ws.resolve_config(&name)?;
    let dir = a.predictions.clone().unwrap_or_else(|| ws.predictions_dir());
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for e in ws.images_for(&name, &[])? {
        let path = dir.join(format!("{}.pred", e.id));
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let (layout, _, p) = read_predictions(&text).map_err(|err| ToolError::from(err).context(path.display()))?;
        if layout != cfg.layout() {
            return Err(ToolError::conflict(format!(
                "{}: prediction layout {}x{} does not match config {name} ({}x{})",
                path.display(),
                layout.n_cells,
                layout.n_classes,
                cfg.n_cells(),
                cfg.n_classes()
            )));
        }
        gts.push(ws.read_annotation(&e.id, &cfg)?);
        preds.push(match a.theta {
            Some(t) => redecode(&p, t),
            None => p,
        });
    }
    if gts.is_empty() {
        return Err(ToolError::not_found(format!(
            "no predictions for config {name} in {}",
            dir.display()
        )));
    }
    let report = evaluate(cfg.layout(), cfg.class_names(), &gts, &preds)?;
    let text = report.to_text();
    write_atomic(&ws.reports_dir().join(format!("metrics-{name}.json")), report.to_json().as_bytes())?;
    write_atomic(&ws.reports_dir().join(format!("metrics-{name}.txt")), text.as_bytes())?;
    Ok(text)
}

fn infer(ws: &Workspace, a: &InferArgs) -> ToolResult<String> {
    let model = ws.load_model(&a.weights)?;
    let name = model.config_name().to_string();
    let cfg = ws.resolve_config(&name)?;
    check_head(&model, &cfg)?;
    let entries = ws.images_for(&name, &a.ids)?;
    let dir = a.out.clone().unwrap_or_else(|| ws.predictions_dir());
    let mut text = String::new();
    for e in &entries {
        let preds = predict_one(ws, &model, &cfg, &e.id, a.theta)?;
        let risk = preds.iter().filter(|p| !p.is_background).count();
        write_atomic(&dir.join(format!("{}.pred", e.id)), write_predictions(&preds, a.theta).as_bytes())?;
        let _ = writeln!(text, "{}: {risk}/{} cells flagged", e.id, preds.len());
    }
    let _ = writeln!(text, "wrote {} prediction file(s) to {}", entries.len(), dir.display());
    Ok(text)
}

pub fn check_head(model: &LoadedModel, cfg: &CellConfig) -> ToolResult<()> {
    if model.runtime().n_outputs() != cfg.n_outputs() {
        return Err(ToolError::conflict(format!(
            "model has C = {} outputs but config {} needs C = {}",
            model.runtime().n_outputs(),
            cfg.name(),
            cfg.n_outputs()
        )));
    }
    Ok(())
}

/// Runs the model on one workspace image and decodes it.
pub fn predict_one(ws: &Workspace, model: &LoadedModel, cfg: &CellConfig, id: &str, theta: f32) -> ToolResult<Vec<CellPrediction>> {
    let image = ws.read_image(id)?;
    let probs = model.runtime().predict_images(std::slice::from_ref(&image), 1)?;
    Ok(decode(&probs[0], cfg.layout(), theta)?)
}

fn bench(ws: &Workspace, a: &BenchArgs) -> ToolResult<String> {
    let (model, cfg, label) = match &a.weights {
        Some(path) => {
            let loaded = ws.load_model(path)?;
            let cfg = ws.resolve_config(loaded.config_name())?;
            check_head(&loaded, &cfg)?;
            (loaded.runtime().clone(), cfg, path.display().to_string())
        }
        None => {
            let cfg = ws.resolve_config(&a.config)?;
            let preset = parse_preset(&a.preset)?;
            let spec = ModelSpec::for_config(preset, &cfg, a.size.unwrap_or(224));
            let label = format!("{} preset, freshly initialized", preset.name());
            (build_model::<f32>(&spec, 0)?, cfg, label)
        }
    };
    let size = a.size.unwrap_or(model.spec().input_size);
    let cost = cost_report(model.spec(), size)?;
    let mut text = format!("model: {label}, {}\n{}", describe(&cfg), cost.to_text());
    let latency = if a.cost_only {
        None
    } else {
        let model = if size == model.spec().input_size {
            model
        } else {
            let mut spec = model.spec().clone();
            spec.input_size = size;
            build_model(&spec, 0)?
        };
        let opts = BenchOptions {
            runs: a.runs,
            warmup: a.warmup,
            threads: a.threads,
            seed: 0,
        };
        let r = bench_latency(&model, cfg.layout(), &opts)?;
        text.push_str(&r.to_text());
        Some(r)
    };
    let doc = serde_json::json!({ "model": label, "config": cfg.name(), "cost": cost, "latency": latency });
    let path = ws.reports_dir().join("bench.json");
    write_atomic(&path, serde_json::to_string_pretty(&doc).expect("serializes").as_bytes())?;
    let _ = writeln!(text, "wrote {}", path.display());
    Ok(text)
}

fn quantize(ws: &Workspace, a: &QuantizeArgs) -> ToolResult<String> {
    let (model, name) = match ws.load_model(&a.weights)? {
        LoadedModel::Float { model, config } => (model, config),
        LoadedModel::Quantized(_) => return Err(ToolError::usage("weights are already quantized")),
    };
    let q = quantize_int8(&model, &name);
    let out = a.out.clone().unwrap_or_else(|| a.weights.with_extension("q8"));
    let bytes = q.save();
    write_atomic(&out, &bytes)?;
    let float_bytes = std::fs::metadata(&a.weights)?.len();
    let mut text = format!(
        "quantized {} tensor(s) of {name}: {} -> {} bytes\nwrote {}\n",
        q.quantized_tensors().len(),
        float_bytes,
        bytes.len(),
        out.display()
    );
    let mut agreement = None;
    if let Ok(cfg) = ws.resolve_config(&name) {
        let images = ws
            .images_for(&name, &[])?
            .iter()
            .map(|e| ws.read_image(&e.id))
            .collect::<ToolResult<Vec<_>>>()?;
        if !images.is_empty() && cfg.n_outputs() == model.n_outputs() {
            let fp = model.predict_images(&images, 16)?;
            let qp = q.runtime().predict_images(&images, 16)?;
            let rate = decode_agreement(&fp, &qp, cfg.layout(), a.theta)?;
            let _ = writeln!(
                text,
                "per-cell decode agreement on {} workspace image(s): {:.2}%",
                images.len(),
                rate * 100.0
            );
            agreement = Some(rate);
        }
    }
    let doc = serde_json::json!({
        "config": name,
        "float_bytes": float_bytes,
        "quantized_bytes": bytes.len(),
        "theta": a.theta,
        "decode_agreement": agreement,
    });
    write_atomic(
        &ws.reports_dir().join(format!("quantize-{name}.json")),
        serde_json::to_string_pretty(&doc).expect("serializes").as_bytes(),
    )?;
    Ok(text)
}
