//! Library backing of the `prunekit` binary: one entry function per
//! subcommand, so integration tests can drive them in-process as well as
//! through the executable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prunekit_core::engine::EngineConfig;
use prunekit_core::kernels::{conv_kernel, corr_kernel};
use prunekit_core::model::{
    load_model, mac_count, model_hash, param_count, reference_model, save_model_with_provenance,
    ModelGraph, Provenance,
};
use prunekit_core::pruner::{predict_param_count, prune};
use prunekit_core::rank::{
    calibrate_ranks, make_plan, paper_preset_ratios, CalibrationConfig, InputSource, RankReport,
};
use prunekit_core::tracker::{track_step_with, BBox};

pub mod synth;

pub use synth::{pearson, synthetic_sequence, SyntheticSequence};

#[derive(Parser)]
#[command(
    name = "prunekit",
    about = "Rank-based structured filter pruning toolkit with a built-in tracking engine",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Create a reference model with seeded random weights.
    Init(InitArgs),
    /// Estimate per-filter feature-map ranks over a calibration batch.
    Calibrate(CalibrateArgs),
    /// Apply a keep-plan to a model, writing the pruned model with provenance.
    Prune(PruneArgs),
    /// Measure parameter count, MACs and per-frame latency.
    Bench(BenchArgs),
    /// Prune at a grid of ratios and record size/speed/precision per row.
    Sweep(SweepArgs),
    /// Run the synthetic tracking sequence and report precision metrics.
    Smoke(SmokeArgs),
}

#[derive(Args)]
pub struct InitArgs {
    /// Channel scale in (0, 1]; 1.0 is the full reference.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration batch size g.
    #[arg(long, default_value_t = 16)]
    pub g: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input source: `noise`, or `folder` with `--images`.
    #[arg(long, default_value = "noise")]
    pub source: String,
    /// Image directory for the folder source.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Relative tolerance of the numerical rank.
    #[arg(long, default_value_t = prunekit_core::tensor::DEFAULT_RANK_REL_TOL)]
    pub rel_tol: f32,
    /// Rank activated maps instead of raw conv outputs.
    #[arg(long, default_value_t = false)]
    pub post_activation: bool,
    /// Output rank report (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Rank report from `calibrate`.
    #[arg(long)]
    pub report: PathBuf,
    /// Use the published per-layer keep ratios for the reference model.
    #[arg(long, default_value_t = false)]
    pub paper_preset: bool,
    /// Keep ratios: `LAYER=R,...`, or a bare `R` for all prunable layers.
    #[arg(long)]
    pub keep_ratio: Option<String>,
    /// Prune ratios (complement of keep): `LAYER=R,...` or bare `R`.
    #[arg(long)]
    pub prune_ratio: Option<String>,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Worker threads pinned for the measurement.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Convolution kernel: `direct` or `im2col`.
    #[arg(long, default_value = "im2col")]
    pub conv_kernel: String,
    /// Correlation kernel: `depthwise` or `full`.
    #[arg(long, default_value = "depthwise")]
    pub corr_kernel: String,
    /// Optional CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated targets: prunable layer ids, `head.l1..l3` (both
    /// towers), `global` (all prunable layers), or `grid` (the standard
    /// 9-target protocol).
    #[arg(long)]
    pub target: String,
    /// Comma-separated pruned fractions, e.g. `0.1,0.2,...,0.8`.
    #[arg(long)]
    pub ratios: String,
    /// Frames of the per-row synthetic smoke run.
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    /// Calibration batch size for the shared rank report.
    #[arg(long, default_value_t = 8)]
    pub g: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SmokeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional second model; reports the Pearson correlation of the two
    /// models' score maps over the sequence.
    #[arg(long)]
    pub compare_model: Option<PathBuf>,
    /// Per-frame results CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model from {}", path.display()))
}

pub fn run_init(args: &InitArgs) -> Result<()> {
    let model = reference_model(args.scale, args.seed)?;
    prunekit_core::model::save_model(&model, &args.out)?;
    let macs = mac_count(&model, (model.meta.search_size, model.meta.search_size))?;
    println!(
        "wrote {} (scale {}, seed {}): {} parameters, {} MACs/track-step",
        args.out.display(),
        args.scale,
        args.seed,
        param_count(&model),
        macs
    );
    Ok(())
}

pub fn run_calibrate(args: &CalibrateArgs) -> Result<()> {
    let model = load(&args.model)?;
    let source = match args.source.as_str() {
        "noise" => InputSource::SyntheticNoise,
        "folder" => InputSource::ImageFolder(
            args.images
                .clone()
                .context("--source folder needs --images <dir>")?,
        ),
        other => bail!("unknown calibration source `{other}` (available: noise, folder)"),
    };
    let cfg = CalibrationConfig {
        batch_size: args.g,
        rel_tol: args.rel_tol,
        seed: args.seed,
        source,
        post_activation: args.post_activation,
    };
    let report = calibrate_ranks(&model, &cfg)?;
    report.save(&args.out)?;
    println!(
        "wrote {} ({} conv layers, g={}, seed={})",
        args.out.display(),
        report.layers.len(),
        report.g,
        report.seed
    );
    Ok(())
}

/// Parse `LAYER=R,...` or a bare ratio applied to all prunable layers.
fn parse_ratio_arg(
    arg: &str,
    model: &ModelGraph,
    complement: bool,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if !arg.contains('=') {
        let r: f64 = arg
            .trim()
            .parse()
            .with_context(|| format!("bad ratio `{arg}`"))?;
        let r = if complement { 1.0 - r } else { r };
        for id in model.prunable_conv_ids() {
            out.insert(id.to_string(), r);
        }
        return Ok(out);
    }
    for part in arg.split(',') {
        let (layer, value) = part
            .split_once('=')
            .with_context(|| format!("expected LAYER=RATIO, got `{part}`"))?;
        let r: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("bad ratio in `{part}`"))?;
        let r = if complement { 1.0 - r } else { r };
        out.insert(layer.trim().to_string(), r);
    }
    // unspecified prunable layers keep everything
    for id in model.prunable_conv_ids() {
        out.entry(id.to_string()).or_insert(1.0);
    }
    Ok(out)
}

pub fn run_prune(args: &PruneArgs) -> Result<()> {
    let model = load(&args.model)?;
    let report = RankReport::load(&args.report)
        .with_context(|| format!("loading rank report {}", args.report.display()))?;
    let ratios = match (&args.paper_preset, &args.keep_ratio, &args.prune_ratio) {
        (true, None, None) => paper_preset_ratios(&model)?,
        (false, Some(arg), None) => parse_ratio_arg(arg, &model, false)?,
        (false, None, Some(arg)) => parse_ratio_arg(arg, &model, true)?,
        _ => bail!("pass exactly one of --paper-preset, --keep-ratio, --prune-ratio"),
    };
    let plan = make_plan(&report, &ratios)?;
    let predicted = predict_param_count(&model, &plan)?;
    let pruned = prune(&model, &plan)?;
    let actual = param_count(&pruned);
    assert_eq!(
        predicted, actual,
        "closed-form size accounting must match surgery"
    );
    let provenance = Provenance {
        parent_hash: model_hash(&model),
        kept: plan.kept_indices_map(),
        rank_report: Some(args.report.display().to_string()),
    };
    save_model_with_provenance(&pruned, &args.out, Some(provenance))?;
    let before = param_count(&model);
    println!(
        "wrote {}: {} -> {} parameters (ratio {:.4})",
        args.out.display(),
        before,
        actual,
        actual as f64 / before as f64
    );
    Ok(())
}

/// Latency statistics over the repeat runs.
pub struct BenchReport {
    pub params: u64,
    pub macs: u64,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

/// Median and interquartile range of per-frame track-step latency on a
/// pinned thread pool.
pub fn bench_model(
    model: &ModelGraph,
    repeats: usize,
    threads: usize,
    seed: u64,
    cfg: EngineConfig,
) -> Result<BenchReport> {
    if repeats < 1 {
        bail!("bench needs at least one repeat");
    }
    let seq = synthetic_sequence(&model.meta, 1, seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building bench thread pool")?;
    let mut samples_ms: Vec<f64> = Vec::with_capacity(repeats);
    pool.install(|| -> Result<()> {
        // warmup
        track_step_with(model, &seq.template, &seq.frames[0], cfg)?;
        for _ in 0..repeats {
            let start = Instant::now();
            track_step_with(model, &seq.template, &seq.frames[0], cfg)?;
            samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(())
    })?;
    samples_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |f: f64| {
        let idx = (f * (samples_ms.len() - 1) as f64).round() as usize;
        samples_ms[idx]
    };
    Ok(BenchReport {
        params: param_count(model),
        macs: mac_count(model, (model.meta.search_size, model.meta.search_size))?,
        median_ms: q(0.5),
        iqr_ms: q(0.75) - q(0.25),
    })
}

pub fn engine_config(conv: &str, corr: &str) -> Result<EngineConfig> {
    Ok(EngineConfig {
        conv: conv_kernel(conv)?,
        corr: corr_kernel(corr)?,
    })
}

pub fn run_bench(args: &BenchArgs) -> Result<()> {
    let model = load(&args.model)?;
    let cfg = engine_config(&args.conv_kernel, &args.corr_kernel)?;
    let report = bench_model(&model, args.repeats, args.threads, args.seed, cfg)?;
    println!(
        "{}: {} parameters, {} MACs/track-step",
        args.model.display(),
        report.params,
        report.macs
    );
    println!(
        "latency over {} repeats ({} threads, {} conv): median {:.3} ms, IQR {:.3} ms",
        args.repeats, args.threads, args.conv_kernel, report.median_ms, report.iqr_ms
    );
    if let Some(out) = &args.out {
        let mut csv = String::new();
        let _ = writeln!(csv, "# prunekit bench schema=1");
        let _ = writeln!(
            csv,
            "model,params,macs,repeats,threads,conv_kernel,median_ms,iqr_ms"
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            args.model.display(),
            report.params,
            report.macs,
            args.repeats,
            args.threads,
            args.conv_kernel,
            report.median_ms,
            report.iqr_ms
        );
        std::fs::write(out, csv)?;
    }
    Ok(())
}

/// One row of a ratio sweep.
pub struct SweepRow {
    pub target: String,
    pub prune_ratio: f64,
    pub params: u64,
    pub macs: u64,
    pub median_ms: f64,
    pub precision20: f32,
    pub auc: f32,
}

/// Expand a sweep target name into the affected prunable layers.
pub fn sweep_target_layers(model: &ModelGraph, target: &str) -> Result<Vec<String>> {
    let prunable: Vec<String> = model
        .prunable_conv_ids()
        .iter()
        .map(|s| s.to_string())
        .collect();
    match target {
        "global" => Ok(prunable),
        t if t.starts_with("head.l") => {
            let i: usize = t["head.l".len()..]
                .parse()
                .with_context(|| format!("bad head target `{t}`"))?;
            let layers = vec![format!("head_cls.conv{i}"), format!("head_reg.conv{i}")];
            for l in &layers {
                if !prunable.contains(l) {
                    bail!("target `{t}` refers to `{l}` which is not a prunable layer");
                }
            }
            Ok(layers)
        }
        id if prunable.iter().any(|p| p == id) => Ok(vec![id.to_string()]),
        other => {
            bail!("unknown sweep target `{other}` (prunable layers, head.lN, global, or grid)")
        }
    }
}

/// The standard 9-target protocol: each backbone conv, each head tower
/// depth (both branches), and a global ratio across all prunable layers.
pub fn grid_targets() -> Vec<String> {
    let mut t: Vec<String> = (1..=5).map(|i| format!("backbone.conv{i}")).collect();
    t.extend((1..=3).map(|i| format!("head.l{i}")));
    t.push("global".into());
    t
}

pub fn run_sweep_rows(
    model: &ModelGraph,
    targets: &[String],
    ratios: &[f64],
    frames: usize,
    g: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        bail!("sweep needs at least one ratio");
    }
    for r in ratios {
        if !(*r > 0.0 && *r <= 1.0) {
            bail!("sweep ratios must lie in (0, 1], got {r}");
        }
    }
    let cfg = CalibrationConfig {
        batch_size: g,
        seed,
        ..Default::default()
    };
    let report = calibrate_ranks(model, &cfg)?;
    let mut rows = Vec::new();
    for target in targets {
        let layers = sweep_target_layers(model, target)?;
        for &ratio in ratios {
            let mut keep: BTreeMap<String, f64> = model
                .prunable_conv_ids()
                .iter()
                .map(|id| (id.to_string(), 1.0))
                .collect();
            for l in &layers {
                keep.insert(l.clone(), 1.0 - ratio);
            }
            let plan = make_plan(&report, &keep)?;
            let pruned = prune(model, &plan)?;
            let seq = synthetic_sequence(&pruned.meta, frames, seed);
            let start = Instant::now();
            let (pred, _scores) = synth::track_sequence(&pruned, &seq, EngineConfig::default())?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3 / frames as f64;
            let (p20, _) = prunekit_core::tracker::precision_curve(&pred, &seq.gt)?;
            let auc = prunekit_core::tracker::success_auc(&pred, &seq.gt)?;
            rows.push(SweepRow {
                target: target.clone(),
                prune_ratio: ratio,
                params: param_count(&pruned),
                macs: mac_count(&pruned, (pruned.meta.search_size, pruned.meta.search_size))?,
                median_ms: elapsed_ms,
                precision20: p20,
                auc,
            });
        }
    }
    Ok(rows)
}

pub fn run_sweep(args: &SweepArgs) -> Result<()> {
    let model = load(&args.model)?;
    let mut targets = Vec::new();
    for part in args.target.split(',') {
        let part = part.trim();
        if part == "grid" {
            targets.extend(grid_targets());
        } else {
            targets.push(part.to_string());
        }
    }
    let ratios: Vec<f64> = args
        .ratios
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad ratio `{s}`"))
        })
        .collect::<Result<_>>()?;
    let rows = run_sweep_rows(&model, &targets, &ratios, args.frames, args.g, args.seed)?;
    let mut csv = String::new();
    let _ = writeln!(csv, "# prunekit sweep schema=1");
    let _ = writeln!(
        csv,
        "# model={} frames={} g={} seed={}",
        args.model.display(),
        args.frames,
        args.g,
        args.seed
    );
    let _ = writeln!(
        csv,
        "target,prune_ratio,keep_ratio,params,macs,median_ms,precision20,auc"
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.4},{},{},{:.3},{},{}",
            r.target,
            r.prune_ratio,
            1.0 - r.prune_ratio,
            r.params,
            r.macs,
            r.median_ms,
            r.precision20,
            r.auc
        );
    }
    std::fs::write(&args.out, csv)?;
    println!("wrote {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}

/// Everything `smoke` reports for one run.
pub struct SmokeReport {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f32>,
    pub precision20: f32,
    pub auc: f32,
    pub score_map_pearson: Option<f64>,
}

pub fn run_smoke_report(
    model: &ModelGraph,
    frames: usize,
    seed: u64,
    compare: Option<&ModelGraph>,
) -> Result<SmokeReport> {
    if frames < 1 {
        bail!("smoke needs at least one frame");
    }
    let seq = synthetic_sequence(&model.meta, frames, seed);
    let (pred, frame_scores) = synth::track_sequence(model, &seq, EngineConfig::default())?;
    let size = model.meta.search_size as f32;
    for (b, s) in pred.iter().zip(&frame_scores) {
        if !(b.cx.is_finite() && b.cy.is_finite() && b.w > 0.0 && b.h > 0.0 && s.score.is_finite())
        {
            bail!("pipeline integrity violated: non-finite box or score");
        }
        if b.x1() < -1e-3 || b.y1() < -1e-3 || b.x2() > size + 1e-3 || b.y2() > size + 1e-3 {
            bail!("pipeline integrity violated: box outside image bounds");
        }
    }
    let (p20, _) = prunekit_core::tracker::precision_curve(&pred, &seq.gt)?;
    let auc = prunekit_core::tracker::success_auc(&pred, &seq.gt)?;
    let score_map_pearson = match compare {
        Some(other) => {
            if other.meta != model.meta {
                bail!("compare model has different input geometry");
            }
            let (_, other_scores) = synth::track_sequence(other, &seq, EngineConfig::default())?;
            let a: Vec<f64> = frame_scores
                .iter()
                .flat_map(|f| f.map.iter().copied())
                .collect();
            let b: Vec<f64> = other_scores
                .iter()
                .flat_map(|f| f.map.iter().copied())
                .collect();
            Some(pearson(&a, &b))
        }
        None => None,
    };
    Ok(SmokeReport {
        boxes: pred,
        scores: frame_scores.iter().map(|f| f.score).collect(),
        precision20: p20,
        auc,
        score_map_pearson,
    })
}

pub fn smoke_csv(args_model: &Path, frames: usize, seed: u64, report: &SmokeReport) -> String {
    let mut csv = String::new();
    let _ = writeln!(csv, "# prunekit smoke schema=1");
    let _ = writeln!(
        csv,
        "# model={} frames={frames} seed={seed}",
        args_model.display()
    );
    let _ = writeln!(
        csv,
        "# precision20={} auc={}",
        report.precision20, report.auc
    );
    if let Some(r) = report.score_map_pearson {
        let _ = writeln!(csv, "# score_map_pearson={r}");
    }
    let _ = writeln!(csv, "frame,cx,cy,w,h,score");
    for (i, (b, s)) in report.boxes.iter().zip(&report.scores).enumerate() {
        let _ = writeln!(csv, "{i},{},{},{},{},{}", b.cx, b.cy, b.w, b.h, s);
    }
    csv
}

pub fn run_smoke(args: &SmokeArgs) -> Result<()> {
    let model = load(&args.model)?;
    let compare = match &args.compare_model {
        Some(p) => Some(load(p)?),
        None => None,
    };
    let report = run_smoke_report(&model, args.frames, args.seed, compare.as_ref())?;
    println!(
        "{} frames: precision@20px {}, success AUC {}",
        args.frames, report.precision20, report.auc
    );
    if let Some(r) = report.score_map_pearson {
        println!("score-map Pearson r vs compare model: {r:.4}");
    }
    if let Some(out) = &args.out {
        std::fs::write(out, smoke_csv(&args.model, args.frames, args.seed, &report))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Init(a) => run_init(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Prune(a) => run_prune(a),
        Command::Bench(a) => run_bench(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Smoke(a) => run_smoke(a),
    }
}
