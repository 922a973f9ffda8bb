//! `wsi-pipeline` command-line tool.
//!
//! Exit codes: 0 on success, 1 when the configuration or corpus is invalid,
//! 2 on any runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use wsi_pipeline::aggregate::write_verdicts;
use wsi_pipeline::annotations::summarize_dataset;
use wsi_pipeline::classify::{train_baseline, write_scores_csv, BaselineModel, ExternalScorer, ScorerIdentity};
use wsi_pipeline::config::ScorerChoice;
use wsi_pipeline::corpus::{generate_synthetic_corpus, SynthOptions};
use wsi_pipeline::evaluate::{
    preprocess_patches, render_overlay, run_pipeline, run_sweep, score_slide, split_dataset, test_slide_manifest,
    tile_roi, tile_slide, tile_training_set, write_sweep_csv, write_sweep_json, DatasetSplit, OverlayBox, RoiRef,
    ScorerFactory, DEFAULT_RESOLUTIONS_UM,
};
use wsi_pipeline::tiler::{patch_png_path, read_manifest, write_manifest, ManifestRecord, Patch};
use wsi_pipeline::{Corpus, GroupedClass4, ImageBuffer, PatchScorer, PreprocessMode, RunConfig, TissueClass6};

#[derive(Debug, Parser)]
#[command(name = "wsi-pipeline", version, about = "Colorectal polyp WSI preprocessing and dysplasia grading")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preprocessing mode: rgb, gray or macenko.
    #[arg(long, global = true)]
    mode: Option<PreprocessMode>,
    /// Patch field of view in µm.
    #[arg(long, global = true)]
    phi: Option<f64>,
    /// `baseline` or `external:<scores.csv>`.
    #[arg(long, global = true)]
    scorer: Option<ScorerChoice>,
    #[arg(long, global = true)]
    slides_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    annotations_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print results as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Print the effective configuration before running.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the configuration and that every slide decodes.
    Validate,
    /// Dataset composition and the train/test split.
    Summarize,
    /// Write preprocessed patch PNGs and a manifest.
    Tile,
    /// Train the handcrafted-feature baseline on the training RoIs.
    TrainBaseline {
        /// Model path; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score the patches of a manifest with a baseline model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Scores CSV; defaults to `<out>/scores.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Whole-slide inference on one slide with a baseline model.
    InferSlide {
        #[arg(long)]
        slide: String,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train (or load external scores), run inference on the test slides and
    /// report metrics.
    Evaluate,
    /// Evaluate every (φ, mode) pair.
    Sweep {
        /// Comma-separated fields of view in µm.
        #[arg(long = "phis", value_delimiter = ',')]
        phis: Vec<f64>,
        /// Comma-separated preprocessing modes.
        #[arg(long = "modes", value_delimiter = ',')]
        modes: Vec<PreprocessMode>,
    },
    /// Draw per-patch verdicts of one slide onto its rescaled image.
    Overlay {
        #[arg(long)]
        slide: String,
        #[arg(long)]
        model: PathBuf,
        /// PNG path; defaults to `<out>/<slide>_overlay.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// Number of classes, taken in HP, NORM, TA.HG, TA.LG, TVA.HG, TVA.LG order.
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSI_PIPELINE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Invalid(m) | CliError::Runtime(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    if let Some(phi) = g.phi {
        cfg.patch.phi_um = phi;
    }
    if let Some(s) = &g.scorer {
        cfg.scorer = s.clone();
    }
    if let Some(d) = &g.slides_dir {
        cfg.paths.slides_dir = d.clone();
    }
    if let Some(d) = &g.annotations_dir {
        cfg.paths.annotations_dir = d.clone();
    }
    if let Some(d) = &g.out {
        cfg.paths.output_dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.workers {
        if n == 0 {
            return Err(invalid("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    let cfg = load_config(g)?;
    if g.print_config {
        println!("{}", cfg.to_toml());
    }
    match &cli.command {
        Command::Synth { classes, per_class } => synth(g, &cfg, *classes, *per_class),
        Command::Validate => validate(g, &cfg),
        Command::Summarize => summarize(g, &cfg),
        Command::Tile => tile(g, &cfg),
        Command::TrainBaseline { model } => train(g, &cfg, model.as_deref()),
        Command::Score { model, manifest, output } => score(g, &cfg, model, manifest, output.as_deref()),
        Command::InferSlide { slide, model } => infer_slide(g, &cfg, slide, model),
        Command::Evaluate => evaluate(g, &cfg),
        Command::Sweep { phis, modes } => sweep(g, &cfg, phis, modes),
        Command::Overlay { slide, model, output } => overlay(g, &cfg, slide, model, output.as_deref()),
    }
}

/// Validates the config (inputs included) and loads the corpus.
fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate(true).map_err(invalid)?;
    Corpus::load(&cfg.paths.slides_dir, &cfg.paths.annotations_dir).map_err(invalid)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn emit<T: Serialize>(g: &GlobalArgs, value: &T, text: impl FnOnce() -> String) {
    if g.json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
    } else {
        println!("{}", text());
    }
}

fn split_of(cfg: &RunConfig, corpus: &Corpus) -> Result<DatasetSplit> {
    split_dataset(&corpus.annotation_sets(), &cfg.split).map_err(invalid)
}

fn synth(g: &GlobalArgs, cfg: &RunConfig, classes: usize, per_class: usize) -> Result<()> {
    if !(1..=6).contains(&classes) {
        return Err(invalid(format!("--classes {classes} outside 1..=6")));
    }
    let out = output_dir(cfg)?;
    let opts = SynthOptions {
        per_class,
        classes: TissueClass6::ALL[..classes].to_vec(),
        seed: cfg.seed,
        ..SynthOptions::default()
    };
    let corpus = generate_synthetic_corpus(&out, &opts).map_err(|e| match e {
        wsi_pipeline::corpus::CorpusError::InvalidOptions(_) => invalid(e),
        e => runtime(e),
    })?;
    let ids: Vec<&str> = corpus.slides.iter().map(|s| s.slide_id()).collect();
    emit(g, &ids, || format!("wrote {} slides to {}", ids.len(), out.display()));
    Ok(())
}

fn validate(g: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    corpus.slides.par_iter().try_for_each(|s| s.load_image().map(drop)).map_err(invalid)?;
    let rois: usize = corpus.slides.iter().map(|s| s.annotations.rois.len()).sum();
    #[derive(Serialize)]
    struct Report {
        slides: usize,
        rois: usize,
    }
    let r = Report { slides: corpus.slides.len(), rois };
    emit(g, &r, || format!("ok: {} slides, {} RoIs", r.slides, r.rois));
    Ok(())
}

fn summarize(g: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let sets = corpus.annotation_sets();
    let dataset = summarize_dataset(&sets);
    let split = split_of(cfg, &corpus)?;
    let counts = split.summarize(&sets);
    #[derive(Serialize)]
    struct Report<'a> {
        dataset: &'a wsi_pipeline::annotations::DatasetSummary,
        split: &'a wsi_pipeline::evaluate::SplitSummary,
    }
    emit(g, &Report { dataset: &dataset, split: &counts }, || {
        let mut s = format!(
            "{:<8} {:>6} {:>6} {:>9} | {:>11} {:>10} {:>10} {:>8} {:>9}\n",
            "class", "slides", "rois", "area_cm2", "train_slide", "test_slide", "train_roi", "val_roi", "test_roi"
        );
        let row =
            |name: &str, d: &wsi_pipeline::annotations::ClassComposition, c: &wsi_pipeline::evaluate::SplitCounts| {
                format!(
                    "{:<8} {:>6} {:>6} {:>9.4} | {:>11} {:>10} {:>10} {:>8} {:>9}\n",
                    name,
                    d.slides,
                    d.rois,
                    d.area_cm2,
                    c.train_slides,
                    c.test_slides,
                    c.train_rois,
                    c.val_rois,
                    c.test_rois
                )
            };
        for class in TissueClass6::ALL {
            s += &row(&class.to_string(), &dataset.per_class[class.code()], &counts.per_class[class.code()]);
        }
        s += &row("total", &dataset.total, &counts.total);
        s.trim_end().to_string()
    });
    Ok(())
}

fn write_patches(out: &Path, patches: &[Patch], phi: f64, split: &str) -> Result<Vec<ManifestRecord>> {
    patches
        .par_iter()
        .map(|p| {
            let rel = patch_png_path(&p.patch_id());
            let path = out.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
            }
            p.pixels.write_png(&path).map_err(runtime)?;
            Ok(ManifestRecord::for_patch(p, phi, rel, Some(split)))
        })
        .collect()
}

fn tile(g: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let split = split_of(cfg, &corpus)?;
    let pc = cfg.pipeline_config().map_err(invalid)?;
    let out = output_dir(cfg)?;
    let phi = pc.spec.phi_um;

    let mut by_slide: BTreeMap<&str, Vec<(&RoiRef, &str)>> = BTreeMap::new();
    for (refs, name) in [(&split.train_rois, "train"), (&split.val_rois, "val"), (&split.test_rois, "test")] {
        for r in refs {
            by_slide.entry(r.slide_id.as_str()).or_default().push((r, name));
        }
    }
    let mut records = Vec::new();
    for (slide_id, refs) in by_slide {
        let slide = corpus.slide(slide_id).ok_or_else(|| runtime(format!("unknown slide {slide_id}")))?;
        let image = slide.load_image().map_err(runtime)?;
        for (r, name) in refs {
            let roi = slide
                .annotations
                .roi(&r.roi_id)
                .ok_or_else(|| runtime(format!("slide {slide_id}: unknown RoI {}", r.roi_id)))?;
            let (region, raw) = tile_roi(&image, slide.metadata(), roi, &pc.spec).map_err(runtime)?;
            let patches = preprocess_patches(&pc.preprocessor, &region, raw);
            records.extend(write_patches(&out, &patches, phi, name)?);
        }
    }
    for id in &split.test_slides {
        let slide = corpus.slide(id).ok_or_else(|| runtime(format!("unknown slide {id}")))?;
        let image = slide.load_image().map_err(runtime)?;
        let (scaled, raw) = tile_slide(&image, &slide.annotations, &pc.spec, &pc.tissue).map_err(runtime)?;
        let patches = preprocess_patches(&pc.preprocessor, &scaled, raw);
        records.extend(write_patches(&out, &patches, phi, "wsi")?);
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &records).map_err(runtime)?;
    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *per_split.entry(r.split.clone().unwrap_or_default()).or_default() += 1;
    }
    emit(g, &per_split, || {
        let parts: Vec<String> = per_split.iter().map(|(k, v)| format!("{k} {v}")).collect();
        format!("wrote {} patches ({}) and {}", records.len(), parts.join(", "), manifest.display())
    });
    Ok(())
}

fn train(g: &GlobalArgs, cfg: &RunConfig, model_path: Option<&Path>) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let split = split_of(cfg, &corpus)?;
    let pc = cfg.pipeline_config().map_err(invalid)?;
    let patches = tile_training_set(&corpus, &split.train_rois, &pc).map_err(runtime)?;
    let (mut model, report) =
        train_baseline(&patches, cfg.mode.feature_config(), &cfg.focal, &cfg.train).map_err(runtime)?;
    model.phi_um = pc.spec.phi_um;
    model.mode = cfg.mode.name().to_string();
    let path = match model_path {
        Some(p) => p.to_path_buf(),
        None => output_dir(cfg)?.join("model.json"),
    };
    model.save(&path).map_err(runtime)?;
    emit(g, &report, || {
        format!(
            "trained on {} patches ({} sampled), loss {:.4} -> {:.4}; wrote {}",
            patches.len(),
            report.samples,
            report.initial_loss(),
            report.final_loss(),
            path.display()
        )
    });
    Ok(())
}

fn load_model(path: &Path) -> Result<BaselineModel> {
    BaselineModel::load(path).map_err(invalid)
}

fn score(g: &GlobalArgs, cfg: &RunConfig, model: &Path, manifest: &Path, output: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let records = read_manifest(manifest).map_err(invalid)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let scores = records
        .par_iter()
        .map(|r| {
            let pixels = ImageBuffer::read_png(base.join(&r.path)).map_err(runtime)?;
            let patch = Patch {
                pixels,
                slide_id: r.slide_id.clone(),
                roi_id: r.roi_id.clone(),
                origin_px: (r.origin_px[0], r.origin_px[1]),
                origin_nm: (r.origin_nm[0], r.origin_nm[1]),
                label: r.label,
            };
            Ok(model.score(&patch))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => output_dir(cfg)?.join("scores.csv"),
    };
    write_scores_csv(&path, records.iter().map(|r| r.patch_id.as_str()).zip(&scores)).map_err(runtime)?;
    emit(g, &records.len(), || format!("scored {} patches; wrote {}", records.len(), path.display()));
    Ok(())
}

/// Rescaled slide and baseline predictions of one slide.
fn predict_slide(
    cfg: &RunConfig,
    corpus: &Corpus,
    slide_id: &str,
    model: &BaselineModel,
) -> Result<(ImageBuffer, wsi_pipeline::SlideVerdict, Vec<wsi_pipeline::evaluate::PatchPrediction>)> {
    let slide = corpus.slide(slide_id).ok_or_else(|| invalid(format!("slide {slide_id} not in corpus")))?;
    let mut pc = cfg.pipeline_config().map_err(invalid)?;
    if (model.phi_um - pc.spec.phi_um).abs() > 1e-9 {
        log::warn!("model was trained at φ={} µm; using it at φ={} µm", model.phi_um, pc.spec.phi_um);
    }
    if let Ok(mode) = model.mode.parse::<PreprocessMode>() {
        pc.preprocessor.mode = mode;
    }
    let image = slide.load_image().map_err(runtime)?;
    let (scaled, patches) = tile_slide(&image, &slide.annotations, &pc.spec, &pc.tissue).map_err(runtime)?;
    let (verdict, preds) = score_slide(slide_id, &scaled, patches, &pc.preprocessor, model).map_err(runtime)?;
    Ok((scaled, verdict, preds))
}

fn infer_slide(g: &GlobalArgs, cfg: &RunConfig, slide_id: &str, model: &Path) -> Result<()> {
    let model = load_model(model)?;
    let corpus = open_corpus(cfg)?;
    let (_, verdict, _) = predict_slide(cfg, &corpus, slide_id, &model)?;
    emit(g, &verdict, || {
        let scores: Vec<String> =
            GroupedClass4::ALL.iter().zip(verdict.grouped_scores4).map(|(c, s)| format!("{c} {s:.3}")).collect();
        format!("{}: {} ({} patches; {})", verdict.slide_id, verdict.predicted, verdict.n_patches, scores.join(", "))
    });
    Ok(())
}

fn overlay(g: &GlobalArgs, cfg: &RunConfig, slide_id: &str, model: &Path, output: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let corpus = open_corpus(cfg)?;
    let (scaled, verdict, preds) = predict_slide(cfg, &corpus, slide_id, &model)?;
    let boxes: Vec<OverlayBox> = preds
        .iter()
        .map(|p| OverlayBox { origin_px: p.origin_px, class: GroupedClass4::from(p.scores.argmax()) })
        .collect();
    let spec = cfg.patch.validated().map_err(invalid)?;
    let img = render_overlay(&scaled, &boxes, &spec).map_err(runtime)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => output_dir(cfg)?.join(format!("{slide_id}_overlay.png")),
    };
    img.write_png(&path).map_err(runtime)?;
    emit(g, &verdict, || format!("{}: {}; wrote {}", slide_id, verdict.predicted, path.display()));
    Ok(())
}

fn factory(cfg: &RunConfig, corpus: &Corpus, split: &DatasetSplit) -> Result<Box<dyn ScorerFactory>> {
    Ok(match &cfg.scorer {
        ScorerChoice::Baseline => Box::new(cfg.baseline_factory()),
        ScorerChoice::External(path) => {
            let pc = cfg.pipeline_config().map_err(invalid)?;
            let manifest = test_slide_manifest(corpus, split, &pc).map_err(runtime)?;
            let identity =
                ScorerIdentity { name: "external".into(), phi_um: cfg.patch.phi_um, mode: cfg.mode.name().into() };
            Box::new(ExternalScorer::load(path, &manifest, identity).map_err(runtime)?)
        }
    })
}

fn evaluate(g: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let split = split_of(cfg, &corpus)?;
    let pc = cfg.pipeline_config().map_err(invalid)?;
    let factory = factory(cfg, &corpus, &split)?;
    let outcome = run_pipeline(&corpus, &split, &pc, factory.as_ref()).map_err(runtime)?;
    let out = output_dir(cfg)?;
    let report_path = out.join("report.json");
    let text = serde_json::to_string_pretty(&outcome.report).map_err(runtime)?;
    fs::write(&report_path, text).map_err(runtime)?;
    let verdicts: Vec<_> = outcome.slides.iter().map(|s| s.verdict.clone()).collect();
    write_verdicts(out.join("verdicts.jsonl"), &verdicts).map_err(runtime)?;
    let r = &outcome.report;
    emit(g, r, || {
        let mut s = format!(
            "φ={} µm, mode {}, scorer {}: {} test slides, {} patches\n",
            r.phi_um, r.mode, r.scorer.name, r.test_slides, r.test_patches
        );
        s += &format!(
            "slide accuracy {:.3}, balanced {:.3}; patch accuracy {:.3}, balanced {:.3}\n",
            r.metrics.accuracy, r.metrics.macro_balanced_accuracy, r.patch_accuracy, r.patch_balanced_accuracy
        );
        for class in GroupedClass4::ALL {
            let m = r.metrics.class(class);
            s += &format!(
                "  {:<5} sens {:.3} spec {:.3} bacc {:.3} f1 {:.3}\n",
                class.to_string(),
                m.sensitivity,
                m.specificity,
                m.balanced_accuracy,
                m.f1
            );
        }
        s += &format!("wrote {}", report_path.display());
        s
    });
    Ok(())
}

fn sweep(g: &GlobalArgs, cfg: &RunConfig, phis: &[f64], modes: &[PreprocessMode]) -> Result<()> {
    let corpus = open_corpus(cfg)?;
    let split = split_of(cfg, &corpus)?;
    let pc = cfg.pipeline_config().map_err(invalid)?;
    let phis = if phis.is_empty() { DEFAULT_RESOLUTIONS_UM.to_vec() } else { phis.to_vec() };
    let modes = if modes.is_empty() { PreprocessMode::ALL.to_vec() } else { modes.to_vec() };
    for &phi in &phis {
        wsi_pipeline::PatchSpec { phi_um: phi, ..pc.spec }.validated().map_err(invalid)?;
    }
    if matches!(cfg.scorer, ScorerChoice::External(_)) {
        return Err(invalid("sweep needs the baseline scorer; external scores cover a single φ"));
    }
    let table = run_sweep(&corpus, &split, &pc, &phis, &modes, &cfg.baseline_factory()).map_err(runtime)?;
    let out = output_dir(cfg)?;
    write_sweep_csv(out.join("sweep.csv"), &table.rows).map_err(runtime)?;
    write_sweep_json(out.join("sweep.json"), &table).map_err(runtime)?;
    emit(g, &table.rows, || {
        let mut s = format!("{:>6} {:<8} {:>9} {:>9} {:>9}\n", "phi", "mode", "slide_acc", "slide_bacc", "patch_acc");
        for r in &table.rows {
            s += &format!(
                "{:>6} {:<8} {:>9.3} {:>9.3} {:>9.3}\n",
                r.phi_um,
                r.mode.to_string(),
                r.slide_accuracy,
                r.slide_balanced_accuracy,
                r.patch_accuracy
            );
        }
        s += &format!("wrote {}", out.join("sweep.csv").display());
        s
    });
    Ok(())
}
