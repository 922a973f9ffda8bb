use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion_matrix, per_class_metrics, ConfusionMatrix, MetricsReport};
use super::split::{severity, DatasetSplit, RoiRef};
use super::EvaluateError;
use crate::aggregate::{GroupedClass4, SlideVerdict};
use crate::annotations::{point_in_roi, RoIAnnotation, SlideAnnotationSet, SlideMetadata, TissueClass6};
use crate::augment::{apply_augmentation, derive_seed, AugmentPolicy};
use crate::classify::{
    train_baseline, ClassScores, ExternalScorer, FocalLossConfig, PatchScorer, ScorerIdentity, TrainOptions,
};
use crate::corpus::Corpus;
use crate::preprocess::{PreprocessMode, Preprocessor};
use crate::raster::{quantize, ImageBuffer};
use crate::resampler::{resize, scaled_len, PatchSpec};
use crate::stainnorm::StainProfile;
use crate::tiler::{
    extract_region, extract_roi_patches, extract_slide_patches, mask_for_window, patch_png_path, roi_window,
    ManifestRecord, Mask, Patch, RegionFrame, TissueFilterParams,
};

/// Channel gains of the color-cast perturbation. They keep the Luma of a
/// neutral gray pixel within 0.02% while shifting its hue.
pub const COLOR_CAST_GAINS: [f64; 3] = [1.12, 0.92, 1.096];

pub fn apply_color_cast(img: &ImageBuffer, gains: [f64; 3]) -> ImageBuffer {
    let c = img.channels() as usize;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = if c == 3 { gains[i % 3] } else { 1.0 };
        *v = quantize(*v as f64 * g);
    }
    out
}

/// Ground truth of a slide: its most severe RoI, HG > LG > HP > NORM.
pub fn slide_ground_truth(set: &SlideAnnotationSet) -> Option<GroupedClass4> {
    let rank = |g: GroupedClass4| match g {
        GroupedClass4::Norm => 0,
        GroupedClass4::Hp => 1,
        GroupedClass4::Lg => 2,
        GroupedClass4::Hg => 3,
    };
    set.rois.iter().map(|r| GroupedClass4::from(r.label)).max_by_key(|&g| rank(g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub spec: PatchSpec,
    pub preprocessor: Preprocessor,
    pub tissue: TissueFilterParams,
    /// Training-time augmentation; `None` trains on the patches as tiled.
    pub augment: Option<AugmentPolicy>,
    pub seed: u64,
    /// Channel gains applied to test slides before inference.
    pub color_cast: Option<[f64; 3]>,
}

impl PipelineConfig {
    pub fn new(spec: PatchSpec, mode: PreprocessMode) -> Self {
        PipelineConfig {
            spec,
            preprocessor: Preprocessor::new(mode),
            tissue: TissueFilterParams::default(),
            augment: None,
            seed: 0,
            color_cast: None,
        }
    }
}

/// Builds a patch scorer for one (φ, mode) cell from its training patches.
pub trait ScorerFactory: Sync {
    fn build(
        &self,
        training: &[Patch],
        spec: &PatchSpec,
        mode: PreprocessMode,
    ) -> Result<Box<dyn PatchScorer>, EvaluateError>;

    /// Whether [`ScorerFactory::build`] looks at the training patches.
    fn needs_training(&self) -> bool {
        true
    }
}

/// Trains the handcrafted-feature baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineFactory {
    pub focal: FocalLossConfig,
    pub train: TrainOptions,
}

impl ScorerFactory for BaselineFactory {
    fn build(
        &self,
        training: &[Patch],
        spec: &PatchSpec,
        mode: PreprocessMode,
    ) -> Result<Box<dyn PatchScorer>, EvaluateError> {
        let (mut model, report) = train_baseline(training, mode.feature_config(), &self.focal, &self.train)?;
        model.phi_um = spec.phi_um;
        model.mode = mode.name().to_string();
        log::info!(
            "baseline φ={} {}: {} samples, loss {:.4} -> {:.4}",
            spec.phi_um,
            mode,
            report.samples,
            report.initial_loss(),
            report.final_loss()
        );
        Ok(Box::new(model))
    }
}

impl ScorerFactory for ExternalScorer {
    fn build(&self, _: &[Patch], _: &PatchSpec, _: PreprocessMode) -> Result<Box<dyn PatchScorer>, EvaluateError> {
        Ok(Box::new(self.clone()))
    }

    fn needs_training(&self) -> bool {
        false
    }
}

/// Tiles one RoI of a slide at `spec`, returning the rescaled region and
/// its raw labeled patches.
pub fn tile_roi(
    slide: &ImageBuffer,
    metadata: &SlideMetadata,
    roi: &RoIAnnotation,
    spec: &PatchSpec,
) -> Result<(ImageBuffer, Vec<Patch>), EvaluateError> {
    let s = spec.scale_for(metadata.mpp)?;
    let window = roi_window(&roi.contour, metadata, s)?;
    let region = extract_region(slide, &window)?;
    let mask = mask_for_window(&roi.contour, metadata, &window);
    let frame = RegionFrame::for_roi(metadata, &window, &roi.roi_id, roi.label);
    let patches = extract_roi_patches(&region, &mask, spec, &frame)?;
    Ok((region, patches))
}

struct ScaledRoi {
    region: ImageBuffer,
    mask: Mask,
    frame: RegionFrame,
}

struct ScaledSlide {
    region: ImageBuffer,
    frame: RegionFrame,
    rois: Vec<RoIAnnotation>,
    truth: Option<GroupedClass4>,
}

impl ScaledSlide {
    fn new(slide: &ImageBuffer, set: &SlideAnnotationSet, spec: &PatchSpec) -> Result<Self, EvaluateError> {
        let m = &set.metadata;
        if (slide.width(), slide.height()) != (m.width_px as usize, m.height_px as usize) {
            return Err(EvaluateError::Slide(
                m.slide_id.clone(),
                format!("image is {}x{}, metadata says {}x{}", slide.width(), slide.height(), m.width_px, m.height_px),
            ));
        }
        let s = spec.scale_for(m.mpp)?;
        let (w, h) = (scaled_len(slide.width(), s), scaled_len(slide.height(), s));
        let region = resize(slide, w, h)?;
        Ok(ScaledSlide {
            frame: RegionFrame::for_slide(m, w, h),
            region,
            rois: set.rois.clone(),
            truth: slide_ground_truth(set),
        })
    }

    /// Tissue patches, labeled by the most severe RoI containing their center.
    fn patches(&self, spec: &PatchSpec, tissue: &TissueFilterParams) -> Vec<Patch> {
        let half = spec.patch_px as f64 / 2.0;
        let mut patches = extract_slide_patches(&self.region, spec, tissue, &self.frame);
        for p in &mut patches {
            let center = (p.origin_nm.0 + half * self.frame.nm_per_px.0, p.origin_nm.1 + half * self.frame.nm_per_px.1);
            p.label = self
                .rois
                .iter()
                .filter(|r| point_in_roi(center, &r.contour))
                .map(|r| r.label)
                .max_by_key(|&c| severity(c));
        }
        patches
    }
}

/// Rescales a whole slide and tiles its tissue. Returns the rescaled slide
/// and raw patches labeled by RoI containment of their centers.
pub fn tile_slide(
    slide: &ImageBuffer,
    set: &SlideAnnotationSet,
    spec: &PatchSpec,
    tissue: &TissueFilterParams,
) -> Result<(ImageBuffer, Vec<Patch>), EvaluateError> {
    let scaled = ScaledSlide::new(slide, set, spec)?;
    let patches = scaled.patches(spec, tissue);
    Ok((scaled.region, patches))
}

fn group_by_slide(rois: &[RoiRef]) -> BTreeMap<&str, Vec<&RoiRef>> {
    let mut out: BTreeMap<&str, Vec<&RoiRef>> = BTreeMap::new();
    for r in rois {
        out.entry(r.slide_id.as_str()).or_default().push(r);
    }
    out
}

fn scale_rois(corpus: &Corpus, rois: &[RoiRef], spec: &PatchSpec) -> Result<Vec<ScaledRoi>, EvaluateError> {
    let mut out = Vec::new();
    for (slide_id, refs) in group_by_slide(rois) {
        let slide = corpus.slide(slide_id).ok_or_else(|| EvaluateError::UnknownSlide(slide_id.to_string()))?;
        let image = slide.load_image()?;
        let m = slide.metadata();
        let s = spec.scale_for(m.mpp)?;
        let scaled: Vec<ScaledRoi> =
            refs.par_iter()
                .map(|r| {
                    let roi = slide.annotations.roi(&r.roi_id).ok_or_else(|| {
                        EvaluateError::Slide(slide_id.to_string(), format!("unknown RoI {:?}", r.roi_id))
                    })?;
                    let window = roi_window(&roi.contour, m, s)?;
                    Ok(ScaledRoi {
                        region: extract_region(&image, &window)?,
                        mask: mask_for_window(&roi.contour, m, &window),
                        frame: RegionFrame::for_roi(m, &window, &roi.roi_id, roi.label),
                    })
                })
                .collect::<Result<_, EvaluateError>>()?;
        out.extend(scaled);
    }
    Ok(out)
}

/// Applies `pre` to patches cut from `region`, estimating the stain profile
/// on the whole region when configured to.
pub fn preprocess_patches(pre: &Preprocessor, region: &ImageBuffer, patches: Vec<Patch>) -> Vec<Patch> {
    let source: Option<StainProfile> = pre.region_profile(region);
    patches.into_par_iter().map(|p| pre.apply_patch(&p, source.as_ref())).collect()
}

fn training_patches(rois: &[ScaledRoi], cfg: &PipelineConfig) -> Result<Vec<Patch>, EvaluateError> {
    let mut out = Vec::new();
    for r in rois {
        let raw = extract_roi_patches(&r.region, &r.mask, &cfg.spec, &r.frame)?;
        let raw: Vec<Patch> = match &cfg.augment {
            Some(policy) => {
                let base = out.len() as u64;
                raw.into_par_iter()
                    .enumerate()
                    .map(|(i, p)| apply_augmentation(&p, policy, derive_seed(cfg.seed, base + i as u64)))
                    .collect()
            }
            None => raw,
        };
        out.extend(preprocess_patches(&cfg.preprocessor, &r.region, raw));
    }
    Ok(out)
}

/// Tiles, augments (if configured) and preprocesses the given training RoIs.
pub fn tile_training_set(corpus: &Corpus, rois: &[RoiRef], cfg: &PipelineConfig) -> Result<Vec<Patch>, EvaluateError> {
    training_patches(&scale_rois(corpus, rois, &cfg.spec)?, cfg)
}

/// Manifest of the whole-slide patches of the test slides (split `wsi`), as
/// an external scorer sees them.
pub fn test_slide_manifest(
    corpus: &Corpus,
    split: &DatasetSplit,
    cfg: &PipelineConfig,
) -> Result<Vec<ManifestRecord>, EvaluateError> {
    let mut records = Vec::new();
    for id in &split.test_slides {
        let slide = corpus.slide(id).ok_or_else(|| EvaluateError::UnknownSlide(id.clone()))?;
        let (_, patches) = tile_slide(&slide.load_image()?, &slide.annotations, &cfg.spec, &cfg.tissue)?;
        records.extend(patches.iter().map(|p| {
            let pid = p.patch_id();
            ManifestRecord::for_patch(p, cfg.spec.phi_um, patch_png_path(&pid), Some("wsi"))
        }));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub patch_id: String,
    pub origin_px: (usize, usize),
    pub origin_nm: (f64, f64),
    pub label: Option<TissueClass6>,
    pub scores: ClassScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub truth: Option<GroupedClass4>,
    pub verdict: SlideVerdict,
    pub patches: Vec<PatchPrediction>,
}

/// Preprocesses and scores raw slide patches, then aggregates a verdict.
pub fn score_slide(
    slide_id: &str,
    region: &ImageBuffer,
    patches: Vec<Patch>,
    pre: &Preprocessor,
    scorer: &dyn PatchScorer,
) -> Result<(SlideVerdict, Vec<PatchPrediction>), EvaluateError> {
    let source = pre.region_profile(region);
    let preds: Vec<PatchPrediction> = patches
        .into_par_iter()
        .map(|p| {
            let p = pre.apply_patch(&p, source.as_ref());
            Ok(PatchPrediction {
                patch_id: p.patch_id(),
                origin_px: p.origin_px,
                origin_nm: p.origin_nm,
                label: p.label,
                scores: scorer.try_score(&p)?,
            })
        })
        .collect::<Result<_, EvaluateError>>()?;
    let scores: Vec<ClassScores> = preds.iter().map(|p| p.scores).collect();
    let verdict = SlideVerdict::from_scores(slide_id, &scores)
        .map_err(|e| EvaluateError::Slide(slide_id.to_string(), e.to_string()))?;
    Ok((verdict, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub phi_um: f64,
    pub mode: PreprocessMode,
    pub scorer: ScorerIdentity,
    pub train_patches: usize,
    pub test_slides: usize,
    pub test_patches: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Six-class argmax accuracy over test patches whose center lies in a RoI.
    pub patch_accuracy: f64,
    /// Mean per-class recall over the same patches.
    pub patch_balanced_accuracy: f64,
    pub labeled_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: EvaluationReport,
    pub slides: Vec<SlideResult>,
}

/// Slide confusion matrix and metrics, plus patch-level accuracy and
/// balanced accuracy. Slides without ground truth are skipped.
pub fn evaluate_predictions(
    slides: &[SlideResult],
) -> Result<(ConfusionMatrix, MetricsReport, f64, f64, usize), EvaluateError> {
    let pairs: Vec<(GroupedClass4, GroupedClass4)> =
        slides.iter().filter_map(|s| s.truth.map(|t| (t, s.verdict.predicted))).collect();
    let cm = confusion_matrix(&pairs);
    let metrics = per_class_metrics(&cm)?;
    let mut hits = [0usize; 6];
    let mut totals = [0usize; 6];
    for p in slides.iter().flat_map(|s| &s.patches) {
        if let Some(label) = p.label {
            totals[label.code()] += 1;
            hits[label.code()] += usize::from(p.scores.argmax() == label);
        }
    }
    let labeled: usize = totals.iter().sum();
    let (acc, bacc) = if labeled == 0 {
        (0.0, 0.0)
    } else {
        let present: Vec<usize> = (0..6).filter(|&k| totals[k] > 0).collect();
        let recall: f64 = present.iter().map(|&k| hits[k] as f64 / totals[k] as f64).sum();
        (hits.iter().sum::<usize>() as f64 / labeled as f64, recall / present.len() as f64)
    };
    Ok((cm, metrics, acc, bacc, labeled))
}

/// Rescaled inputs of one φ, shared by every preprocessing mode.
pub(super) struct ScaledCorpus {
    train: Vec<ScaledRoi>,
    test: Vec<ScaledSlide>,
}

impl ScaledCorpus {
    pub(super) fn build(
        corpus: &Corpus,
        split: &DatasetSplit,
        cfg: &PipelineConfig,
        with_training: bool,
    ) -> Result<Self, EvaluateError> {
        let train = if with_training { scale_rois(corpus, &split.train_rois, &cfg.spec)? } else { Vec::new() };
        let mut test = Vec::with_capacity(split.test_slides.len());
        for id in &split.test_slides {
            let slide = corpus.slide(id).ok_or_else(|| EvaluateError::UnknownSlide(id.clone()))?;
            let mut image = slide.load_image()?;
            if let Some(gains) = cfg.color_cast {
                image = apply_color_cast(&image, gains);
            }
            test.push(ScaledSlide::new(&image, &slide.annotations, &cfg.spec)?);
        }
        Ok(ScaledCorpus { train, test })
    }

    pub(super) fn evaluate(
        &self,
        cfg: &PipelineConfig,
        factory: &dyn ScorerFactory,
    ) -> Result<RunOutcome, EvaluateError> {
        let training = if factory.needs_training() { training_patches(&self.train, cfg)? } else { Vec::new() };
        let mode = cfg.preprocessor.mode;
        let scorer = factory.build(&training, &cfg.spec, mode)?;
        let train_patches = training.len();
        drop(training);

        let slides: Vec<SlideResult> = self
            .test
            .par_iter()
            .map(|t| {
                if t.truth.is_none() {
                    log::warn!("test slide {} has no RoIs; its verdict is not scored", t.frame.slide_id);
                }
                let patches = t.patches(&cfg.spec, &cfg.tissue);
                let (verdict, patches) =
                    score_slide(&t.frame.slide_id, &t.region, patches, &cfg.preprocessor, scorer.as_ref())?;
                Ok(SlideResult { truth: t.truth, verdict, patches })
            })
            .collect::<Result<_, EvaluateError>>()?;
        let (confusion, metrics, patch_accuracy, patch_balanced_accuracy, labeled_patches) =
            evaluate_predictions(&slides)?;
        let report = EvaluationReport {
            phi_um: cfg.spec.phi_um,
            mode,
            scorer: scorer.identity(),
            train_patches,
            test_slides: slides.len(),
            test_patches: slides.iter().map(|s| s.patches.len()).sum(),
            confusion,
            metrics,
            patch_accuracy,
            patch_balanced_accuracy,
            labeled_patches,
        };
        Ok(RunOutcome { report, slides })
    }
}

/// Tiles training RoIs, builds a scorer, runs whole-slide inference on the
/// test slides and evaluates the verdicts.
pub fn run_pipeline(
    corpus: &Corpus,
    split: &DatasetSplit,
    cfg: &PipelineConfig,
    factory: &dyn ScorerFactory,
) -> Result<RunOutcome, EvaluateError> {
    ScaledCorpus::build(corpus, split, cfg, factory.needs_training())?.evaluate(cfg, factory)
}
