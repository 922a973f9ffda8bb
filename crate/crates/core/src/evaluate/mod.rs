//! Dataset splits, confusion matrices and per-class metrics, plus the
//! end-to-end pipeline, resolution×mode sweeps and verdict overlays.

mod metrics;
mod overlay;
mod pipeline;
mod split;
mod sweep;

pub use metrics::{
    balanced_accuracy, confusion_matrix, per_class_metrics, ClassMetrics, ConfusionMatrix, MetricFlags, MetricsReport,
};
pub use overlay::{class_color, render_overlay, OverlayBox};
pub use pipeline::{
    apply_color_cast, evaluate_predictions, preprocess_patches, run_pipeline, score_slide, slide_ground_truth,
    test_slide_manifest, tile_roi, tile_slide, tile_training_set, BaselineFactory, EvaluationReport, PatchPrediction,
    PipelineConfig, RunOutcome, ScorerFactory, SlideResult, COLOR_CAST_GAINS,
};
pub use split::{split_dataset, split_label, DatasetSplit, RoiRef, SplitCounts, SplitSpec, SplitSummary};
pub use sweep::{run_sweep, write_sweep_csv, write_sweep_json, SweepRow, SweepTable, DEFAULT_RESOLUTIONS_UM};

pub use crate::corpus::generate_synthetic_corpus;

use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::annotations::{AnnotationError, TissueClass6};
use crate::classify::ClassifyError;
use crate::corpus::CorpusError;
use crate::raster::RasterError;
use crate::resampler::ResampleError;
use crate::tiler::TileError;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("class {0} has fewer than 2 slides")]
    ClassTooSmall(TissueClass6),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("patch origin {origin:?} outside the {size:?} slide")]
    OriginOutOfBounds { origin: (usize, usize), size: (usize, usize) },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error("slide {0} not found in corpus")]
    UnknownSlide(String),
    #[error("slide {0}: {1}")]
    Slide(String, String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error("report I/O: {0}")]
    Io(String),
}
