//! Whole-slide image preprocessing, patch scoring and slide-level evaluation
//! for colorectal polyp dysplasia grading.
//!
//! The crate is organized along the processing chain:
//!
//! * [`annotations`] parses RoI contours and slide metadata.
//! * [`raster`] holds the 8-bit [`raster::ImageBuffer`] and color transforms.
//! * [`resampler`] rescales regions to a physical patch field-of-view.
//! * [`stainnorm`] implements Macenko stain normalization.
//! * [`tiler`] rasterizes RoI masks and extracts sliding-window patches.
//! * [`augment`] provides seeded training-time augmentation.
//! * [`preprocess`] applies the rgb, gray or Macenko input mode to patches.
//! * [`classify`] defines the patch scoring contract and a baseline scorer.
//! * [`aggregate`] turns patch scores into slide verdicts.
//! * [`evaluate`] covers splits, metrics, sweeps and overlays.
//! * [`corpus`] loads slide corpora and generates the synthetic one.
//! * [`config`] is the TOML run configuration.

pub mod aggregate;
pub mod annotations;
pub mod augment;
pub mod classify;
pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod preprocess;
pub mod raster;
pub mod resampler;
pub mod stainnorm;
pub mod tiler;

pub use aggregate::{GroupedClass4, SlideVerdict};
pub use annotations::{Contour, RoIAnnotation, SlideAnnotationSet, SlideMetadata, TissueClass6};
pub use classify::{ClassScores, PatchScorer};
pub use config::RunConfig;
pub use corpus::Corpus;
pub use evaluate::{ConfusionMatrix, MetricsReport};
pub use preprocess::PreprocessMode;
pub use raster::ImageBuffer;
pub use resampler::PatchSpec;
pub use stainnorm::StainProfile;
pub use tiler::Patch;
