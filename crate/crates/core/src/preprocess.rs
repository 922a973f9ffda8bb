//! Color preprocessing applied to patches before scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::{FeatureChannels, FeatureConfig};
use crate::raster::{replicate_gray, to_luma, ImageBuffer};
use crate::stainnorm::{estimate_stain_profile, normalize, MacenkoParams, StainError, StainProfile};
use crate::tiler::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    Rgb,
    Gray,
    Macenko,
}

impl PreprocessMode {
    pub const ALL: [PreprocessMode; 3] = [PreprocessMode::Rgb, PreprocessMode::Gray, PreprocessMode::Macenko];

    pub fn name(self) -> &'static str {
        match self {
            PreprocessMode::Rgb => "rgb",
            PreprocessMode::Gray => "gray",
            PreprocessMode::Macenko => "macenko",
        }
    }

    /// Baseline feature layout suited to the mode.
    pub fn feature_config(self) -> FeatureConfig {
        let channels = match self {
            PreprocessMode::Gray => FeatureChannels::Luma,
            _ => FeatureChannels::PerChannel,
        };
        FeatureConfig { channels, ..Default::default() }
    }
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PreprocessMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown preprocessing mode {s:?} (expected rgb, gray or macenko)"))
    }
}

/// Where the source stain profile comes from in Macenko mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainEstimation {
    /// Estimated from each patch.
    #[default]
    PerPatch,
    /// Estimated once from the whole region or slide.
    PerRegion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub mode: PreprocessMode,
    pub macenko: MacenkoParams,
    pub reference: StainProfile,
    pub estimation: StainEstimation,
    /// Replicate gray output to three channels.
    pub replicate_gray: bool,
}

impl Preprocessor {
    pub fn new(mode: PreprocessMode) -> Self {
        Preprocessor {
            mode,
            macenko: MacenkoParams::default(),
            reference: StainProfile::default(),
            estimation: StainEstimation::default(),
            replicate_gray: true,
        }
    }

    /// Source profile for a whole region, when the estimation is per region.
    ///
    /// `None` means each patch estimates its own, or the region estimate failed.
    pub fn region_profile(&self, region: &ImageBuffer) -> Option<StainProfile> {
        if self.mode != PreprocessMode::Macenko || self.estimation != StainEstimation::PerRegion {
            return None;
        }
        match estimate_stain_profile(region, &self.macenko) {
            Ok(p) => Some(p),
            Err(e) => {
                log::debug!("region stain estimate failed, falling back to per-patch: {e}");
                None
            }
        }
    }

    /// Preprocesses pixels. Macenko failures (background, flat color) leave
    /// the image unchanged.
    pub fn apply(&self, img: &ImageBuffer, source: Option<&StainProfile>) -> ImageBuffer {
        match self.mode {
            PreprocessMode::Rgb => img.clone(),
            PreprocessMode::Gray => {
                if img.channels() == 1 {
                    return if self.replicate_gray { replicate_gray(img).expect("1 channel") } else { img.clone() };
                }
                let g = to_luma(img).expect("3 channels");
                if self.replicate_gray {
                    replicate_gray(&g).expect("1 channel")
                } else {
                    g
                }
            }
            PreprocessMode::Macenko => match self.macenko_once(img, source) {
                Ok(out) => out,
                Err(e) => {
                    log::debug!("macenko skipped: {e}");
                    img.clone()
                }
            },
        }
    }

    fn macenko_once(&self, img: &ImageBuffer, source: Option<&StainProfile>) -> Result<ImageBuffer, StainError> {
        match source {
            Some(p) => normalize(img, p, &self.reference, &self.macenko),
            None => {
                let p = estimate_stain_profile(img, &self.macenko)?;
                normalize(img, &p, &self.reference, &self.macenko)
            }
        }
    }

    pub fn apply_patch(&self, patch: &Patch, source: Option<&StainProfile>) -> Patch {
        patch.with_pixels(self.apply(&patch.pixels, source))
    }
}
