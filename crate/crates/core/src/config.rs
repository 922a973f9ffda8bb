//! Run configuration, stored as TOML with one section per component.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::classify::{FocalLossConfig, TrainOptions};
use crate::evaluate::{BaselineFactory, PipelineConfig, SplitSpec};
use crate::preprocess::{PreprocessMode, Preprocessor, StainEstimation};
use crate::resampler::PatchSpec;
use crate::stainnorm::{MacenkoParams, StainProfile};
use crate::tiler::TissueFilterParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid(msg.into())
}

/// Which patch scorer produces the scores.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ScorerChoice {
    #[default]
    Baseline,
    /// Scores CSV written by an external model.
    External(PathBuf),
}

impl fmt::Display for ScorerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerChoice::Baseline => f.write_str("baseline"),
            ScorerChoice::External(p) => write!(f, "external:{}", p.display()),
        }
    }
}

impl FromStr for ScorerChoice {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "baseline" => Ok(ScorerChoice::Baseline),
            Some(("external", path)) if !path.is_empty() => Ok(ScorerChoice::External(PathBuf::from(path))),
            _ => Err(invalid(format!("scorer {s:?} is neither \"baseline\" nor \"external:<path>\""))),
        }
    }
}

impl Serialize for ScorerChoice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScorerChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub slides_dir: PathBuf,
    pub annotations_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            slides_dir: PathBuf::from("corpus/slides"),
            annotations_dir: PathBuf::from("corpus/annotations"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacenkoConfig {
    pub io: f64,
    pub beta: f64,
    pub alpha: f64,
    pub conc_percentile: f64,
    pub estimation: StainEstimation,
    /// Reference profile JSON; the built-in H&E reference when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_profile: Option<PathBuf>,
}

impl Default for MacenkoConfig {
    fn default() -> Self {
        let p = MacenkoParams::default();
        MacenkoConfig {
            io: p.io,
            beta: p.beta,
            alpha: p.alpha,
            conc_percentile: p.conc_percentile,
            estimation: StainEstimation::default(),
            reference_profile: None,
        }
    }
}

impl MacenkoConfig {
    pub fn params(&self) -> MacenkoParams {
        MacenkoParams { io: self.io, beta: self.beta, alpha: self.alpha, conc_percentile: self.conc_percentile }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub policy: AugmentPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: PreprocessMode,
    pub scorer: ScorerChoice,
    /// Feed gray patches to the scorer as three identical channels.
    pub replicate_gray: bool,
    pub paths: PathsConfig,
    pub patch: PatchSpec,
    pub tissue: TissueFilterParams,
    pub macenko: MacenkoConfig,
    pub augment: AugmentConfig,
    pub focal: FocalLossConfig,
    pub train: TrainOptions,
    pub split: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: PreprocessMode::Gray,
            scorer: ScorerChoice::Baseline,
            replicate_gray: true,
            paths: PathsConfig::default(),
            patch: PatchSpec::default(),
            tissue: TissueFilterParams::default(),
            macenko: MacenkoConfig::default(),
            augment: AugmentConfig::default(),
            focal: FocalLossConfig::default(),
            train: TrainOptions::default(),
            split: SplitSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges and, when `check_inputs` is set, that the corpus
    /// directories and every referenced file exist.
    pub fn validate(&self, check_inputs: bool) -> Result<(), ConfigError> {
        self.patch.validated().map_err(|e| invalid(e.to_string()))?;
        self.tissue.validated().map_err(|e| invalid(format!("tissue: {e}")))?;
        self.macenko.params().validated().map_err(|e| invalid(e.to_string()))?;
        self.augment.policy.clone().validated().map_err(|e| invalid(format!("augment: {e}")))?;
        self.focal.validated().map_err(|e| invalid(format!("focal: {e}")))?;
        self.split.validated().map_err(|e| invalid(format!("split: {e}")))?;
        if !(self.train.step_size > 0.0 && self.train.step_size.is_finite()) || self.train.epochs == 0 {
            return Err(invalid(format!(
                "train: step_size {} must be positive and epochs {} at least 1",
                self.train.step_size, self.train.epochs
            )));
        }
        if self.train.max_samples_per_class == Some(0) {
            return Err(invalid("train: max_samples_per_class must be at least 1"));
        }
        if let Some(p) = &self.macenko.reference_profile {
            StainProfile::load(p).map_err(|e| invalid(format!("reference profile: {e}")))?;
        }
        if check_inputs {
            for (name, dir) in
                [("slides_dir", &self.paths.slides_dir), ("annotations_dir", &self.paths.annotations_dir)]
            {
                if !dir.is_dir() {
                    return Err(invalid(format!("paths.{name} {} is not a directory", dir.display())));
                }
            }
            if let ScorerChoice::External(p) = &self.scorer {
                if !p.is_file() {
                    return Err(invalid(format!("external scores file {} not found", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn reference_profile(&self) -> Result<StainProfile, ConfigError> {
        match &self.macenko.reference_profile {
            Some(p) => StainProfile::load(p).map_err(|e| invalid(format!("reference profile: {e}"))),
            None => Ok(StainProfile::default()),
        }
    }

    pub fn preprocessor(&self, mode: PreprocessMode) -> Result<Preprocessor, ConfigError> {
        Ok(Preprocessor {
            mode,
            macenko: self.macenko.params(),
            reference: self.reference_profile()?,
            estimation: self.macenko.estimation,
            replicate_gray: self.replicate_gray,
        })
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        Ok(PipelineConfig {
            spec: self.patch.validated().map_err(|e| invalid(e.to_string()))?,
            preprocessor: self.preprocessor(self.mode)?,
            tissue: self.tissue,
            augment: self.augment.enabled.then(|| self.augment.policy.clone()),
            seed: self.seed,
            color_cast: None,
        })
    }

    pub fn baseline_factory(&self) -> BaselineFactory {
        BaselineFactory { focal: self.focal, train: self.train }
    }
}
