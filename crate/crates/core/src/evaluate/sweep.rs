use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{EvaluationReport, PipelineConfig, ScaledCorpus, ScorerFactory};
use super::split::DatasetSplit;
use super::EvaluateError;
use crate::corpus::Corpus;
use crate::preprocess::PreprocessMode;
use crate::resampler::PatchSpec;

/// The eight patch fields of view explored in the sweep, in µm.
pub const DEFAULT_RESOLUTIONS_UM: [f64; 8] = [300.0, 400.0, 500.0, 600.0, 700.0, 800.0, 900.0, 1000.0];

/// One (φ, mode) cell of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub phi_um: f64,
    pub mode: PreprocessMode,
    pub train_patches: usize,
    pub test_slides: usize,
    pub test_patches: usize,
    pub patch_accuracy: f64,
    pub patch_balanced_accuracy: f64,
    pub slide_accuracy: f64,
    pub slide_balanced_accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
}

impl From<&EvaluationReport> for SweepRow {
    fn from(r: &EvaluationReport) -> Self {
        SweepRow {
            phi_um: r.phi_um,
            mode: r.mode,
            train_patches: r.train_patches,
            test_slides: r.test_slides,
            test_patches: r.test_patches,
            patch_accuracy: r.patch_accuracy,
            patch_balanced_accuracy: r.patch_balanced_accuracy,
            slide_accuracy: r.metrics.accuracy,
            slide_balanced_accuracy: r.metrics.macro_balanced_accuracy,
            macro_sensitivity: r.metrics.macro_sensitivity,
            macro_specificity: r.metrics.macro_specificity,
            macro_f1: r.metrics.macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<EvaluationReport>,
}

/// Runs the pipeline for every (φ, mode) pair, φ-major in the given order.
///
/// Each φ rescales the corpus once; the modes share those regions.
pub fn run_sweep(
    corpus: &Corpus,
    split: &DatasetSplit,
    base: &PipelineConfig,
    resolutions: &[f64],
    modes: &[PreprocessMode],
    factory: &dyn ScorerFactory,
) -> Result<SweepTable, EvaluateError> {
    if resolutions.is_empty() || modes.is_empty() {
        return Err(EvaluateError::EmptyGrid);
    }
    let mut reports = Vec::with_capacity(resolutions.len() * modes.len());
    for &phi in resolutions {
        let spec = PatchSpec { phi_um: phi, ..base.spec }.validated()?;
        let cfg = PipelineConfig { spec, ..base.clone() };
        let scaled = ScaledCorpus::build(corpus, split, &cfg, factory.needs_training())?;
        for &mode in modes {
            let mut cell = cfg.clone();
            cell.preprocessor.mode = mode;
            let outcome = scaled.evaluate(&cell, factory)?;
            log::info!(
                "sweep φ={phi} {mode}: slide accuracy {:.3}, patch accuracy {:.3}",
                outcome.report.metrics.accuracy,
                outcome.report.patch_accuracy
            );
            reports.push(outcome.report);
        }
    }
    Ok(SweepTable { rows: reports.iter().map(SweepRow::from).collect(), reports })
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<(), EvaluateError> {
    let io = |e: csv::Error| EvaluateError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| EvaluateError::Io(e.to_string()))
}

pub fn write_sweep_json(path: impl AsRef<Path>, table: &SweepTable) -> Result<(), EvaluateError> {
    let text = serde_json::to_string_pretty(table).map_err(|e| EvaluateError::Io(e.to_string()))?;
    std::fs::write(path.as_ref(), text).map_err(|e| EvaluateError::Io(e.to_string()))
}
