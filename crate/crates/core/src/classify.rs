//! Patch scoring: the scorer contract, an α-balanced focal-loss linear
//! baseline over handcrafted features, and the external scores protocol.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::TissueClass6;
use crate::raster::{to_luma, ImageBuffer};
use crate::tiler::{ManifestRecord, Patch};

const K: usize = TissueClass6::COUNT;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("non-finite logits {0:?}")]
    NonFiniteInput(Vec<f64>),
    #[error("class {0} has zero RoIs")]
    ZeroCount(TissueClass6),
    #[error("no training samples for class {0}")]
    MissingClass(TissueClass6),
    #[error("invalid class scores: {0}")]
    InvalidScores(String),
    #[error("no score row for patch {0:?}")]
    MissingPatch(String),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: probabilities sum to {sum}")]
    SumNotOne { line: usize, sum: f64 },
    #[error("feature vector has {got} entries, model expects {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("I/O error: {0}")]
    Io(String),
}

/// Probability vector over the six tissue classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct ClassScores([f64; K]);

impl TryFrom<[f64; 6]> for ClassScores {
    type Error = ClassifyError;
    fn try_from(p: [f64; 6]) -> Result<Self, ClassifyError> {
        ClassScores::new(p)
    }
}

impl From<ClassScores> for [f64; 6] {
    fn from(s: ClassScores) -> Self {
        s.0
    }
}

impl ClassScores {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: [f64; K]) -> Result<Self, ClassifyError> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ClassifyError::InvalidScores(format!("{probs:?} has entries outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(ClassifyError::InvalidScores(format!("{probs:?} sums to {sum}")));
        }
        Ok(ClassScores(probs))
    }

    pub fn one_hot(class: TissueClass6) -> Self {
        let mut p = [0.0; K];
        p[class.code()] = 1.0;
        ClassScores(p)
    }

    pub fn uniform() -> Self {
        ClassScores([1.0 / K as f64; K])
    }

    pub fn probs(&self) -> &[f64; K] {
        &self.0
    }

    pub fn get(&self, class: TissueClass6) -> f64 {
        self.0[class.code()]
    }

    /// Most probable class; ties resolve to the lowest code.
    pub fn argmax(&self) -> TissueClass6 {
        let mut best = 0;
        for k in 1..K {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        TissueClass6::from_code(best).expect("code < 6")
    }
}

/// Who produced a set of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerIdentity {
    pub name: String,
    pub phi_um: f64,
    pub mode: String,
}

/// Anything that maps a patch to class probabilities. Implementations must
/// be deterministic for fixed model state.
pub trait PatchScorer: Send + Sync {
    fn score(&self, patch: &Patch) -> ClassScores;
    fn identity(&self) -> ScorerIdentity;

    /// Like [`PatchScorer::score`], for scorers that can be missing a patch.
    fn try_score(&self, patch: &Patch) -> Result<ClassScores, ClassifyError> {
        Ok(self.score(patch))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64; K]) -> Result<ClassScores, ClassifyError> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(ClassifyError::NonFiniteInput(logits.to_vec()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - m).exp());
    let s: f64 = e.iter().sum();
    Ok(ClassScores(e.map(|v| v / s)))
}

/// Inverse-frequency weights `alpha_t = sum(R) / R_t`.
pub fn class_weights(counts: &[usize; K]) -> Result<[f64; K], ClassifyError> {
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(ClassifyError::ZeroCount(TissueClass6::from_code(k).unwrap()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.map(|c| total as f64 / c as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Per-class weights.
    pub alpha: [f64; K],
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: [1.0; K] }
    }
}

impl FocalLossConfig {
    pub fn cross_entropy() -> Self {
        FocalLossConfig { gamma: 0.0, alpha: [1.0; K] }
    }

    pub fn validated(self) -> Result<Self, String> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma {} must be >= 0", self.gamma));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(format!("alpha {:?} must be positive", self.alpha));
        }
        Ok(self)
    }
}

/// `-alpha_t (1 - p_t)^gamma ln(p_t)` with `p_t` floored at 1e-12.
pub fn focal_loss(scores: &ClassScores, truth: TissueClass6, cfg: &FocalLossConfig) -> f64 {
    let t = truth.code();
    let p = scores.0[t].max(PROB_FLOOR);
    -cfg.alpha[t] * (1.0 - p).powf(cfg.gamma) * p.ln()
}

/// Gradient of [`focal_loss`] with respect to the logits behind `probs`.
pub fn focal_loss_logit_grad(probs: &[f64; K], truth: TissueClass6, cfg: &FocalLossConfig) -> [f64; K] {
    let t = truth.code();
    let p = probs[t];
    if p < PROB_FLOOR {
        return [0.0; K];
    }
    let q = 1.0 - p;
    // dL/dp_t * p_t
    let focus = if cfg.gamma == 0.0 || q == 0.0 { 0.0 } else { cfg.gamma * q.powf(cfg.gamma - 1.0) * p * p.ln() };
    let d = cfg.alpha[t] * (focus - q.powf(cfg.gamma));
    let mut g = [0.0; K];
    for (j, gj) in g.iter_mut().enumerate() {
        let delta = if j == t { 1.0 } else { 0.0 };
        *gj = d * (delta - probs[j]);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChannels {
    /// Features of the Luma plane only.
    Luma,
    /// Features of each RGB channel; single-channel input counts as gray RGB.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub bins: usize,
    pub channels: FeatureChannels,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { bins: 16, channels: FeatureChannels::PerChannel }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        let planes = match self.channels {
            FeatureChannels::Luma => 1,
            FeatureChannels::PerChannel => 3,
        };
        planes * (self.bins + 2) + 2
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation of 8-bit samples, scaled to [0, 1].
fn plane_mean_std(plane: &[u8]) -> (f64, f64) {
    let n = plane.len() as u128;
    let sum = plane.iter().map(|&v| v as u64).sum::<u64>() as u128;
    let sum_sq = plane.iter().map(|&v| (v as u64).pow(2)).sum::<u64>() as u128;
    let var_n2 = n * sum_sq - sum * sum;
    let mean = sum as f64 / n as f64 / 255.0;
    let std = (var_n2 as f64).sqrt() / n as f64 / 255.0;
    (mean, std)
}

/// Handcrafted patch descriptor.
///
/// Per plane: a normalized `bins`-bin intensity histogram, then the mean and
/// (population) standard deviation of intensity scaled to [0, 1]. Finally the
/// mean and standard deviation of the forward-difference gradient magnitude
/// of the intensity plane (Luma for RGB input), also scaled by 1/255.
pub fn extract_features(img: &ImageBuffer, cfg: &FeatureConfig) -> Vec<f64> {
    let gray = if img.channels() == 3 { to_luma(img).expect("3 channels") } else { img.clone() };
    let planes: Vec<Vec<u8>> = match cfg.channels {
        FeatureChannels::Luma => vec![gray.data().to_vec()],
        FeatureChannels::PerChannel if img.channels() == 1 => vec![img.data().to_vec(); 3],
        FeatureChannels::PerChannel => {
            (0..3).map(|c| img.data().iter().skip(c).step_by(3).copied().collect()).collect()
        }
    };
    let mut f = Vec::with_capacity(cfg.dim());
    for plane in &planes {
        let mut counts = [0u32; 256];
        for &v in plane {
            counts[v as usize] += 1;
        }
        let mut hist = vec![0u64; cfg.bins];
        for (v, &c) in counts.iter().enumerate() {
            hist[v * cfg.bins / 256] += c as u64;
        }
        let n = plane.len() as f64;
        f.extend(hist.iter().map(|&h| h as f64 / n));
        let (m, s) = plane_mean_std(plane);
        f.push(m);
        f.push(s);
    }
    let (w, h) = (gray.width(), gray.height());
    let g = gray.data();
    let mut grads = Vec::with_capacity(w.saturating_sub(1) * h.saturating_sub(1));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let v = g[y * w + x] as i32;
            let dx = g[y * w + x + 1] as i32 - v;
            let dy = g[(y + 1) * w + x] as i32 - v;
            grads.push(((dx * dx + dy * dy) as f64).sqrt() / 255.0);
        }
    }
    let (gm, gs) = mean_std(&grads);
    f.push(gm);
    f.push(gs);
    f
}

/// Multinomial linear model over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `K` rows of feature weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; K],
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel { weights: vec![vec![0.0; dim]; K], bias: [0.0; K] }
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn logits(&self, x: &[f64]) -> [f64; K] {
        let mut z = self.bias;
        for (zk, w) in z.iter_mut().zip(&self.weights) {
            *zk += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        z
    }

    pub fn predict(&self, x: &[f64]) -> ClassScores {
        softmax(&self.logits(x)).expect("finite model")
    }

    fn params(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().chain(self.bias).collect()
    }

    fn from_params(dim: usize, p: &[f64]) -> Self {
        let weights = p[..K * dim].chunks(dim).map(<[f64]>::to_vec).collect();
        let mut bias = [0.0; K];
        bias.copy_from_slice(&p[K * dim..]);
        LinearModel { weights, bias }
    }
}

/// Mean focal loss over a labeled feature set and its gradient.
///
/// Samples are accumulated in order, so the result does not depend on the
/// thread count.
pub fn objective(
    model: &LinearModel,
    xs: &[Vec<f64>],
    ys: &[TissueClass6],
    cfg: &FocalLossConfig,
) -> (f64, LinearModel) {
    let dim = model.dim();
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = LinearModel::zeros(dim);
    for (x, &y) in xs.iter().zip(ys) {
        let scores = model.predict(x);
        let gz = focal_loss_logit_grad(scores.probs(), y, cfg);
        for k in 0..K {
            for (gw, xi) in grad.weights[k].iter_mut().zip(x) {
                *gw += gz[k] * xi;
            }
            grad.bias[k] += gz[k];
        }
        loss += focal_loss(&scores, y, cfg);
    }
    grad.weights.iter_mut().flatten().for_each(|g| *g /= n);
    grad.bias.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub step_size: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Seeded subsample cap per class; `None` keeps every sample.
    pub max_samples_per_class: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { step_size: 0.5, epochs: 300, seed: 0, max_samples_per_class: Some(400) }
    }
}

/// Full-batch gradient descent from zero weights.
///
/// An epoch whose step would raise the loss is rejected and the step halved,
/// so the loss sequence never increases.
pub fn fit_linear(
    xs: &[Vec<f64>],
    ys: &[TissueClass6],
    cfg: &FocalLossConfig,
    opt: &TrainOptions,
) -> (LinearModel, Vec<f64>) {
    let dim = xs.first().map_or(0, Vec::len);
    let mut model = LinearModel::zeros(dim);
    let (mut loss, mut grad) = objective(&model, xs, ys, cfg);
    let mut history = vec![loss];
    let mut step = opt.step_size;
    for _ in 0..opt.epochs {
        let params = model.params();
        let g = grad.params();
        let candidate: Vec<f64> = params.iter().zip(&g).map(|(p, gi)| p - step * gi).collect();
        let next = LinearModel::from_params(dim, &candidate);
        let (next_loss, next_grad) = objective(&next, xs, ys, cfg);
        if next_loss <= loss {
            model = next;
            loss = next_loss;
            grad = next_grad;
        } else {
            step *= 0.5;
        }
        history.push(loss);
    }
    (model, history)
}

/// Baseline patch scorer: feature standardization plus a linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub features: FeatureConfig,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub linear: LinearModel,
    pub phi_um: f64,
    pub mode: String,
}

impl BaselineModel {
    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn score_features(&self, raw: &[f64]) -> Result<ClassScores, ClassifyError> {
        if raw.len() != self.feature_mean.len() {
            return Err(ClassifyError::FeatureMismatch { expected: self.feature_mean.len(), got: raw.len() });
        }
        Ok(self.linear.predict(&self.standardize(raw)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifyError> {
        serde_json::from_str(text).map_err(|e| ClassifyError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifyError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ClassifyError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifyError> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| ClassifyError::Io(e.to_string()))
    }
}

impl PatchScorer for BaselineModel {
    fn score(&self, patch: &Patch) -> ClassScores {
        let raw = extract_features(&patch.pixels, &self.features);
        self.score_features(&raw).expect("feature config fixes the dimension")
    }

    fn identity(&self) -> ScorerIdentity {
        ScorerIdentity { name: "baseline".into(), phi_um: self.phi_um, mode: self.mode.clone() }
    }
}

/// Result of [`train_baseline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples: usize,
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().unwrap()
    }
}

/// Trains the baseline on precomputed raw features.
pub fn train_baseline_on_features(
    raw: Vec<Vec<f64>>,
    labels: Vec<TissueClass6>,
    features: FeatureConfig,
    cfg: &FocalLossConfig,
    opt: &TrainOptions,
) -> Result<(BaselineModel, TrainReport), ClassifyError> {
    for class in TissueClass6::ALL {
        if !labels.contains(&class) {
            return Err(ClassifyError::MissingClass(class));
        }
    }
    let (raw, labels) = subsample(raw, labels, opt);
    let dim = features.dim();
    if let Some(bad) = raw.iter().find(|r| r.len() != dim) {
        return Err(ClassifyError::FeatureMismatch { expected: dim, got: bad.len() });
    }
    let n = raw.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in &raw {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; dim];
    for r in &raw {
        scale.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    scale.iter_mut().for_each(|s| *s = if s.sqrt() > 1e-9 { s.sqrt() } else { 1.0 });

    let mut model = BaselineModel {
        features,
        feature_mean: mean,
        feature_scale: scale,
        linear: LinearModel::zeros(dim),
        phi_um: 0.0,
        mode: String::new(),
    };
    let xs: Vec<Vec<f64>> = raw.iter().map(|r| model.standardize(r)).collect();
    let (linear, history) = fit_linear(&xs, &labels, cfg, opt);
    model.linear = linear;
    Ok((model, TrainReport { samples: xs.len(), loss_history: history }))
}

fn subsample(raw: Vec<Vec<f64>>, labels: Vec<TissueClass6>, opt: &TrainOptions) -> (Vec<Vec<f64>>, Vec<TissueClass6>) {
    let Some(cap) = opt.max_samples_per_class else { return (raw, labels) };
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut keep = Vec::new();
    for class in TissueClass6::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
        }
        keep.extend(idx);
    }
    keep.sort_unstable();
    let mut slots: Vec<Option<Vec<f64>>> = raw.into_iter().map(Some).collect();
    let xs = keep.iter().map(|&i| slots[i].take().unwrap()).collect();
    let ys = keep.iter().map(|&i| labels[i]).collect();
    (xs, ys)
}

/// Trains the baseline scorer on labeled patches.
pub fn train_baseline(
    patches: &[Patch],
    features: FeatureConfig,
    cfg: &FocalLossConfig,
    opt: &TrainOptions,
) -> Result<(BaselineModel, TrainReport), ClassifyError> {
    let labels: Vec<TissueClass6> = patches
        .iter()
        .map(|p| p.label.ok_or_else(|| ClassifyError::InvalidScores(format!("patch {} is unlabeled", p.patch_id()))))
        .collect::<Result<_, _>>()?;
    let raw: Vec<Vec<f64>> = patches.par_iter().map(|p| extract_features(&p.pixels, &features)).collect();
    train_baseline_on_features(raw, labels, features, cfg, opt)
}

pub const SCORES_HEADER: [&str; 7] = ["patch_id", "hp", "norm", "ta_hg", "ta_lg", "tva_hg", "tva_lg"];
const LOAD_TOLERANCE: f64 = 1e-4;

/// Reads an external scores CSV and matches it against a manifest.
///
/// Rows must sum to one within 1e-4 and are renormalized. Rows for patches
/// absent from the manifest are ignored.
pub fn external_scores_load(
    path: impl AsRef<Path>,
    manifest: &[ManifestRecord],
) -> Result<BTreeMap<String, ClassScores>, ClassifyError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ClassifyError::Io(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| ClassifyError::MalformedRow { line: 1, reason: e.to_string() })?;
    if header.iter().map(str::trim).ne(SCORES_HEADER) {
        return Err(ClassifyError::MalformedRow { line: 1, reason: format!("header {header:?}") });
    }
    let wanted: HashSet<&str> = manifest.iter().map(|r| r.patch_id.as_str()).collect();
    let mut rows = BTreeMap::new();
    let mut extra = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| ClassifyError::MalformedRow { line, reason: e.to_string() })?;
        if record.len() != SCORES_HEADER.len() {
            return Err(ClassifyError::MalformedRow { line, reason: format!("{} fields", record.len()) });
        }
        let id = record[0].trim().to_string();
        let mut p = [0.0; K];
        for (k, slot) in p.iter_mut().enumerate() {
            let field = record[k + 1].trim();
            *slot =
                field.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0).ok_or_else(|| {
                    ClassifyError::MalformedRow { line, reason: format!("bad probability {field:?}") }
                })?;
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > LOAD_TOLERANCE {
            return Err(ClassifyError::SumNotOne { line, sum });
        }
        if !wanted.contains(id.as_str()) {
            extra += 1;
            continue;
        }
        let scores = ClassScores::new(p.map(|v| v / sum))?;
        if rows.insert(id.clone(), scores).is_some() {
            return Err(ClassifyError::MalformedRow { line, reason: format!("duplicate patch id {id:?}") });
        }
    }
    if extra > 0 {
        log::warn!("{}: ignored {extra} rows for patches not in the manifest", path.display());
    }
    if let Some(missing) = manifest.iter().find(|r| !rows.contains_key(&r.patch_id)) {
        return Err(ClassifyError::MissingPatch(missing.patch_id.clone()));
    }
    Ok(rows)
}

/// Scores precomputed by an external model, looked up by patch id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScorer {
    pub scores: BTreeMap<String, ClassScores>,
    pub identity: ScorerIdentity,
}

impl ExternalScorer {
    pub fn load(
        path: impl AsRef<Path>,
        manifest: &[ManifestRecord],
        identity: ScorerIdentity,
    ) -> Result<Self, ClassifyError> {
        Ok(ExternalScorer { scores: external_scores_load(path, manifest)?, identity })
    }
}

impl PatchScorer for ExternalScorer {
    /// Unknown patches score uniform; use `try_score` to detect them.
    fn score(&self, patch: &Patch) -> ClassScores {
        self.try_score(patch).unwrap_or_else(|e| {
            log::warn!("{e}");
            ClassScores::uniform()
        })
    }

    fn identity(&self) -> ScorerIdentity {
        self.identity.clone()
    }

    fn try_score(&self, patch: &Patch) -> Result<ClassScores, ClassifyError> {
        let id = patch.patch_id();
        self.scores.get(&id).copied().ok_or(ClassifyError::MissingPatch(id))
    }
}

/// Writes scores in the external scores CSV layout.
pub fn write_scores_csv<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, &'a ClassScores)>,
) -> Result<(), ClassifyError> {
    let io = |e: csv::Error| ClassifyError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(io)?;
    w.write_record(SCORES_HEADER).map_err(io)?;
    for (id, s) in rows {
        let mut rec = vec![id.to_string()];
        rec.extend(s.probs().iter().map(|p| format!("{p}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| ClassifyError::Io(e.to_string()))
}
