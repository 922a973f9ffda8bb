use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvaluateError;
use crate::annotations::{SlideAnnotationSet, TissueClass6};
use crate::augment::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction_per_class: f64,
    pub val_rois_per_class: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction_per_class: 0.10, val_rois_per_class: 5, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validated(self) -> Result<Self, String> {
        if !(self.test_fraction_per_class > 0.0 && self.test_fraction_per_class < 1.0) {
            return Err(format!("test_fraction_per_class {} outside (0, 1)", self.test_fraction_per_class));
        }
        Ok(self)
    }
}

/// Most severe RoI class of a slide, ordered
/// TVA.HG > TA.HG > TVA.LG > TA.LG > HP > NORM.
pub fn split_label(set: &SlideAnnotationSet) -> Option<TissueClass6> {
    set.rois.iter().map(|r| r.label).max_by_key(|&c| severity(c))
}

pub(super) fn severity(c: TissueClass6) -> u8 {
    match c {
        TissueClass6::Norm => 0,
        TissueClass6::Hp => 1,
        TissueClass6::TaLg => 2,
        TissueClass6::TvaLg => 3,
        TissueClass6::TaHg => 4,
        TissueClass6::TvaHg => 5,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoiRef {
    pub slide_id: String,
    pub roi_id: String,
    pub label: TissueClass6,
}

/// Slide-level train/test split with validation RoIs drawn from training slides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_slides: Vec<String>,
    pub test_slides: Vec<String>,
    pub train_rois: Vec<RoiRef>,
    pub val_rois: Vec<RoiRef>,
    pub test_rois: Vec<RoiRef>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_slides: usize,
    pub test_slides: usize,
    pub train_rois: usize,
    pub val_rois: usize,
    pub test_rois: usize,
}

/// Per-class split counts; slides are counted under their split label and
/// RoIs under their own label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub per_class: [SplitCounts; 6],
    pub total: SplitCounts,
}

fn rois_of(set: &SlideAnnotationSet) -> impl Iterator<Item = RoiRef> + '_ {
    set.rois.iter().map(|r| RoiRef { slide_id: set.slide_id().to_string(), roi_id: r.roi_id.clone(), label: r.label })
}

impl DatasetSplit {
    /// Builds a split from explicit slide lists and validation RoIs
    /// `(slide_id, roi_id)`.
    pub fn from_lists(
        sets: &[SlideAnnotationSet],
        train_slides: &[String],
        test_slides: &[String],
        val_rois: &[(String, String)],
    ) -> Result<Self, EvaluateError> {
        let train: BTreeSet<&str> = train_slides.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = test_slides.iter().map(String::as_str).collect();
        if let Some(both) = train.intersection(&test).next() {
            return Err(EvaluateError::InvalidSplit(format!("slide {both} is in both train and test")));
        }
        let known: BTreeSet<&str> = sets.iter().map(|s| s.slide_id()).collect();
        if let Some(unknown) = train.iter().chain(&test).find(|id| !known.contains(**id)) {
            return Err(EvaluateError::UnknownSlide(unknown.to_string()));
        }
        let val: BTreeSet<(&str, &str)> = val_rois.iter().map(|(s, r)| (s.as_str(), r.as_str())).collect();
        let mut split = DatasetSplit::default();
        for set in sets {
            let id = set.slide_id();
            if test.contains(id) {
                split.test_slides.push(id.to_string());
                split.test_rois.extend(rois_of(set));
            } else if train.contains(id) {
                split.train_slides.push(id.to_string());
                for roi in rois_of(set) {
                    if val.contains(&(roi.slide_id.as_str(), roi.roi_id.as_str())) {
                        split.val_rois.push(roi);
                    } else {
                        split.train_rois.push(roi);
                    }
                }
            }
        }
        if split.val_rois.len() != val.len() {
            return Err(EvaluateError::InvalidSplit("validation RoIs must come from training slides".into()));
        }
        split.sort();
        Ok(split)
    }

    fn sort(&mut self) {
        self.train_slides.sort();
        self.test_slides.sort();
        self.train_rois.sort();
        self.val_rois.sort();
        self.test_rois.sort();
    }

    pub fn summarize(&self, sets: &[SlideAnnotationSet]) -> SplitSummary {
        let by_id: BTreeMap<&str, &SlideAnnotationSet> = sets.iter().map(|s| (s.slide_id(), s)).collect();
        let mut per_class = [SplitCounts::default(); 6];
        for (ids, is_test) in [(&self.train_slides, false), (&self.test_slides, true)] {
            for id in ids {
                if let Some(label) = by_id.get(id.as_str()).and_then(|s| split_label(s)) {
                    let row = &mut per_class[label.code()];
                    if is_test {
                        row.test_slides += 1;
                    } else {
                        row.train_slides += 1;
                    }
                }
            }
        }
        for r in &self.train_rois {
            per_class[r.label.code()].train_rois += 1;
        }
        for r in &self.val_rois {
            per_class[r.label.code()].val_rois += 1;
        }
        for r in &self.test_rois {
            per_class[r.label.code()].test_rois += 1;
        }
        let total = per_class.iter().fold(SplitCounts::default(), |a, r| SplitCounts {
            train_slides: a.train_slides + r.train_slides,
            test_slides: a.test_slides + r.test_slides,
            train_rois: a.train_rois + r.train_rois,
            val_rois: a.val_rois + r.val_rois,
            test_rois: a.test_rois + r.test_rois,
        });
        SplitSummary { per_class, total }
    }
}

/// Splits slides per class (by [`split_label`]): `ceil(f·n)` slides go to
/// test, at most `n - 1`. Then `val_rois_per_class` RoIs of each class are
/// drawn from the training slides, always leaving one for training.
pub fn split_dataset(sets: &[SlideAnnotationSet], spec: &SplitSpec) -> Result<DatasetSplit, EvaluateError> {
    let spec = spec.validated().map_err(EvaluateError::InvalidSplit)?;
    let mut by_class: BTreeMap<TissueClass6, Vec<&str>> = BTreeMap::new();
    for set in sets {
        match split_label(set) {
            Some(label) => by_class.entry(label).or_default().push(set.slide_id()),
            None => log::warn!("slide {} has no RoIs and is left out of the split", set.slide_id()),
        }
    }
    let mut test = Vec::new();
    for (&class, ids) in &mut by_class {
        let n = ids.len();
        if n < 2 {
            return Err(EvaluateError::ClassTooSmall(class));
        }
        ids.sort_unstable();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, class.code() as u64)));
        let n_test = ((spec.test_fraction_per_class * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        test.extend(ids[..n_test].iter().map(|s| s.to_string()));
    }
    let test_set: BTreeSet<&str> = test.iter().map(String::as_str).collect();
    let train: Vec<String> =
        by_class.values().flatten().filter(|id| !test_set.contains(**id)).map(|s| s.to_string()).collect();

    let train_set: BTreeSet<&str> = train.iter().map(String::as_str).collect();
    let mut candidates: BTreeMap<TissueClass6, Vec<RoiRef>> = BTreeMap::new();
    for set in sets.iter().filter(|s| train_set.contains(s.slide_id())) {
        for roi in rois_of(set) {
            candidates.entry(roi.label).or_default().push(roi);
        }
    }
    let mut val = Vec::new();
    for (&class, rois) in &mut candidates {
        rois.sort();
        rois.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + class.code() as u64)));
        let take = spec.val_rois_per_class.min(rois.len() - 1);
        if take < spec.val_rois_per_class {
            log::warn!("class {class}: only {take} validation RoIs (requested {})", spec.val_rois_per_class);
        }
        val.extend(rois[..take].iter().map(|r| (r.slide_id.clone(), r.roi_id.clone())));
    }
    DatasetSplit::from_lists(sets, &train, &test, &val)
}
