//! Slide-level aggregation of patch scores and hierarchical class grouping.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotations::TissueClass6;
use crate::classify::ClassScores;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("slide has no scored patches")]
    EmptySlide,
    #[error("verdict I/O: {0}")]
    Io(String),
}

/// Evaluation classes: adenomas merged by dysplasia grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupedClass4 {
    Hp = 0,
    Norm = 1,
    Hg = 2,
    Lg = 3,
}

impl GroupedClass4 {
    pub const COUNT: usize = 4;
    pub const ALL: [GroupedClass4; 4] = [GroupedClass4::Hp, GroupedClass4::Norm, GroupedClass4::Hg, GroupedClass4::Lg];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupedClass4::Hp => "HP",
            GroupedClass4::Norm => "NORM",
            GroupedClass4::Hg => "HG",
            GroupedClass4::Lg => "LG",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl From<TissueClass6> for GroupedClass4 {
    fn from(c: TissueClass6) -> Self {
        match c {
            TissueClass6::Hp => GroupedClass4::Hp,
            TissueClass6::Norm => GroupedClass4::Norm,
            TissueClass6::TaHg | TissueClass6::TvaHg => GroupedClass4::Hg,
            TissueClass6::TaLg | TissueClass6::TvaLg => GroupedClass4::Lg,
        }
    }
}

impl fmt::Display for GroupedClass4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for GroupedClass4 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for GroupedClass4 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown grouped class {s:?}")))
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Per-class arithmetic mean of patch scores.
///
/// Each class column is sorted before compensated summation, so the result
/// is bit-identical for any ordering or partitioning of the input.
pub fn aggregate_slide(scores: &[ClassScores]) -> Result<[f64; 6], AggregateError> {
    if scores.is_empty() {
        return Err(AggregateError::EmptySlide);
    }
    let n = scores.len() as f64;
    let mut mean = [0.0; 6];
    let mut column = Vec::with_capacity(scores.len());
    for (k, slot) in mean.iter_mut().enumerate() {
        column.clear();
        column.extend(scores.iter().map(|s| s.probs()[k]));
        column.sort_by(f64::total_cmp);
        *slot = compensated_sum(column.iter().copied()) / n;
    }
    Ok(mean)
}

/// Sums subclass probabilities into the four grouped classes.
pub fn group_scores(mean6: &[f64; 6]) -> [f64; 4] {
    let mut g = [0.0; 4];
    for class in TissueClass6::ALL {
        g[GroupedClass4::from(class).code()] += mean6[class.code()];
    }
    g
}

/// Argmax with ties going to the lowest class code.
pub fn verdict(grouped4: &[f64; 4]) -> GroupedClass4 {
    let mut best = 0;
    for k in 1..4 {
        if grouped4[k] > grouped4[best] {
            best = k;
        }
    }
    GroupedClass4::from_code(best).expect("code < 4")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideVerdict {
    pub slide_id: String,
    pub n_patches: usize,
    pub mean_scores6: [f64; 6],
    pub grouped_scores4: [f64; 4],
    pub predicted: GroupedClass4,
}

impl SlideVerdict {
    pub fn from_scores(slide_id: impl Into<String>, scores: &[ClassScores]) -> Result<Self, AggregateError> {
        let mean6 = aggregate_slide(scores)?;
        let grouped = group_scores(&mean6);
        Ok(SlideVerdict {
            slide_id: slide_id.into(),
            n_patches: scores.len(),
            mean_scores6: mean6,
            grouped_scores4: grouped,
            predicted: verdict(&grouped),
        })
    }
}

pub fn write_verdicts(path: impl AsRef<Path>, verdicts: &[SlideVerdict]) -> Result<(), AggregateError> {
    let mut out = Vec::new();
    for v in verdicts {
        serde_json::to_writer(&mut out, v).map_err(|e| AggregateError::Io(e.to_string()))?;
        out.write_all(b"\n").expect("vec write");
    }
    std::fs::write(path.as_ref(), out).map_err(|e| AggregateError::Io(e.to_string()))
}

pub fn read_verdicts(path: impl AsRef<Path>) -> Result<Vec<SlideVerdict>, AggregateError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| AggregateError::Io(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| AggregateError::Io(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_is_total_and_surjective() {
        let mapped: std::collections::HashSet<_> = TissueClass6::ALL.iter().map(|&c| GroupedClass4::from(c)).collect();
        assert_eq!(mapped.len(), 4);
    }

    #[test]
    fn single_and_pair_means() {
        let s = ClassScores::new([0.1, 0.2, 0.3, 0.1, 0.2, 0.1]).unwrap();
        assert_eq!(aggregate_slide(&[s]).unwrap(), *s.probs());
        let m = aggregate_slide(&[ClassScores::one_hot(TissueClass6::Hp), ClassScores::one_hot(TissueClass6::Norm)])
            .unwrap();
        assert_eq!(m, [0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(aggregate_slide(&[]).unwrap_err(), AggregateError::EmptySlide);
    }

    #[test]
    fn grouping_rules() {
        assert_eq!(group_scores(&[0.0, 0.0, 0.3, 0.0, 0.2, 0.0]), [0.0, 0.0, 0.5, 0.0]);
        let g = group_scores(&[1.0 / 6.0; 6]);
        assert_eq!(g[0], 1.0 / 6.0);
        assert_eq!(g[1], 1.0 / 6.0);
        assert!((g[2] - 1.0 / 3.0).abs() < 1e-16 && (g[3] - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(group_scores(ClassScores::one_hot(TissueClass6::TvaLg).probs()), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(verdict(&[0.1, 0.1, 0.6, 0.2]), GroupedClass4::Hg);
        assert_eq!(verdict(&[0.25; 4]), GroupedClass4::Hp);
        assert_eq!(verdict(&[0.0, 1.0, 0.0, 0.0]), GroupedClass4::Norm);
    }

    #[test]
    fn verdicts_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = SlideVerdict::from_scores("s1", &[ClassScores::one_hot(TissueClass6::TaHg)]).unwrap();
        let path = dir.path().join("v.jsonl");
        write_verdicts(&path, std::slice::from_ref(&v)).unwrap();
        assert_eq!(read_verdicts(&path).unwrap(), vec![v]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"predicted\":\"HG\""));
    }
}
