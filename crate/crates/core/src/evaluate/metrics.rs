use serde::{Deserialize, Serialize};

use super::EvaluateError;
use crate::aggregate::GroupedClass4;

const N: usize = GroupedClass4::COUNT;

/// 4×4 slide-verdict confusion matrix; rows are ground truth, columns are
/// predictions, both in HP, NORM, HG, LG order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N]; N],
    pub row_normalized: [[f64; N]; N],
    /// Rows without any ground-truth sample (normalized to all zeros).
    pub zero_rows: [bool; N],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; N]; N]) -> Self {
        let mut row_normalized = [[0.0; N]; N];
        let mut zero_rows = [false; N];
        for (r, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                zero_rows[r] = true;
            } else {
                for (c, &v) in row.iter().enumerate() {
                    row_normalized[r][c] = v as f64 / total as f64;
                }
            }
        }
        ConfusionMatrix { counts, row_normalized, zero_rows }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..N).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(pairs: &[(GroupedClass4, GroupedClass4)]) -> ConfusionMatrix {
    let mut counts = [[0u64; N]; N];
    for &(truth, pred) in pairs {
        counts[truth.code()][pred.code()] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// Metrics whose denominator was zero; they are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: GroupedClass4,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub flags: MetricFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_balanced_accuracy: f64,
    pub macro_f1: f64,
    /// Plain accuracy over all samples.
    pub accuracy: f64,
    pub samples: u64,
}

impl MetricsReport {
    pub fn class(&self, class: GroupedClass4) -> &ClassMetrics {
        &self.per_class[class.code()]
    }
}

pub fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity + specificity) / 2.0
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// One-vs-rest metrics for each grouped class.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvaluateError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvaluateError::NoSamples);
    }
    let per_class: Vec<ClassMetrics> = GroupedClass4::ALL
        .iter()
        .map(|&class| {
            let k = class.code();
            let tp = cm.counts[k][k];
            let fn_ = cm.counts[k].iter().sum::<u64>() - tp;
            let fp = (0..N).map(|r| cm.counts[r][k]).sum::<u64>() - tp;
            let tn = total - tp - fn_ - fp;
            let (sensitivity, su) = ratio(tp, tp + fn_);
            let (specificity, pu) = ratio(tn, tn + fp);
            let (f1, fu) = ratio(2 * tp, 2 * tp + fp + fn_);
            ClassMetrics {
                class,
                tp,
                fp,
                fn_,
                tn,
                sensitivity,
                specificity,
                balanced_accuracy: balanced_accuracy(sensitivity, specificity),
                f1,
                flags: MetricFlags { sensitivity_undefined: su, specificity_undefined: pu, f1_undefined: fu },
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / N as f64;
    Ok(MetricsReport {
        macro_sensitivity: mean(|m| m.sensitivity),
        macro_specificity: mean(|m| m.specificity),
        macro_balanced_accuracy: mean(|m| m.balanced_accuracy),
        macro_f1: mean(|m| m.f1),
        accuracy: cm.correct() as f64 / total as f64,
        samples: total,
        per_class,
    })
}
