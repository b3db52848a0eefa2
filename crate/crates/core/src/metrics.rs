//! Evaluation metrics: ROC-AUC via the Mann-Whitney rank statistic,
//! multi-label mean AUC, support-weighted F1 and repetition confidence
//! intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, with ties
/// counted as one half.
///
/// Computed from mid-ranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {bad} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC undefined: labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of positive mid-ranks (1-based)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// Per-class AUCs of a multi-label score matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilabelAuc {
    /// `None` for classes that lack positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: Vec<usize>,
}

/// Unweighted mean AUC over the classes where it is defined. Classes with a
/// single label value are excluded and reported.
pub fn mean_multilabel_auc(scores: &[f64], labels: &[bool], num_classes: usize) -> Result<MultilabelAuc> {
    if num_classes == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(num_classes) {
        return Err(Error::Metric(format!(
            "score matrix of {} values and label matrix of {} values do not form N x {num_classes}",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() / num_classes;
    let mut per_class = Vec::with_capacity(num_classes);
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let s: Vec<f64> = (0..n).map(|i| scores[i * num_classes + c]).collect();
        let l: Vec<bool> = (0..n).map(|i| labels[i * num_classes + c]).collect();
        let pos = l.iter().filter(|&&v| v).count();
        if pos == 0 || pos == n {
            log::debug!("class {c} excluded from mean AUC: single label value");
            excluded.push(c);
            per_class.push(None);
        } else {
            per_class.push(Some(roc_auc(&s, &l)?));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Metric("no class has both positive and negative labels".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MultilabelAuc { per_class, mean, excluded })
}

/// Support-weighted average of per-class F1 scores. A class whose precision
/// or recall is undefined scores 0.
pub fn weighted_f1(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Metric("weighted F1 of empty input".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} targets", predicted.len(), truth.len())));
    }
    if let Some(bad) = predicted.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::Metric(format!("class {bad} out of range 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        pred_count[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let total = truth.len() as f64;
    // 2tp / (predicted + actual) equals 2PR / (P + R) and stays exact when
    // predictions are perfect
    let weighted: f64 = (0..num_classes)
        .filter(|&c| tp[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (pred_count[c] + support[c]) as f64 * support[c] as f64)
        .sum();
    Ok(weighted / total)
}

/// Index of the largest value in each row of an `N x K` matrix.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// `1.96 * s / sqrt(n)`.
    #[default]
    Normal,
    /// Two-sided 95% Student-t quantile with `n - 1` degrees of freedom.
    StudentT,
}

/// Mean and 95% half-width of a set of repetition results.
pub fn confidence_interval(values: &[f64], method: CiMethod) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Metric(format!("confidence interval needs at least 2 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = match method {
        CiMethod::Normal => 1.96,
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| Error::Metric(e.to_string()))?
            .inverse_cdf(0.975),
    };
    Ok((mean, z * var.sqrt() / n.sqrt()))
}

/// Summary of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub weighted_f1: Option<f64>,
}

/// Mean ± half-width over repetitions, labelled with its method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
    pub method: String,
}

impl RepetitionSummary {
    pub fn from_values(values: Vec<f64>, method: CiMethod) -> Result<Self> {
        let (mean, half_width) = if values.len() >= 2 {
            confidence_interval(&values, method)?
        } else if let [v] = values[..] {
            (v, f64::NAN)
        } else {
            return Err(Error::Metric("no repetition values".into()));
        };
        let method = match method {
            CiMethod::Normal => "95% normal approximation over repetitions",
            CiMethod::StudentT => "95% Student-t over repetitions",
        };
        Ok(Self { values, mean, half_width, method: method.into() })
    }
}
