//! Evaluation battery: macro/micro F1 and AUC, P@K, MAP, and
//! frequency-bucketed F1.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub struct EvalBatch {
    /// M x C per-document per-code probabilities.
    pub scores: Array2<f64>,
    /// M x C binary ground truth.
    pub labels: Array2<u8>,
    /// Per-code training-set occurrence counts, aligned with the label space.
    pub train_code_frequencies: Vec<usize>,
}

/// Code indices ranked by descending score; ties broken by ascending index.
fn ranked_codes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Mean over documents of |top-k scored codes that are true| / k.
pub fn precision_at_k(scores: &Array2<f64>, labels: &Array2<u8>, k: usize) -> f64 {
    assert_eq!(scores.dim(), labels.dim());
    let (m, c) = scores.dim();
    assert!(k <= c, "k exceeds the number of codes");
    if m == 0 || k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for doc in 0..m {
        let row: Vec<f64> = scores.row(doc).to_vec();
        let ranked = ranked_codes(&row);
        let hits = ranked[..k]
            .iter()
            .filter(|&&code| labels[(doc, code)] == 1)
            .count();
        total += hits as f64 / k as f64;
    }
    total / m as f64
}

/// Binarize at `threshold`, then (macro over codes, micro over all cells).
pub fn f1_scores(scores: &Array2<f64>, labels: &Array2<u8>, threshold: f64) -> (f64, f64) {
    assert_eq!(scores.dim(), labels.dim());
    assert!(threshold > 0.0 && threshold < 1.0);
    let (m, c) = scores.dim();
    let mut tp_total = 0usize;
    let mut fp_total = 0usize;
    let mut fn_total = 0usize;
    let mut macro_sum = 0.0;
    for code in 0..c {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for doc in 0..m {
            let pred = scores[(doc, code)] >= threshold;
            let truth = labels[(doc, code)] == 1;
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_total += tp;
        fp_total += fp;
        fn_total += fn_;
        let denom = 2 * tp + fp + fn_;
        macro_sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    let macro_f1 = if c == 0 { 0.0 } else { macro_sum / c as f64 };
    let denom = 2 * tp_total + fp_total + fn_total;
    let micro_f1 = if denom == 0 {
        0.0
    } else {
        2.0 * tp_total as f64 / denom as f64
    };
    (macro_f1, micro_f1)
}

/// ROC-AUC via the rank statistic with midranks for ties.
fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // midranks over tied score groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1..=j
        for &item in &idx[i..j] {
            if labels[item] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let auc = (rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64);
    Some(auc)
}

/// (macro over labels with at least one positive and one negative, micro over
/// the flattened cells). Macro is `None` when no label is valid.
pub fn auc_scores(scores: &Array2<f64>, labels: &Array2<u8>) -> (Option<f64>, Option<f64>) {
    assert_eq!(scores.dim(), labels.dim());
    let (m, c) = scores.dim();
    let mut macro_sum = 0.0;
    let mut macro_count = 0usize;
    for code in 0..c {
        let col_scores: Vec<f64> = (0..m).map(|doc| scores[(doc, code)]).collect();
        let col_labels: Vec<u8> = (0..m).map(|doc| labels[(doc, code)]).collect();
        if let Some(auc) = roc_auc(&col_scores, &col_labels) {
            macro_sum += auc;
            macro_count += 1;
        }
    }
    let macro_auc = (macro_count > 0).then(|| macro_sum / macro_count as f64);
    let flat_scores: Vec<f64> = scores.iter().cloned().collect();
    let flat_labels: Vec<u8> = labels.iter().cloned().collect();
    let micro_auc = roc_auc(&flat_scores, &flat_labels);
    (macro_auc, micro_auc)
}

/// Instance-wise mean average precision: AP over the code ranking of each
/// document with at least one positive, averaged over such documents.
pub fn mean_average_precision(scores: &Array2<f64>, labels: &Array2<u8>) -> f64 {
    assert_eq!(scores.dim(), labels.dim());
    let (m, _) = scores.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in 0..m {
        let positives = labels.row(doc).iter().filter(|&&y| y == 1).count();
        if positives == 0 {
            continue;
        }
        let row: Vec<f64> = scores.row(doc).to_vec();
        let ranked = ranked_codes(&row);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, &code) in ranked.iter().enumerate() {
            if labels[(doc, code)] == 1 {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        total += ap / positives as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBucket {
    #[serde(rename = ">500")]
    Over500,
    #[serde(rename = "101-500")]
    From101To500,
    #[serde(rename = "51-100")]
    From51To100,
    #[serde(rename = "11-50")]
    From11To50,
    #[serde(rename = "1-10")]
    From1To10,
}

impl FrequencyBucket {
    pub fn of(frequency: usize) -> Option<FrequencyBucket> {
        match frequency {
            0 => None,
            1..=10 => Some(FrequencyBucket::From1To10),
            11..=50 => Some(FrequencyBucket::From11To50),
            51..=100 => Some(FrequencyBucket::From51To100),
            101..=500 => Some(FrequencyBucket::From101To500),
            _ => Some(FrequencyBucket::Over500),
        }
    }

    pub fn all() -> [FrequencyBucket; 5] {
        [
            FrequencyBucket::Over500,
            FrequencyBucket::From101To500,
            FrequencyBucket::From51To100,
            FrequencyBucket::From11To50,
            FrequencyBucket::From1To10,
        ]
    }
}

impl fmt::Display for FrequencyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrequencyBucket::Over500 => ">500",
            FrequencyBucket::From101To500 => "101-500",
            FrequencyBucket::From51To100 => "51-100",
            FrequencyBucket::From11To50 => "11-50",
            FrequencyBucket::From1To10 => "1-10",
        };
        f.write_str(s)
    }
}

/// Micro-F1 within each training-frequency bucket; empty buckets are absent.
pub fn frequency_bucketed_f1(
    scores: &Array2<f64>,
    labels: &Array2<u8>,
    train_code_frequencies: &[usize],
    threshold: f64,
) -> BTreeMap<FrequencyBucket, f64> {
    assert_eq!(scores.ncols(), train_code_frequencies.len());
    let (m, _) = scores.dim();
    let mut out = BTreeMap::new();
    for bucket in FrequencyBucket::all() {
        let cols: Vec<usize> = train_code_frequencies
            .iter()
            .enumerate()
            .filter(|(_, &f)| FrequencyBucket::of(f) == Some(bucket))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            continue;
        }
        let sub_scores = Array2::from_shape_fn((m, cols.len()), |(r, j)| scores[(r, cols[j])]);
        let sub_labels = Array2::from_shape_fn((m, cols.len()), |(r, j)| labels[(r, cols[j])]);
        let (_, micro) = f1_scores(&sub_scores, &sub_labels, threshold);
        out.insert(bucket, micro);
    }
    out
}

/// Everything the evaluation report carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub precision_at: BTreeMap<String, f64>,
    pub map: f64,
    pub bucket_f1: BTreeMap<String, f64>,
    pub threshold: f64,
    pub num_documents: usize,
    pub num_codes: usize,
}

pub const REPORT_K_VALUES: [usize; 3] = [5, 8, 15];

pub fn full_report(batch: &EvalBatch, threshold: f64) -> MetricReport {
    let (macro_f1, micro_f1) = f1_scores(&batch.scores, &batch.labels, threshold);
    let (macro_auc, micro_auc) = auc_scores(&batch.scores, &batch.labels);
    let mut precision_at = BTreeMap::new();
    let c = batch.scores.ncols();
    for k in REPORT_K_VALUES {
        let k_eff = k.min(c);
        if k_eff > 0 {
            precision_at.insert(
                format!("P@{k}"),
                precision_at_k(&batch.scores, &batch.labels, k_eff),
            );
        }
    }
    let bucket_f1 = frequency_bucketed_f1(
        &batch.scores,
        &batch.labels,
        &batch.train_code_frequencies,
        threshold,
    )
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    MetricReport {
        macro_auc,
        micro_auc,
        macro_f1,
        micro_f1,
        precision_at,
        map: mean_average_precision(&batch.scores, &batch.labels),
        bucket_f1,
        threshold,
        num_documents: batch.scores.nrows(),
        num_codes: c,
    }
}
