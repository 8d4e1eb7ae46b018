//! Metrics: AUROC, F1 with validation-optimal thresholding, attention
//! histograms, and the aggregate metric report.
//!
//! AUROC is computed by exact pair counting (the Mann-Whitney statistic),
//! with ties worth half a concordance:
//!
//! ```
//! use smooth_mil::eval::auroc;
//!
//! let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
//! assert!((a - 0.75).abs() < 1e-15);
//! ```

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Confusion counts at a fixed threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Mann-Whitney AUROC: `(concordant + tied/2) / (n_pos * n_neg)`, computed
/// with integer pair counts so the result is exact.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(crate::error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("need at least one positive and one negative".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(crate::error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut concordant: u64 = 0; // positive strictly above negative
    let mut tied: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut p = 0u64;
        let mut q = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        concordant += p * neg_below;
        tied += p * q;
        neg_below += q;
        i = j;
    }
    Ok((2 * concordant + tied) as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    confusion_at(scores, labels, threshold).f1()
}

/// Scans midpoints between consecutive distinct sorted scores plus the two
/// infinite sentinels; returns the F1-maximizing threshold, ties broken
/// toward the larger threshold (fewer predicted positives).
pub fn optimal_threshold_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(crate::error::invalid("scores and labels differ in length"));
    }
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::UndefinedMetric("need at least one positive and one negative".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(crate::error::invalid("NaN score"));
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for w in distinct.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, -1.0);
    for &t in &candidates {
        let f1 = f1_at(scores, labels, t);
        if f1 >= best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// Per-class attention histograms over `[0, 1]`, with per-bag min-max
/// normalization of the raw attention values. Constant-attention bags are
/// mapped to 0.5 and counted in `degenerate_bags`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHistogram {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub degenerate_bags: usize,
}

pub fn attention_histogram(
    bags: &[(Vec<f64>, Vec<u8>)],
    n_bins: usize,
) -> Result<AttentionHistogram> {
    if n_bins == 0 {
        return Err(crate::error::invalid("n_bins must be positive"));
    }
    let mut pos = vec![0.0; n_bins];
    let mut neg = vec![0.0; n_bins];
    let mut degenerate = 0;
    for (f, labels) in bags {
        if f.len() != labels.len() || f.is_empty() {
            return Err(crate::error::invalid("attention/label length mismatch"));
        }
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let constant = hi <= lo;
        if constant {
            degenerate += 1;
        }
        for (&v, &l) in f.iter().zip(labels) {
            let x = if constant { 0.5 } else { (v - lo) / (hi - lo) };
            let bin = ((x * n_bins as f64) as usize).min(n_bins - 1);
            if l == 1 {
                pos[bin] += 1.0;
            } else {
                neg[bin] += 1.0;
            }
        }
    }
    for h in [&mut pos, &mut neg] {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            for v in h.iter_mut() {
                *v /= total;
            }
        }
    }
    Ok(AttentionHistogram {
        positive: pos,
        negative: neg,
        degenerate_bags: degenerate,
    })
}

/// Normalizes one bag's raw attention values to `[0, 1]` by min-max; a
/// constant bag maps to all 0.5.
pub fn normalize_attention(f: &[f64]) -> Vec<f64> {
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; f.len()];
    }
    f.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Aggregate evaluation report, serialized to JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bag_auroc: f64,
    pub bag_f1: f64,
    pub instance_auroc: Option<f64>,
    pub instance_f1: Option<f64>,
    pub chosen_instance_threshold: Option<f64>,
    pub normalized_dirichlet_energy: f64,
    pub bag_confusion: Confusion,
    pub instance_confusion: Option<Confusion>,
}
