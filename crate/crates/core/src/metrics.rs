//! Multi-label evaluation: mAP and thresholded precision/recall/F1.
//!
//! AP is the non-interpolated mean of precision at the rank of every positive,
//! with ties in score broken by ascending sample index. All reported values are
//! percentages.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 3;

/// Scores and labels for `n` samples over `c` classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    n: usize,
    c: usize,
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl EvalTable {
    pub fn new(n: usize, c: usize, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(Error::Shape(format!("evaluation table {n}x{c} is empty")));
        }
        if scores.len() != n * c || labels.len() != n * c {
            return Err(Error::Shape(format!(
                "{}x{} table given {} scores and {} labels",
                n,
                c,
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Shape(format!("non-finite score {s}")));
        }
        Ok(Self {
            n,
            c,
            scores,
            labels,
        })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn score(&self, i: usize, k: usize) -> f64 {
        self.scores[i * self.c + k]
    }

    pub fn label(&self, i: usize, k: usize) -> bool {
        self.labels[i * self.c + k]
    }

    pub fn class_scores(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.score(i, k)).collect()
    }

    pub fn class_labels(&self, k: usize) -> Vec<bool> {
        (0..self.n).map(|i| self.label(i, k)).collect()
    }

    /// Keeps only the listed classes, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut scores = Vec::with_capacity(self.n * classes.len());
        let mut labels = Vec::with_capacity(self.n * classes.len());
        for i in 0..self.n {
            for &k in classes {
                if k >= self.c {
                    return Err(Error::Shape(format!("class {k} out of range")));
                }
                scores.push(self.score(i, k));
                labels.push(self.label(i, k));
            }
        }
        Self::new(self.n, classes.len(), scores, labels)
    }

    /// Keeps only the listed samples, in the given order.
    pub fn select_samples(&self, samples: &[usize]) -> Result<Self> {
        let mut scores = Vec::with_capacity(samples.len() * self.c);
        let mut labels = Vec::with_capacity(samples.len() * self.c);
        for &i in samples {
            if i >= self.n {
                return Err(Error::Shape(format!("sample {i} out of range")));
            }
            scores.extend_from_slice(&self.scores[i * self.c..(i + 1) * self.c]);
            labels.extend_from_slice(&self.labels[i * self.c..(i + 1) * self.c]);
        }
        Self::new(samples.len(), self.c, scores, labels)
    }
}

/// Average precision of one class as a fraction.
pub fn average_precision(scores: &[f64], labels: &[bool], class: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::NoPositives { class });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-class AP; `None` for classes without positives.
pub fn per_class_ap(table: &EvalTable) -> Vec<Option<f64>> {
    (0..table.c)
        .into_par_iter()
        .map(|k| average_precision(&table.class_scores(k), &table.class_labels(k), k).ok())
        .collect()
}

/// Mean AP over classes with at least one positive, in percent.
pub fn map_score(table: &EvalTable) -> Result<f64> {
    mean_ap(&per_class_ap(table))
}

fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let scored: Vec<f64> = aps.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoScorableClasses);
    }
    Ok(100.0 * scored.iter().sum::<f64>() / scored.len() as f64)
}

/// How a top-k restriction combines with the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    /// Positive iff among the sample's top-k scores and above the threshold.
    #[default]
    ThresholdAndTopK,
    /// Positive iff among the sample's top-k scores.
    TopKOnly,
}

/// Precision/recall/F1 in percent, per-class averaged (`c*`) and pooled (`o*`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Binary decisions for every cell of `table`.
pub fn predictions(
    table: &EvalTable,
    threshold: f64,
    top_k: Option<usize>,
    mode: TopKMode,
) -> Vec<bool> {
    let mut out = vec![false; table.n * table.c];
    for i in 0..table.n {
        let row = &table.scores[i * table.c..(i + 1) * table.c];
        let eligible: Vec<bool> = match top_k {
            Some(k) if k < table.c => {
                let mut order: Vec<usize> = (0..table.c).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                let mut e = vec![false; table.c];
                for &j in &order[..k] {
                    e[j] = true;
                }
                e
            }
            _ => vec![true; table.c],
        };
        for k in 0..table.c {
            let above = row[k] > threshold;
            out[i * table.c + k] = match (top_k.is_some(), mode) {
                (true, TopKMode::TopKOnly) => eligible[k],
                _ => eligible[k] && above,
            };
        }
    }
    out
}

/// Thresholded metrics, optionally restricted to each sample's top-k classes.
///
/// A class with no predicted positives has precision 0; one with no labelled
/// positives has recall 0.
pub fn prf_suite(
    table: &EvalTable,
    threshold: f64,
    top_k: Option<usize>,
    mode: TopKMode,
) -> Result<PrfScores> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} is outside (0, 1)")));
    }
    let pred = predictions(table, threshold, top_k, mode);
    let mut tp = vec![0usize; table.c];
    let mut npred = vec![0usize; table.c];
    let mut ngt = vec![0usize; table.c];
    for i in 0..table.n {
        for k in 0..table.c {
            let p = pred[i * table.c + k];
            let y = table.label(i, k);
            tp[k] += (p && y) as usize;
            npred[k] += p as usize;
            ngt[k] += y as usize;
        }
    }
    let c = table.c as f64;
    let cp = (0..table.c).map(|k| ratio(tp[k], npred[k])).sum::<f64>() / c;
    let cr = (0..table.c).map(|k| ratio(tp[k], ngt[k])).sum::<f64>() / c;
    let (tp_all, pred_all, gt_all) = (
        tp.iter().sum::<usize>(),
        npred.iter().sum::<usize>(),
        ngt.iter().sum::<usize>(),
    );
    let op = ratio(tp_all, pred_all);
    let or_ = ratio(tp_all, gt_all);
    Ok(PrfScores {
        cp: 100.0 * cp,
        cr: 100.0 * cr,
        cf1: 100.0 * f1(cp, cr),
        op: 100.0 * op,
        or_: 100.0 * or_,
        of1: 100.0 * f1(op, or_),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub all: PrfScores,
    pub top3: PrfScores,
    /// Fraction in `[0, 1]`; `null` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    pub threshold: f64,
    pub top_k_mode: TopKMode,
}

/// mAP plus the full and top-3 threshold blocks.
pub fn evaluate(table: &EvalTable, threshold: f64, mode: TopKMode) -> Result<MetricsReport> {
    let per_class_ap = per_class_ap(table);
    let skipped_classes: Vec<usize> = per_class_ap
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(k, _)| k)
        .collect();
    if !skipped_classes.is_empty() {
        warn!(
            "classes {skipped_classes:?} have no positive samples and are left out of mAP"
        );
    }
    Ok(MetricsReport {
        map: mean_ap(&per_class_ap)?,
        all: prf_suite(table, threshold, None, mode)?,
        top3: prf_suite(table, threshold, Some(DEFAULT_TOP_K), mode)?,
        per_class_ap,
        skipped_classes,
        threshold,
        top_k_mode: mode,
    })
}
