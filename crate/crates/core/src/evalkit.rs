//! Segmentation metrics and the pairwise semantic-coherence analysis.
//!
//! mIoU follows the usual convention of excluding classes with an empty
//! union. Coherence treats a pairwise score matrix as a binary classifier of
//! "patches `i` and `j` share a label" over ordered pairs `i != j` and
//! reports its precision/recall curve and step-wise average precision.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::error::EvalError;
use crate::segmenter::LabelMap;
use crate::tensor::Tensor;

/// Ground-truth label conventionally used for "not annotated".
pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_index: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u32) -> Self {
        Self {
            num_classes,
            ignore_index,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from explicit counts, row-major.
    pub fn from_counts(num_classes: usize, ignore_index: u32, counts: Vec<u64>) -> Result<Self, EvalError> {
        if counts.len() != num_classes * num_classes {
            return Err(EvalError::Dimension(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            ignore_index,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Adds every pixel whose ground truth is not the ignore index.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), EvalError> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(EvalError::SizeMismatch {
                pred_h: pred.height,
                pred_w: pred.width,
                gt_h: gt.height,
                gt_w: gt.width,
            });
        }
        let c = self.num_classes;
        let out_of_range = |label: u32| EvalError::LabelOutOfRange { label, num_classes: c };
        // Validate first so a bad map leaves the accumulator untouched.
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != self.ignore_index && g as usize >= c {
                return Err(out_of_range(g));
            }
            if p as usize >= c {
                return Err(out_of_range(p));
            }
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != self.ignore_index {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum with another accumulator.
    pub fn merge(&mut self, other: &Self) -> Result<(), EvalError> {
        if other.num_classes != self.num_classes || other.ignore_index != self.ignore_index {
            return Err(EvalError::Incompatible);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` where the class has an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport, EvalError> {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let gt_total: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let pred_total: u64 = (0..c).map(|g| cm.get(g, k)).sum();
            let union = gt_total + pred_total - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(EvalError::AllUndefined);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MiouReport { per_class, mean })
}

/// Writes `class_name,iou` rows; undefined classes get an empty iou field.
pub fn write_iou_csv<W: Write>(mut out: W, class_names: &[String], report: &MiouReport) -> std::io::Result<()> {
    writeln!(out, "class_name,iou")?;
    for (i, iou) in report.per_class.iter().enumerate() {
        let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
        match iou {
            Some(v) => writeln!(out, "{},{v:.6}", csv_field(&name))?,
            None => writeln!(out, "{},", csv_field(&name))?,
        }
    }
    writeln!(out, "mIoU,{:.6}", report.mean)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Patch-cell labels; `None` marks an ignored cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabels {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<Option<u32>>,
}

impl PatchLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Majority label of every non-overlapping `patch x patch` cell (border
/// cells may be partial). Ties go to the lowest label; the cell is ignored
/// only when the ignore label strictly outnumbers every other label.
pub fn patch_majority(gt: &LabelMap, patch: usize, ignore_index: u32) -> PatchLabels {
    let patch = patch.max(1);
    let grid_h = gt.height.div_ceil(patch);
    let grid_w = gt.width.div_ceil(patch);
    let mut labels = Vec::with_capacity(grid_h * grid_w);
    let mut hist: Vec<(u32, usize)> = Vec::new();
    for cy in 0..grid_h {
        for cx in 0..grid_w {
            hist.clear();
            let mut ignored = 0usize;
            for y in cy * patch..((cy + 1) * patch).min(gt.height) {
                for x in cx * patch..((cx + 1) * patch).min(gt.width) {
                    let l = gt.get(x, y);
                    if l == ignore_index {
                        ignored += 1;
                    } else if let Some(e) = hist.iter_mut().find(|e| e.0 == l) {
                        e.1 += 1;
                    } else {
                        hist.push((l, 1));
                    }
                }
            }
            let best = hist
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .copied();
            labels.push(match best {
                Some((l, n)) if n >= ignored => Some(l),
                _ => None,
            });
        }
    }
    PatchLabels { grid_h, grid_w, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// Ordered by increasing threshold.
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub positives: u64,
    pub pairs: u64,
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,precision,recall")?;
        for p in &self.points {
            writeln!(out, "{:.9},{:.9},{:.9}", p.threshold, p.precision, p.recall)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    /// Every distinct score.
    Auto,
    Explicit(Vec<f64>),
}

/// Scored ordered pairs pooled across windows and images.
#[derive(Debug, Clone, Default)]
pub struct CoherenceAccumulator {
    pairs: Vec<(f32, bool)>,
}

impl CoherenceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds ordered pairs `i != j` from an `L x L` score matrix; pairs with an
    /// ignored endpoint are skipped.
    pub fn add(&mut self, scores: &Tensor, labels: &PatchLabels) -> Result<(), EvalError> {
        let l = labels.len();
        if scores.shape() != [l, l] {
            return Err(EvalError::Dimension(format!(
                "scores {:?} for {l} patches",
                scores.shape()
            )));
        }
        for i in 0..l {
            let Some(li) = labels.labels[i] else { continue };
            for j in 0..l {
                if i == j {
                    continue;
                }
                if let Some(lj) = labels.labels[j] {
                    self.pairs.push((scores.data()[i * l + j], li == lj));
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: CoherenceAccumulator) {
        self.pairs.extend(other.pairs);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn curve(&self, thresholds: &Thresholds) -> Result<PrCurve, EvalError> {
        let total_pos = self.pairs.iter().filter(|p| p.1).count() as u64;
        if total_pos == 0 {
            return Err(EvalError::NoPositives);
        }
        let mut sorted: Vec<(f64, bool)> = self.pairs.iter().map(|&(s, t)| (s as f64, t)).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

        let ts: Vec<f64> = match thresholds {
            Thresholds::Auto => {
                let mut v: Vec<f64> = sorted.iter().map(|p| p.0).collect();
                v.dedup();
                v
            }
            Thresholds::Explicit(v) => {
                let mut v = v.clone();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
                v.dedup();
                v
            }
        };
        if ts.is_empty() {
            return Err(EvalError::Dimension("no thresholds".into()));
        }

        // Sweep thresholds from high to low, advancing a cursor over the
        // descending scores.
        let mut points = Vec::with_capacity(ts.len());
        let (mut tp, mut fp, mut cursor) = (0u64, 0u64, 0usize);
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &ts {
            while cursor < sorted.len() && sorted[cursor].0 >= t {
                if sorted[cursor].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                cursor += 1;
            }
            let precision = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = tp as f64 / total_pos as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
            points.push(PrPoint {
                threshold: t,
                precision,
                recall,
            });
        }
        points.reverse();
        Ok(PrCurve {
            points,
            ap,
            positives: total_pos,
            pairs: sorted.len() as u64,
        })
    }
}

/// One-shot coherence analysis of a single score matrix.
pub fn coherence(scores: &Tensor, labels: &PatchLabels, thresholds: &Thresholds) -> Result<PrCurve, EvalError> {
    let mut acc = CoherenceAccumulator::new();
    acc.add(scores, labels)?;
    acc.curve(thresholds)
}
