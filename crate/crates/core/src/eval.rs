//! Ground-truth matching and precision / recall / F-measure / IoU reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, Label, LabeledBox};
use crate::postprocess::{by_score_desc, Detection};

/// Default IoU a detection must exceed to count as found.
pub const IOU_MATCH_THRESHOLD: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Index into the detection list.
    pub detection: usize,
    /// Index into the ground-truth list.
    pub ground_truth: usize,
    pub label: Label,
    pub iou: f64,
    /// Objectness times IoU with the matched ground truth.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Counts {
    fn add(&mut self, other: &Counts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub matched_pairs: Vec<MatchedPair>,
    /// Indexed by [`Label::index`].
    pub per_class: [Counts; 2],
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts { true_positives: self.true_positives, false_positives: self.false_positives, false_negatives: self.false_negatives }
    }
}

/// Greedy one-to-one matching. Detections are visited by descending
/// `objectness * class_prob`; each claims the unmatched ground truth of the
/// same class with the highest IoU, provided that IoU is strictly above
/// `iou_min`.
pub fn match_to_ground_truth(dets: &[Detection], gts: &[LabeledBox], iou_min: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for di in by_score_desc(dets, Detection::score) {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.label != d.label {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &g.bbox);
            if v > iou_min && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            taken[gi] = true;
            pairs.push(MatchedPair { detection: di, ground_truth: gi, label: d.label, iou: v, confidence: d.objectness * v });
        }
    }
    let mut per_class = [Counts::default(); 2];
    for label in Label::ALL {
        let tp = pairs.iter().filter(|p| p.label == label).count();
        let nd = dets.iter().filter(|d| d.label == label).count();
        let ng = gts.iter().filter(|g| g.label == label).count();
        per_class[label.index()] = Counts { true_positives: tp, false_positives: nd - tp, false_negatives: ng - tp };
    }
    MatchResult {
        true_positives: pairs.len(),
        false_positives: dets.len() - pairs.len(),
        false_negatives: gts.len() - pairs.len(),
        matched_pairs: pairs,
        per_class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub mean_iou: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl Metrics {
    pub fn from_counts(counts: Counts, iou_sum: f64) -> Self {
        let Counts { true_positives: tp, false_positives: fp, false_negatives: fneg } = counts;
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, dp) = ratio(tp, tp + fp);
        let (recall, dr) = ratio(tp, tp + fneg);
        Metrics {
            counts,
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            mean_iou: if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
            degenerate: dp || dr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Indexed by [`Label::index`].
    pub per_class: [Metrics; 2],
    pub overall: Metrics,
}

impl EvalReport {
    pub fn class(&self, label: Label) -> &Metrics {
        &self.per_class[label.index()]
    }
}

/// Pool counts over images, then form the ratios.
pub fn evaluate(results: &[MatchResult]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Config("evaluation needs at least one image".into()));
    }
    let mut class_counts = [Counts::default(); 2];
    let mut class_iou = [0.0f64; 2];
    let mut all = Counts::default();
    for r in results {
        all.add(&r.counts());
        for label in Label::ALL {
            class_counts[label.index()].add(&r.per_class[label.index()]);
        }
        for p in &r.matched_pairs {
            class_iou[p.label.index()] += p.iou;
        }
    }
    let per_class = [Metrics::from_counts(class_counts[0], class_iou[0]), Metrics::from_counts(class_counts[1], class_iou[1])];
    Ok(EvalReport { images: results.len(), per_class, overall: Metrics::from_counts(all, class_iou[0] + class_iou[1]) })
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub metrics: Metrics,
}

const HEADER: [&str; 6] = ["Method", "Dataset", "Precision", "Recall", "F-measure", "IoU"];

fn cells(row: &TableRow) -> [String; 6] {
    let m = &row.metrics;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    [row.method.clone(), row.dataset.clone(), pct(m.precision), pct(m.recall), pct(m.f_measure), pct(m.mean_iou)]
}

/// Fixed-width text table, values in percent. Degenerate rows are marked `*`.
pub fn format_table(rows: &[TableRow]) -> String {
    let body: Vec<[String; 6]> = rows.iter().map(cells).collect();
    let mut widths = HEADER.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: &[String], flag: bool| {
        let parts: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}{}", parts.join("  ").trim_end(), if flag { " *" } else { "" });
    };
    line(&mut out, &HEADER.map(String::from), false);
    for (r, row) in body.iter().zip(rows) {
        line(&mut out, r, row.metrics.degenerate);
    }
    out
}

pub fn format_csv(rows: &[TableRow]) -> String {
    let mut out = HEADER.join(",");
    out.push_str(",Degenerate\n");
    for row in rows {
        let _ = writeln!(out, "{},{}", cells(row).join(","), row.metrics.degenerate);
    }
    out
}
