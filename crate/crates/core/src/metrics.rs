//! Recognition and detection scores.
//!
//! Page-level helpers return ratios; the `*Counts` types carry raw counts so
//! corpus scores can be micro-averaged in any order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{expand, iou, BBox};

/// Standard DetEval area-recall threshold.
pub const DETEVAL_AREA_RECALL: f64 = 0.8;
/// Standard DetEval area-precision threshold.
pub const DETEVAL_AREA_PRECISION: f64 = 0.4;
/// IoU thresholds reported for localization queries.
pub const AP_IOU_THRESHOLDS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut cur = vec![0; a.len() + 1];
    for (j, bj) in b.iter().enumerate() {
        cur[0] = j + 1;
        for (i, ai) in a.iter().enumerate() {
            let sub = prev[i] + usize::from(ai != bj);
            cur[i + 1] = sub.min(prev[i + 1] + 1).min(cur[i] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[a.len()]
}

fn rate(edits: usize, reference: usize, hyp_empty: bool) -> f64 {
    if reference == 0 {
        return if hyp_empty { 0.0 } else { 1.0 };
    }
    (edits as f64 / reference as f64).min(1.0)
}

/// Character error rate, saturating at 1.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    ErrorCounts::chars(reference, hypothesis).rate()
}

/// Word error rate over whitespace-split words, saturating at 1.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    ErrorCounts::words(reference, hypothesis).rate()
}

/// Edit operations and reference length, summable across samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference: usize,
    pub hypothesis: usize,
}

impl ErrorCounts {
    pub fn chars(reference: &str, hypothesis: &str) -> Self {
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        ErrorCounts { edits: edit_distance(&r, &h), reference: r.len(), hypothesis: h.len() }
    }

    pub fn words(reference: &str, hypothesis: &str) -> Self {
        let r: Vec<&str> = reference.split_whitespace().collect();
        let h: Vec<&str> = hypothesis.split_whitespace().collect();
        ErrorCounts { edits: edit_distance(&r, &h), reference: r.len(), hypothesis: h.len() }
    }

    pub fn add(&mut self, other: ErrorCounts) {
        self.edits += other.edits;
        self.reference += other.reference;
        self.hypothesis += other.hypothesis;
    }

    pub fn rate(&self) -> f64 {
        rate(self.edits, self.reference, self.hypothesis == 0)
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Matched / ground-truth / predicted counts behind a P/R/F1 triple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub gt: usize,
    pub pred: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.matched += other.matched;
        self.gt += other.gt;
        self.pred += other.pred;
    }

    pub fn prf(&self) -> Prf {
        if self.gt == 0 && self.pred == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |n: usize| if n == 0 { 0.0 } else { self.matched as f64 / n as f64 };
        let (p, r) = (ratio(self.pred), ratio(self.gt));
        Prf { precision: p, recall: r, f1: f1(p, r) }
    }
}

/// Exact, case-sensitive word matching over multisets.
pub fn word_counts<'a>(
    gt: impl IntoIterator<Item = &'a str>,
    pred: impl IntoIterator<Item = &'a str>,
) -> MatchCounts {
    let mut bag: HashMap<&str, usize> = HashMap::new();
    let mut counts = MatchCounts::default();
    for w in gt {
        *bag.entry(w).or_default() += 1;
        counts.gt += 1;
    }
    for w in pred {
        counts.pred += 1;
        if let Some(n) = bag.get_mut(w).filter(|n| **n > 0) {
            *n -= 1;
            counts.matched += 1;
        }
    }
    counts
}

/// Word-level precision/recall/F1 between two whitespace-tokenized texts.
pub fn word_prf(gt_text: &str, pred_text: &str) -> Prf {
    word_counts(gt_text.split_whitespace(), pred_text.split_whitespace()).prf()
}

/// One-to-one area matching between ground-truth and predicted boxes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatchResult {
    /// `(gt index, pred index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    /// `area(g ∩ p) / area(g)` per pair.
    pub area_recall: Vec<f64>,
    /// `area(g ∩ p) / area(p)` per pair.
    pub area_precision: Vec<f64>,
    pub counts: MatchCounts,
}

impl DetectionMatchResult {
    pub fn prf(&self) -> Prf {
        self.counts.prf()
    }
}

/// Whether `(g, p)` passes both DetEval area thresholds.
pub fn deteval_eligible(g: &BBox, p: &BBox, t_recall: f64, t_precision: f64) -> bool {
    let inter = g.intersection_area(p);
    let (ga, pa) = (g.area(), p.area());
    ga > 0.0 && pa > 0.0 && inter / ga >= t_recall && inter / pa >= t_precision
}

/// DetEval-style one-to-one matching.
///
/// Eligible pairs are taken greedily by decreasing intersection area; the
/// greedy matching is then grown with augmenting paths so that the number of
/// matches is always the maximum achievable.
pub fn deteval(gt: &[BBox], pred: &[BBox], t_recall: f64, t_precision: f64) -> DetectionMatchResult {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); gt.len()];
    let mut cands = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if deteval_eligible(g, p, t_recall, t_precision) {
                adj[gi].push(pi);
                cands.push((g.intersection_area(p), gi, pi));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_to: Vec<Option<usize>> = vec![None; gt.len()];
    let mut pred_to: Vec<Option<usize>> = vec![None; pred.len()];
    for &(_, gi, pi) in &cands {
        if gt_to[gi].is_none() && pred_to[pi].is_none() {
            gt_to[gi] = Some(pi);
            pred_to[pi] = Some(gi);
        }
    }

    fn augment(
        g: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        gt_to: &mut [Option<usize>],
        pred_to: &mut [Option<usize>],
    ) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            let free = match pred_to[p] {
                None => true,
                Some(other) => augment(other, adj, seen, gt_to, pred_to),
            };
            if free {
                gt_to[g] = Some(p);
                pred_to[p] = Some(g);
                return true;
            }
        }
        false
    }

    for g in 0..gt.len() {
        if gt_to[g].is_none() && !adj[g].is_empty() {
            let mut seen = vec![false; pred.len()];
            augment(g, &adj, &mut seen, &mut gt_to, &mut pred_to);
        }
    }

    let mut r = DetectionMatchResult::default();
    for (gi, m) in gt_to.iter().enumerate() {
        match m {
            Some(pi) => {
                let inter = gt[gi].intersection_area(&pred[*pi]);
                r.pairs.push((gi, *pi));
                r.area_recall.push(inter / gt[gi].area());
                r.area_precision.push(inter / pred[*pi].area());
            }
            None => r.unmatched_gt.push(gi),
        }
    }
    r.unmatched_pred = (0..pred.len()).filter(|&p| pred_to[p].is_none()).collect();
    r.counts = MatchCounts { matched: r.pairs.len(), gt: gt.len(), pred: pred.len() };
    r
}

/// DetEval with the standard thresholds.
pub fn deteval_default(gt: &[BBox], pred: &[BBox]) -> DetectionMatchResult {
    deteval(gt, pred, DETEVAL_AREA_RECALL, DETEVAL_AREA_PRECISION)
}

/// Fraction of localization queries answered with IoU at or above `threshold`.
pub fn ap_iou(results: &[(BBox, Option<BBox>)], threshold: f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|(g, p)| p.as_ref().is_some_and(|p| iou(g, p) >= threshold))
        .count();
    hits as f64 / results.len() as f64
}

/// CER thresholds 0.05, 0.10, ..., 0.50.
pub fn ap_cer_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| 0.05 * (k + 1) as f64)
}

/// Fraction of transcriptions with CER at or below each threshold.
pub fn cer_accuracy_curve(results: &[(String, String)]) -> [f64; 10] {
    let cers: Vec<f64> = results.iter().map(|(g, p)| cer(g, p)).collect();
    ap_cer_thresholds().map(|t| {
        if cers.is_empty() {
            0.0
        } else {
            cers.iter().filter(|&&c| c <= t + 1e-12).count() as f64 / cers.len() as f64
        }
    })
}

/// Mean of the CER-threshold accuracy curve.
pub fn ap_cer(results: &[(String, String)]) -> f64 {
    let curve = cer_accuracy_curve(results);
    curve.iter().sum::<f64>() / curve.len() as f64
}

/// DetEval F1 after growing every prediction by each padding amount.
pub fn padding_study(
    gt: &[BBox],
    pred: &[BBox],
    pads: &[f64],
    width: f64,
    height: f64,
) -> Vec<(f64, DetectionMatchResult)> {
    pads.iter()
        .map(|&pad| {
            let grown: Vec<BBox> = pred.iter().map(|b| expand(b, pad, width, height)).collect();
            (pad, deteval_default(gt, &grown))
        })
        .collect()
}

/// All scores for one task on one evaluation split. Scores that do not apply
/// to the task are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub word_precision: Option<f64>,
    pub word_recall: Option<f64>,
    pub word_f1: Option<f64>,
    pub det_precision: Option<f64>,
    pub det_recall: Option<f64>,
    pub det_f1: Option<f64>,
    pub ap_iou_50: Option<f64>,
    pub ap_iou_60: Option<f64>,
    pub ap_iou_70: Option<f64>,
    pub ap_iou_80: Option<f64>,
    pub ap_cer: Option<f64>,
}

impl MetricBundle {
    pub fn set_words(&mut self, prf: Prf) {
        self.word_precision = Some(prf.precision);
        self.word_recall = Some(prf.recall);
        self.word_f1 = Some(prf.f1);
    }

    pub fn set_detection(&mut self, prf: Prf) {
        self.det_precision = Some(prf.precision);
        self.det_recall = Some(prf.recall);
        self.det_f1 = Some(prf.f1);
    }

    pub fn set_localization(&mut self, results: &[(BBox, Option<BBox>)]) {
        let [a, b, c, d] = AP_IOU_THRESHOLDS.map(|t| Some(ap_iou(results, t)));
        self.ap_iou_50 = a;
        self.ap_iou_60 = b;
        self.ap_iou_70 = c;
        self.ap_iou_80 = d;
    }

    /// Every populated value.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        [
            ("cer", self.cer),
            ("wer", self.wer),
            ("word_precision", self.word_precision),
            ("word_recall", self.word_recall),
            ("word_f1", self.word_f1),
            ("det_precision", self.det_precision),
            ("det_recall", self.det_recall),
            ("det_f1", self.det_f1),
            ("ap_iou_50", self.ap_iou_50),
            ("ap_iou_60", self.ap_iou_60),
            ("ap_iou_70", self.ap_iou_70),
            ("ap_iou_80", self.ap_iou_80),
            ("ap_cer", self.ap_cer),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}
