//! COCO-style detection mAP and classification top-1 accuracy.
//!
//! Matching is greedy in descending score order per (image, category); AP is
//! the 101-point interpolated area under the precision/recall curve. mAP
//! averages AP over categories with ground truth, then over the ten IoU
//! thresholds 0.50, 0.55, ..., 0.95.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::bbox::iou;
use crate::error::{Error, Result};
use crate::types::{CategoryId, Detection, ImageId};

/// IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall sample points 0.00:0.01:1.00, generated the way `numpy.linspace`
/// does so interpolation agrees with the reference COCO tooling.
fn recall_points() -> impl Iterator<Item = f64> {
    (0..=100).map(|k| if k == 100 { 1.0 } else { k as f64 * 0.01 })
}

/// Result of matching one score-sorted prediction list against truths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// For each prediction, the index of the truth it matched.
    pub pred_to_truth: Vec<Option<usize>>,
    /// For each truth, whether some prediction claimed it.
    pub truth_matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pred_to_truth.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy one-to-one matching. `preds` must already be sorted by descending
/// score; each takes the highest-IoU still-unmatched truth of its category
/// with IoU at least `iou_threshold`.
pub fn match_detections(preds: &[Detection], truths: &[Detection], iou_threshold: f64) -> Matching {
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| truths.iter().map(|t| iou(&p.bbox, &t.bbox)).collect())
        .collect();
    let cats_p: Vec<_> = preds.iter().map(|d| d.category).collect();
    let cats_t: Vec<_> = truths.iter().map(|d| d.category).collect();
    match_with_ious(&ious, &cats_p, &cats_t, iou_threshold)
}

fn match_with_ious(
    ious: &[Vec<f64>],
    pred_cats: &[CategoryId],
    truth_cats: &[CategoryId],
    iou_threshold: f64,
) -> Matching {
    let mut truth_matched = vec![false; truth_cats.len()];
    let pred_to_truth = ious
        .iter()
        .zip(pred_cats)
        .map(|(row, pc)| {
            let mut best: Option<(usize, f64)> = None;
            for (t, (&o, tc)) in row.iter().zip(truth_cats).enumerate() {
                if truth_matched[t] || tc != pc || o < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((t, o));
                }
            }
            best.map(|(t, _)| {
                truth_matched[t] = true;
                t
            })
        })
        .collect();
    Matching {
        pred_to_truth,
        truth_matched,
    }
}

/// 101-point interpolated AP.
///
/// `outcomes` are `(score, is_true_positive)` for every prediction of one
/// category; they are ranked by descending score (stable for ties).
/// Returns `None` when the category has no ground truth.
pub fn average_precision(outcomes: &[(f64, bool)], n_truth: usize) -> Option<f64> {
    if n_truth == 0 {
        return None;
    }
    let mut ranked: Vec<&(f64, bool)> = outcomes.iter().collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &&(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: max over all later points
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = recall_points()
        .map(|r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub map_5095: f64,
    /// Mean AP over categories at each IoU threshold.
    pub per_iou_ap: Vec<(f64, f64)>,
    /// AP averaged over IoU thresholds, for categories with ground truth.
    pub per_category_ap: Vec<(CategoryId, f64)>,
    /// Counts at IoU 0.50.
    pub matched: usize,
    pub unmatched_predictions: usize,
    pub unmatched_truths: usize,
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_iou_ap
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, ap)| ap)
    }
}

#[derive(Default)]
struct Cell<'a> {
    preds: Vec<&'a Detection>,
    truths: Vec<&'a Detection>,
}

/// Per category: for each threshold, the ranked outcomes and truth count.
struct CategoryOutcomes {
    per_threshold: Vec<Vec<(f64, bool)>>,
    n_truth: usize,
}

/// COCO mAP@[.50:.95] of `preds` against `truths`.
pub fn mean_ap(preds: &[Detection], truths: &[Detection]) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::Evaluation("no ground-truth annotations".into()));
    }
    let thresholds = iou_thresholds();

    // (category, image) cells; BTreeMap fixes the image order inside a category
    let mut cells: BTreeMap<CategoryId, BTreeMap<ImageId, Cell>> = BTreeMap::new();
    for t in truths {
        cells.entry(t.category).or_default().entry(t.image).or_default().truths.push(t);
    }
    for p in preds {
        cells.entry(p.category).or_default().entry(p.image).or_default().preds.push(p);
    }

    let per_category: Vec<(CategoryId, CategoryOutcomes)> = cells
        .into_par_iter()
        .map(|(cat, images)| {
            let mut per_threshold = vec![Vec::new(); thresholds.len()];
            let mut n_truth = 0;
            for (_, mut cell) in images {
                cell.preds.sort_by(|a, b| b.score.total_cmp(&a.score));
                n_truth += cell.truths.len();
                let ious: Vec<Vec<f64>> = cell
                    .preds
                    .iter()
                    .map(|p| cell.truths.iter().map(|t| iou(&p.bbox, &t.bbox)).collect())
                    .collect();
                let pc = vec![cat; cell.preds.len()];
                let tc = vec![cat; cell.truths.len()];
                for (ti, &thr) in thresholds.iter().enumerate() {
                    let m = match_with_ious(&ious, &pc, &tc, thr);
                    per_threshold[ti].extend(
                        cell.preds
                            .iter()
                            .zip(&m.pred_to_truth)
                            .map(|(p, hit)| (p.score, hit.is_some())),
                    );
                }
            }
            (cat, CategoryOutcomes { per_threshold, n_truth })
        })
        .collect();

    // AP matrix rows = categories with truth, cols = thresholds
    let mut rows: Vec<(CategoryId, Vec<f64>)> = Vec::new();
    for (cat, outcomes) in &per_category {
        let aps: Option<Vec<f64>> = outcomes
            .per_threshold
            .iter()
            .map(|o| average_precision(o, outcomes.n_truth))
            .collect();
        if let Some(aps) = aps {
            rows.push((*cat, aps));
        }
    }

    let per_iou_ap: Vec<(f64, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(ti, &thr)| (thr, rows.iter().map(|(_, a)| a[ti]).sum::<f64>() / rows.len() as f64))
        .collect();
    let per_category_ap: Vec<(CategoryId, f64)> = rows
        .iter()
        .map(|(c, a)| (*c, a.iter().sum::<f64>() / a.len() as f64))
        .collect();
    let map_5095 = per_iou_ap.iter().map(|(_, a)| a).sum::<f64>() / per_iou_ap.len() as f64;

    let matched: usize = per_category
        .iter()
        .map(|(_, o)| o.per_threshold[0].iter().filter(|(_, hit)| *hit).count())
        .sum();
    Ok(EvalReport {
        map_5095,
        per_iou_ap,
        per_category_ap,
        matched,
        unmatched_predictions: preds.len() - matched,
        unmatched_truths: truths.len() - matched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Top1Report {
    /// Correct / labeled; 0 when nothing was labeled.
    pub accuracy: f64,
    /// Labeled / total.
    pub coverage: f64,
    pub correct: usize,
    pub labeled: usize,
    pub abstained: usize,
    pub total: usize,
}

/// Top-1 accuracy over non-abstained images, with coverage reported apart.
pub fn top1_accuracy(
    pseudo: &[(ImageId, Option<CategoryId>)],
    truths: &HashMap<ImageId, CategoryId>,
) -> Result<Top1Report> {
    let mut correct = 0;
    let mut labeled = 0;
    for (image, label) in pseudo {
        let truth = truths
            .get(image)
            .ok_or_else(|| Error::Evaluation(format!("no ground-truth label for image {image}")))?;
        if let Some(label) = label {
            labeled += 1;
            correct += (label == truth) as usize;
        }
    }
    let total = pseudo.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Top1Report {
        accuracy: ratio(correct, labeled),
        coverage: ratio(labeled, total),
        correct,
        labeled,
        abstained: total - labeled,
        total,
    })
}
