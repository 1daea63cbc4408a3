//! Box IoU and mAP@50 with all-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Intersection over union of two continuous boxes. Two identical
/// zero-area boxes count as a perfect match.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frame_id: u32,
    pub class: u32,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub frame_id: u32,
    pub class: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub iou_threshold: f64,
}

/// Predictions of one class sorted by descending score, input order on ties.
fn ranked(preds: &[Prediction], class: u32) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len())
        .filter(|&k| preds[k].class == class)
        .collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    idx
}

/// Walks predictions in score order and keeps one as a true positive
/// whenever the kept set can still be matched one-to-one to ground truth
/// (augmenting paths). This yields the lexicographically greatest
/// true-positive sequence over all valid assignments.
pub fn match_in_order(adj: &[Vec<usize>], n_gt: usize) -> Vec<bool> {
    let mut gt_owner: Vec<Option<usize>> = vec![None; n_gt];
    let mut tp = vec![false; adj.len()];
    for p in 0..adj.len() {
        let mut seen = vec![false; n_gt];
        if augment(p, adj, &mut gt_owner, &mut seen) {
            tp[p] = true;
        }
    }
    tp
}

fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].is_none_or(|q| augment(q, adj, owner, seen)) {
            owner[g] = Some(p);
            return true;
        }
    }
    false
}

/// All-point interpolated AP from a ranked true-positive sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for k in 0..tp.len() {
        if rec[k] > last_r {
            ap += (rec[k] - last_r) * prec[k];
            last_r = rec[k];
        }
    }
    ap
}

/// Ranked true-positive flags for one class.
pub fn class_tp(
    preds: &[Prediction],
    gts: &[GroundTruthBox],
    class: u32,
    thr: f64,
) -> (Vec<bool>, usize) {
    let order = ranked(preds, class);
    let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, g) in gts.iter().enumerate().filter(|(_, g)| g.class == class) {
        by_frame.entry(g.frame_id).or_default().push(k);
    }
    let n_gt = by_frame.values().map(Vec::len).sum();
    let mut tp = vec![false; order.len()];
    let mut rank_by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (rank, &p) in order.iter().enumerate() {
        rank_by_frame
            .entry(preds[p].frame_id)
            .or_default()
            .push(rank);
    }
    for (frame, ranks) in rank_by_frame {
        let Some(gt_idx) = by_frame.get(&frame) else {
            continue;
        };
        let adj: Vec<Vec<usize>> = ranks
            .iter()
            .map(|&r| {
                (0..gt_idx.len())
                    .filter(|&j| iou(&preds[order[r]].bbox, &gts[gt_idx[j]].bbox) >= thr)
                    .collect()
            })
            .collect();
        for (r, hit) in ranks.iter().zip(match_in_order(&adj, gt_idx.len())) {
            tp[*r] = hit;
        }
    }
    (tp, n_gt)
}

/// Mean AP over classes that have ground truth.
pub fn evaluate_map(preds: &[Prediction], gts: &[GroundTruthBox], thr: f64) -> Result<MapReport> {
    if gts.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::InvalidConfig(
            "iou threshold must lie in (0, 1)".into(),
        ));
    }
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let (tp, n_gt) = class_tp(preds, gts, c, thr);
        per_class.insert(c, average_precision(&tp, n_gt));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapReport {
        map,
        per_class,
        iou_threshold: thr,
    })
}

pub fn evaluate_map50(preds: &[Prediction], gts: &[GroundTruthBox]) -> Result<MapReport> {
    evaluate_map(preds, gts, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        let p = b(5.0, 9.0, 5.0, 9.0);
        assert_eq!(iou(&p, &p), 1.0);
        assert_eq!(iou(&p, &b(4.0, 8.0, 6.0, 10.0)), 0.0);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![
            GroundTruthBox {
                frame_id: 0,
                class: 1,
                bbox: b(0.0, 0.0, 4.0, 4.0),
            },
            GroundTruthBox {
                frame_id: 1,
                class: 2,
                bbox: b(2.0, 2.0, 6.0, 5.0),
            },
        ];
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|g| Prediction {
                frame_id: g.frame_id,
                class: g.class,
                score: 1.0,
                bbox: g.bbox,
            })
            .collect();
        assert_eq!(evaluate_map50(&preds, &gts).unwrap().map, 1.0);
        assert_eq!(evaluate_map50(&[], &gts).unwrap().map, 0.0);
        assert!(evaluate_map50(&preds, &[]).is_err());
    }

    #[test]
    fn three_box_case_prefers_full_matching() {
        // p0 (top score) overlaps both g0 and g1; p1 overlaps only g0.
        // Taking g0 for p0 would leave p1 unmatched; a full matching exists.
        let g0 = b(0.0, 0.0, 10.0, 10.0);
        let g1 = b(2.0, 0.0, 12.0, 10.0);
        let gts = vec![
            GroundTruthBox {
                frame_id: 0,
                class: 0,
                bbox: g0,
            },
            GroundTruthBox {
                frame_id: 0,
                class: 0,
                bbox: g1,
            },
        ];
        let preds = vec![
            Prediction {
                frame_id: 0,
                class: 0,
                score: 0.9,
                bbox: b(1.0, 0.0, 11.0, 10.0),
            },
            Prediction {
                frame_id: 0,
                class: 0,
                score: 0.8,
                bbox: b(-1.0, 0.0, 8.0, 10.0),
            },
        ];
        assert!(iou(&preds[1].bbox, &g1) < 0.5);
        let (tp, n) = class_tp(&preds, &gts, 0, 0.5);
        assert_eq!((tp, n), (vec![true, true], 2));
        assert_eq!(evaluate_map50(&preds, &gts).unwrap().map, 1.0);
    }

    #[test]
    fn ap_all_point() {
        // TP, FP, TP with 2 GT: precision 1, 0.5, 2/3 -> envelope 1, 2/3, 2/3.
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), 0.0);
    }
}
