//! Evaluation protocol: average precision over an IoU sweep, FROC with the
//! center-hit criterion, recall at fixed FP/image, and ROC AUC.
//!
//! Only malignant ground truths count as targets. What happens to a
//! detection that lands on a *benign* finding is controlled by
//! `benign_hits_are_fp`: `true` (default) counts it as a false positive,
//! `false` drops it from scoring entirely.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{center_hit, iou, BBox};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("roc_auc needs both classes, got {positives} positives / {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("detections file: {0}")]
    Format(String),
}

/// One scored box on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground truth content of one image in the evaluation universe.
#[derive(Debug, Clone, Default)]
pub struct ImageRecord {
    pub image_id: String,
    pub malignant: Vec<BBox>,
    pub benign: Vec<BBox>,
}

/// The paper's IoU sweep: 0.25 to 0.75 in steps of 0.05.
pub fn iou_threshold_grid() -> Vec<f64> {
    (0..11).map(|i| 0.25 + 0.05 * i as f64).collect()
}

/// Detections sorted by descending score, ties broken by insertion index so
/// results are deterministic.
fn sorted_indices(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Average precision at one IoU threshold: greedy score-descending matching,
/// all-points interpolated precision envelope. Returns `None` when the image
/// set holds no malignant ground truth.
fn ap_at_threshold(
    dets: &[Detection],
    images: &[ImageRecord],
    iou_thr: f64,
    benign_hits_are_fp: bool,
) -> Option<f64> {
    let by_id: HashMap<&str, &ImageRecord> =
        images.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let total_gt: usize = images.iter().map(|r| r.malignant.len()).sum();
    if total_gt == 0 {
        return None;
    }

    let mut matched: HashMap<&str, Vec<bool>> = images
        .iter()
        .map(|r| (r.image_id.as_str(), vec![false; r.malignant.len()]))
        .collect();

    // (recall, precision) after each kept detection
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &i in &sorted_indices(dets) {
        let det = &dets[i];
        let Some(record) = by_id.get(det.image_id.as_str()) else {
            continue; // outside the evaluation universe
        };
        let flags = matched.get_mut(det.image_id.as_str()).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in record.malignant.iter().enumerate() {
            if flags[g] {
                continue;
            }
            let ov = iou(&det.bbox, gt);
            if ov >= iou_thr && best.map_or(true, |(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        match best {
            Some((g, _)) => {
                flags[g] = true;
                tp += 1;
            }
            None => {
                if !benign_hits_are_fp
                    && record.benign.iter().any(|b| iou(&det.bbox, b) >= iou_thr)
                {
                    continue; // ignored, neither TP nor FP
                }
                fp += 1;
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // precision envelope, integrated over every recall change
    let mut ap = 0.0;
    let mut max_prec = 0.0f64;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        max_prec = max_prec.max(precision);
        ap += (prev_recall - recall) * max_prec;
        prev_recall = recall;
    }
    ap += prev_recall * max_prec;
    Some(ap)
}

/// Mean AP over the IoU grid. `None` when no malignant ground truth exists
/// in the image set.
pub fn average_precision(
    dets: &[Detection],
    images: &[ImageRecord],
    iou_thresholds: &[f64],
    benign_hits_are_fp: bool,
) -> Option<f64> {
    let mut sum = 0.0;
    for &thr in iou_thresholds {
        sum += ap_at_threshold(dets, images, thr, benign_hits_are_fp)?;
    }
    Some(sum / iou_thresholds.len() as f64)
}

/// FROC curve: one point per distinct score threshold, sorted by ascending
/// FP/image. A detection is a hit when its center lies inside a malignant
/// ground truth box; every image in the universe counts in the denominator.
pub fn froc(
    dets: &[Detection],
    images: &[ImageRecord],
    benign_hits_are_fp: bool,
) -> Vec<(f64, f64)> {
    let by_id: HashMap<&str, &ImageRecord> =
        images.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let total_gt: usize = images.iter().map(|r| r.malignant.len()).sum();
    let num_images = images.len().max(1);

    let in_universe: Vec<&Detection> = dets
        .iter()
        .filter(|d| by_id.contains_key(d.image_id.as_str()))
        .collect();
    if in_universe.is_empty() {
        return vec![(0.0, 0.0)];
    }

    let mut thresholds: Vec<f64> = in_universe.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut curve = Vec::with_capacity(thresholds.len());
    for thr in thresholds {
        let mut hit: HashMap<&str, Vec<bool>> = HashMap::new();
        let mut fp = 0usize;
        for det in in_universe.iter().filter(|d| d.score >= thr) {
            let record = by_id[det.image_id.as_str()];
            let hits: Vec<usize> = record
                .malignant
                .iter()
                .enumerate()
                .filter(|(_, gt)| center_hit(&det.bbox, gt))
                .map(|(g, _)| g)
                .collect();
            if hits.is_empty() {
                if !benign_hits_are_fp
                    && record.benign.iter().any(|b| center_hit(&det.bbox, b))
                {
                    continue;
                }
                fp += 1;
            } else {
                let flags = hit
                    .entry(det.image_id.as_str())
                    .or_insert_with(|| vec![false; record.malignant.len()]);
                for g in hits {
                    flags[g] = true;
                }
            }
        }
        let tp: usize = hit.values().map(|f| f.iter().filter(|&&x| x).count()).sum();
        let recall = if total_gt == 0 {
            0.0
        } else {
            tp as f64 / total_gt as f64
        };
        curve.push((fp as f64 / num_images as f64, recall));
    }
    curve
}

/// Highest recall among curve points with FP/image at or below `t`; zero if
/// the curve never gets that quiet.
pub fn recall_at_fp(curve: &[(f64, f64)], t: f64) -> f64 {
    assert!(t >= 0.0, "FP/image threshold must be nonnegative");
    curve
        .iter()
        .filter(|(fpi, _)| *fpi <= t)
        .map(|&(_, r)| r)
        .fold(0.0, f64::max)
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(equal), computed from
/// average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Point on a FROC curve, as serialized into reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_per_image: f64,
    pub recall: f64,
}

/// Everything the evaluation emits for one checkpoint/dataset pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP on annotated malignant+benign images only.
    pub ap_mb: Option<f64>,
    /// AP on the full evaluation universe.
    pub ap_all: Option<f64>,
    /// `ap_all - ap_mb`.
    pub delta: Option<f64>,
    pub recall_at_0_1: f64,
    pub recall_at_0_25: f64,
    pub recall_at_0_5: f64,
    pub froc: Vec<FrocPoint>,
    pub breast_auc: Option<f64>,
    pub exam_auc: Option<f64>,
}

impl EvalReport {
    pub fn froc_pairs(&self) -> Vec<(f64, f64)> {
        self.froc.iter().map(|p| (p.fp_per_image, p.recall)).collect()
    }
}

/// `fp_per_image,recall` CSV, one point per line.
pub fn write_froc_csv(path: &Path, curve: &[(f64, f64)]) -> Result<(), MetricsError> {
    let mut out = String::from("fp_per_image,recall\n");
    for (fpi, recall) in curve {
        out.push_str(&format!("{fpi},{recall}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_froc_csv(path: &Path) -> Result<Vec<(f64, f64)>, MetricsError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("fp_per_image,recall") => {}
        other => {
            return Err(MetricsError::Format(format!(
                "{}: bad header {other:?}",
                path.display()
            )))
        }
    }
    let mut curve = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let parse = |s: Option<&str>| -> Result<f64, MetricsError> {
            s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                MetricsError::Format(format!("{}: line {}", path.display(), lineno + 2))
            })
        };
        let fpi = parse(parts.next())?;
        let recall = parse(parts.next())?;
        curve.push((fpi, recall));
    }
    Ok(curve)
}

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    image_id: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

/// Interchange format: a JSON list of `{image_id, x1, y1, x2, y2, score}`.
pub fn write_detections_json(path: &Path, dets: &[Detection]) -> Result<(), MetricsError> {
    let records: Vec<DetectionJson> = dets
        .iter()
        .map(|d| DetectionJson {
            image_id: d.image_id.clone(),
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            score: d.score,
        })
        .collect();
    let json =
        serde_json::to_string_pretty(&records).map_err(|e| MetricsError::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_detections_json(path: &Path) -> Result<Vec<Detection>, MetricsError> {
    let text = fs::read_to_string(path)?;
    let records: Vec<DetectionJson> =
        serde_json::from_str(&text).map_err(|e| MetricsError::Format(e.to_string()))?;
    records
        .into_iter()
        .map(|r| {
            let bbox = BBox::new(r.x1, r.y1, r.x2, r.y2)
                .map_err(|e| MetricsError::Format(e.to_string()))?;
            Ok(Detection {
                image_id: r.image_id,
                bbox,
                score: r.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(id: &str, b: BBox, score: f64) -> Detection {
        Detection {
            image_id: id.to_string(),
            bbox: b,
            score,
        }
    }

    fn img(id: &str, malignant: Vec<BBox>) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            malignant,
            benign: Vec::new(),
        }
    }

    #[test]
    fn perfect_detector_has_ap_one() {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(20.0, 20.0, 30.0, 32.0);
        let images = vec![img("a", vec![g1]), img("b", vec![g2])];
        let dets = vec![det("a", g1, 0.9), det("b", g2, 0.8)];
        let ap = average_precision(&dets, &images, &iou_threshold_grid(), true).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detections_only_on_negatives_score_zero() {
        let images = vec![
            img("pos", vec![bx(0.0, 0.0, 10.0, 10.0)]),
            img("neg", vec![]),
        ];
        let dets = vec![det("neg", bx(1.0, 1.0, 5.0, 5.0), 0.9)];
        let ap = average_precision(&dets, &images, &iou_threshold_grid(), true).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn empty_ground_truth_reports_absent() {
        let images = vec![img("neg", vec![])];
        assert!(average_precision(&[], &images, &iou_threshold_grid(), true).is_none());
    }

    #[test]
    fn froc_no_detections_is_origin() {
        let images = vec![img("a", vec![bx(0.0, 0.0, 4.0, 4.0)])];
        assert_eq!(froc(&[], &images, true), vec![(0.0, 0.0)]);
    }

    #[test]
    fn froc_perfect_detector_reaches_origin_recall_one() {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(5.0, 5.0, 9.0, 9.0);
        let images = vec![img("a", vec![g1]), img("b", vec![g2]), img("c", vec![])];
        let dets = vec![det("a", g1, 0.9), det("b", g2, 0.7)];
        let curve = froc(&dets, &images, true);
        assert!(curve.contains(&(0.0, 1.0)), "curve {curve:?}");
    }

    #[test]
    fn recall_at_fp_step_lookup() {
        let curve = vec![(0.05, 0.6), (0.3, 0.9)];
        assert_eq!(recall_at_fp(&curve, 0.1), 0.6);
        assert_eq!(recall_at_fp(&curve, 1.0), 0.9); // beyond curve max
        assert_eq!(recall_at_fp(&curve, 0.01), 0.0); // all points too noisy
    }

    #[test]
    fn recall_at_zero_with_any_fp_is_zero() {
        let images = vec![img("a", vec![bx(0.0, 0.0, 4.0, 4.0)])];
        let dets = vec![
            det("a", bx(0.0, 0.0, 4.0, 4.0), 0.9),
            det("a", bx(20.0, 20.0, 24.0, 24.0), 0.95),
        ];
        let curve = froc(&dets, &images, true);
        assert_eq!(recall_at_fp(&curve, 0.0), 0.0);
    }

    #[test]
    fn roc_auc_hand_cases() {
        // perfectly separated
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
        // all ties
        let auc = roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        // 3 of 4 pairs correctly ordered
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn roc_auc_rejects_single_class() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn benign_hit_flag_controls_fp_accounting() {
        let mal = bx(0.0, 0.0, 10.0, 10.0);
        let ben = bx(30.0, 30.0, 40.0, 40.0);
        let images = vec![ImageRecord {
            image_id: "a".into(),
            malignant: vec![mal],
            benign: vec![ben],
        }];
        // high-scoring detection on the benign finding, lower on the malignant
        let dets = vec![det("a", ben, 0.9), det("a", mal, 0.8)];

        let strict = froc(&dets, &images, true);
        let lenient = froc(&dets, &images, false);
        // strict: benign hit is an FP, so full recall costs 1 FP/image
        assert!(strict.contains(&(1.0, 1.0)), "{strict:?}");
        // lenient: benign hit is ignored, recall 1 at zero FPs
        assert!(lenient.contains(&(0.0, 1.0)), "{lenient:?}");
    }
}
