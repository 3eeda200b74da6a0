//! Evaluation suite: panoptic quality, COCO-style average precision over
//! mask (or box) IoU thresholds, mean IoU for semantic and referring
//! segmentation, and MSE for foreground segmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::maskops::{self, BBox, BinaryMask, MaskError, SoftMask};
use crate::unified_data::{LabelMap, UnifiedAnnotation};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image {image_id:?}: predicted segments {a} and {b} overlap")]
    Overlap { image_id: String, a: usize, b: usize },
    #[error("prediction for image {0:?} has no ground-truth counterpart")]
    UnmatchedPredictionImage(String),
    #[error("ground truth for image {0:?} has no prediction entry")]
    MissingPredictionImage(String),
    #[error("image {image_id:?}, segment {index}: {source}")]
    BadSegment { image_id: String, index: usize, source: MaskError },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Data(#[from] crate::unified_data::DataError),
}

/// One scored predicted segment.
#[derive(Debug, Clone)]
pub struct ScoredMask {
    pub label: String,
    pub score: f64,
    pub mask: BinaryMask,
    /// Optional explicit box; the tight mask box is used when absent.
    pub bbox: Option<BBox>,
}

/// All predictions for one image.
#[derive(Debug, Clone)]
pub struct ImagePredictions {
    pub image_id: String,
    pub segments: Vec<ScoredMask>,
}

fn align<'a>(
    preds: &'a [ImagePredictions],
    gts: &'a [UnifiedAnnotation],
) -> Result<Vec<(&'a UnifiedAnnotation, &'a ImagePredictions)>, MetricError> {
    let by_id: HashMap<&str, &ImagePredictions> =
        preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    for p in preds {
        if !gt_ids.contains(p.image_id.as_str()) {
            return Err(MetricError::UnmatchedPredictionImage(p.image_id.clone()));
        }
    }
    gts.iter()
        .map(|g| {
            by_id
                .get(g.image_id.as_str())
                .map(|p| (g, *p))
                .ok_or_else(|| MetricError::MissingPredictionImage(g.image_id.clone()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// panoptic quality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PqClassStats {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: BTreeMap<String, PqClassStats>,
}

/// Panoptic quality: a predicted and GT segment of the same class match iff
/// IoU > 0.5 (unique by construction); per class,
/// `PQ = sum_TP IoU / (TP + FP/2 + FN/2)`, averaged over classes present.
///
/// GT pixels covered by no segment are void: they are excluded from the IoU
/// denominator, and unmatched predictions lying mostly (> 0.5) on void are
/// discarded rather than counted as false positives.
pub fn panoptic_quality(
    preds: &[ImagePredictions],
    gts: &[UnifiedAnnotation],
) -> Result<PanopticReport, MetricError> {
    struct Acc {
        tp: usize,
        fp: usize,
        fn_: usize,
        iou_sum: f64,
    }
    let mut classes: BTreeMap<String, Acc> = BTreeMap::new();

    for (gt, pred) in align(preds, gts)? {
        let gt_masks: Vec<BinaryMask> = gt
            .records
            .iter()
            .map(|r| r.decode_mask())
            .collect::<Result<_, _>>()?;
        for (i, p) in pred.segments.iter().enumerate() {
            for (j, q) in pred.segments.iter().enumerate().skip(i + 1) {
                if p.mask.intersects(&q.mask) {
                    return Err(MetricError::Overlap {
                        image_id: pred.image_id.clone(),
                        a: i,
                        b: j,
                    });
                }
            }
        }

        // void = pixels covered by no GT segment
        let mut void = vec![true; gt.height * gt.width];
        for m in &gt_masks {
            for (v, &b) in void.iter_mut().zip(m.bits()) {
                if b {
                    *v = false;
                }
            }
        }

        let mut gt_matched = vec![false; gt.records.len()];
        let mut pred_matched = vec![false; pred.segments.len()];
        for (gi, (grec, gmask)) in gt.records.iter().zip(&gt_masks).enumerate() {
            for (pi, seg) in pred.segments.iter().enumerate() {
                if pred_matched[pi] || seg.label != grec.label_text {
                    continue;
                }
                let mut inter = 0usize;
                let mut p_void = 0usize;
                let mut p_area = 0usize;
                for (idx, (&pb, &gb)) in seg.mask.bits().iter().zip(gmask.bits()).enumerate() {
                    if pb {
                        p_area += 1;
                        if gb {
                            inter += 1;
                        }
                        if void[idx] {
                            p_void += 1;
                        }
                    }
                }
                let denom = (p_area + gmask.area() - inter - p_void) as f64;
                if denom <= 0.0 {
                    continue;
                }
                let iou = inter as f64 / denom;
                if iou > 0.5 {
                    gt_matched[gi] = true;
                    pred_matched[pi] = true;
                    let a = classes
                        .entry(grec.label_text.clone())
                        .or_insert(Acc { tp: 0, fp: 0, fn_: 0, iou_sum: 0.0 });
                    a.tp += 1;
                    a.iou_sum += iou;
                    break;
                }
            }
        }
        for (gi, grec) in gt.records.iter().enumerate() {
            if !gt_matched[gi] {
                classes
                    .entry(grec.label_text.clone())
                    .or_insert(Acc { tp: 0, fp: 0, fn_: 0, iou_sum: 0.0 })
                    .fn_ += 1;
            }
        }
        for (pi, seg) in pred.segments.iter().enumerate() {
            if pred_matched[pi] {
                continue;
            }
            let p_area = seg.mask.area();
            let p_void = seg
                .mask
                .bits()
                .iter()
                .zip(&void)
                .filter(|(&b, &v)| b && v)
                .count();
            // mostly-void predictions are ignored, per the void convention
            if p_area == 0 || p_void * 2 > p_area {
                continue;
            }
            classes
                .entry(seg.label.clone())
                .or_insert(Acc { tp: 0, fp: 0, fn_: 0, iou_sum: 0.0 })
                .fp += 1;
        }
    }

    let mut per_class = BTreeMap::new();
    let mut pq_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut rq_sum = 0.0;
    let mut counted = 0usize;
    for (label, a) in classes {
        if a.tp + a.fp + a.fn_ == 0 {
            continue;
        }
        let denom = a.tp as f64 + 0.5 * a.fp as f64 + 0.5 * a.fn_ as f64;
        let sq = if a.tp > 0 { a.iou_sum / a.tp as f64 } else { 0.0 };
        let rq = a.tp as f64 / denom;
        let pq = sq * rq;
        pq_sum += pq;
        sq_sum += sq;
        rq_sum += rq;
        counted += 1;
        per_class.insert(
            label,
            PqClassStats { pq, sq, rq, tp: a.tp, fp: a.fp, fn_: a.fn_, iou_sum: a.iou_sum },
        );
    }
    let n = counted.max(1) as f64;
    Ok(PanopticReport { pq: pq_sum / n, sq: sq_sum / n, rq: rq_sum / n, per_class })
}

// ---------------------------------------------------------------------------
// average precision
// ---------------------------------------------------------------------------

/// The COCO threshold ladder 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ApReport {
    /// Mean AP over classes and thresholds.
    pub mean_ap: f64,
    /// AP at IoU 0.50 (mean over classes).
    pub ap50: f64,
    /// Per-threshold AP, aligned with [`coco_thresholds`].
    pub per_threshold: Vec<f64>,
    pub per_class: BTreeMap<String, f64>,
}

/// COCO-protocol AP: per class and IoU threshold, predictions match greedily
/// in descending score to the best unmatched ground truth with IoU >= t;
/// AP is mean interpolated precision at the 101 recall points; the headline
/// number averages classes then thresholds. With `use_boxes` the same path
/// scores box IoU instead of mask IoU.
pub fn average_precision(
    preds: &[ImagePredictions],
    gts: &[UnifiedAnnotation],
    use_boxes: bool,
) -> Result<ApReport, MetricError> {
    let thresholds = coco_thresholds();
    let pairs = align(preds, gts)?;

    // classes with at least one ground truth anywhere
    let mut class_gt_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for gt in gts {
        for r in &gt.records {
            *class_gt_counts.entry(r.label_text.as_str()).or_default() += 1;
        }
    }

    struct ClassImage {
        /// (score, image index, within-image rank), score-sorted.
        dets: Vec<(f64, usize, usize)>,
        /// iou[det][gt]
        ious: Vec<Vec<f64>>,
        n_gt: usize,
    }
    let mut per_class: BTreeMap<&str, Vec<ClassImage>> = BTreeMap::new();

    for (img_idx, (gt, pred)) in pairs.iter().enumerate() {
        let mut class_names: BTreeSet<&str> = BTreeSet::new();
        for r in &gt.records {
            class_names.insert(r.label_text.as_str());
        }
        for s in &pred.segments {
            class_names.insert(s.label.as_str());
        }
        for class in class_names {
            if !class_gt_counts.contains_key(class) {
                continue; // no GT anywhere: class excluded from AP
            }
            let gt_records: Vec<_> =
                gt.records.iter().filter(|r| r.label_text == class).collect();
            let mut det_indices: Vec<usize> = pred
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == class)
                .map(|(i, _)| i)
                .collect();
            if gt_records.is_empty() && det_indices.is_empty() {
                continue;
            }
            // score-descending, insertion order on ties
            det_indices.sort_by(|&a, &b| {
                pred.segments[b]
                    .score
                    .partial_cmp(&pred.segments[a].score)
                    .expect("finite score")
                    .then(a.cmp(&b))
            });
            let mut ious = Vec::with_capacity(det_indices.len());
            for &di in &det_indices {
                let seg = &pred.segments[di];
                let mut row = Vec::with_capacity(gt_records.len());
                for rec in &gt_records {
                    let iou = if use_boxes {
                        let pb = match &seg.bbox {
                            Some(b) => *b,
                            None => maskops::mask_to_bbox(&seg.mask).map_err(|source| {
                                MetricError::BadSegment {
                                    image_id: pred.image_id.clone(),
                                    index: di,
                                    source,
                                }
                            })?,
                        };
                        maskops::bbox_iou(&pb, &rec.bbox)
                    } else {
                        let gmask = rec.decode_mask()?;
                        maskops::mask_iou(&seg.mask, &gmask)?
                    };
                    row.push(iou);
                }
                ious.push(row);
            }
            let dets = det_indices
                .iter()
                .enumerate()
                .map(|(rank, &di)| (pred.segments[di].score, img_idx, rank))
                .collect();
            per_class
                .entry(class)
                .or_default()
                .push(ClassImage { dets, ious, n_gt: gt_records.len() });
        }
    }

    let mut per_class_ap = BTreeMap::new();
    let mut per_threshold_sums = vec![0.0; thresholds.len()];
    let mut ap50_sum = 0.0;
    let mut mean_sum = 0.0;
    let n_classes = class_gt_counts.len();

    for (&class, images) in &per_class {
        let total_gt: usize = images.iter().map(|im| im.n_gt).sum();
        let mut class_mean = 0.0;
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for im in images {
                let mut gt_used = vec![false; im.n_gt];
                for (di, &(score, img, rank)) in im.dets.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, &iou) in im.ious[di].iter().enumerate() {
                        if gt_used[gi] || iou < t {
                            continue;
                        }
                        // strict greater keeps the lowest GT index on ties
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                    let tp = if let Some((gi, _)) = best {
                        gt_used[gi] = true;
                        true
                    } else {
                        false
                    };
                    pooled.push((score, img, rank, tp));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite score")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let ap = ap_from_ranking(&pooled, total_gt);
            class_mean += ap / thresholds.len() as f64;
            per_threshold_sums[ti] += ap;
            if ti == 0 {
                ap50_sum += ap;
            }
        }
        per_class_ap.insert(class.to_string(), class_mean);
        mean_sum += class_mean;
    }

    let n = n_classes.max(1) as f64;
    Ok(ApReport {
        mean_ap: mean_sum / n,
        ap50: ap50_sum / n,
        per_threshold: per_threshold_sums.iter().map(|s| s / n).collect(),
        per_class: per_class_ap,
    })
}

pub fn mask_ap(
    preds: &[ImagePredictions],
    gts: &[UnifiedAnnotation],
) -> Result<ApReport, MetricError> {
    average_precision(preds, gts, false)
}

/// 101-point interpolated AP from a score-ranked TP/FP sequence.
fn ap_from_ranking(ranked: &[(f64, usize, usize, bool)], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for (k, &(_, _, _, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    // precision at recall r is the max precision at any recall >= r
    let mut max_right = 0.0;
    for p in precisions.iter_mut().rev() {
        if *p > max_right {
            max_right = *p;
        } else {
            *p = max_right;
        }
    }
    let mut ap = 0.0;
    for point in 0..=100 {
        let r = point as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map_or(0.0, |idx| precisions[idx]);
        ap += p / 101.0;
    }
    // the 101-term sum can land a few ulps above 1
    ap.min(1.0)
}

// ---------------------------------------------------------------------------
// mean IoU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    /// Mean over classes; absent when no class is present outside ignore.
    pub miou: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
}

/// Accumulates per-class intersection/union pixel counts across images.
#[derive(Debug, Default)]
pub struct SemanticConfusion {
    counts: BTreeMap<String, (u64, u64)>,
}

impl SemanticConfusion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image pair. Pixels whose GT label is `ignore` are excluded
    /// from every count; a prediction labeled `ignore` is "no prediction"
    /// (it can miss a GT class but never creates a false positive).
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: &str) -> Result<(), MetricError> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(MetricError::Mask(MaskError::DimMismatch {
                ah: pred.height,
                aw: pred.width,
                bh: gt.height,
                bw: gt.width,
            }));
        }
        for (p, g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore {
                continue;
            }
            if p == g {
                let e = self.counts.entry(g.clone()).or_default();
                e.0 += 1;
                e.1 += 1;
            } else {
                self.counts.entry(g.clone()).or_default().1 += 1;
                if p != ignore {
                    self.counts.entry(p.clone()).or_default().1 += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> MiouReport {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (label, (inter, union)) in self.counts {
            if union == 0 {
                continue;
            }
            let iou = inter as f64 / union as f64;
            per_class.insert(label, iou);
            sum += iou;
            n += 1;
        }
        MiouReport { miou: if n == 0 { None } else { Some(sum / n as f64) }, per_class }
    }
}

/// Per-class IoU between two label maps, averaged over the classes present.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, ignore: &str) -> Result<MiouReport, MetricError> {
    let mut confusion = SemanticConfusion::new();
    confusion.add(pred, gt, ignore)?;
    Ok(confusion.finish())
}

/// Referring-segmentation convention: one cumulative IoU over the dataset,
/// total intersection over total union.
pub fn referring_cumulative_iou(
    pairs: &[(BinaryMask, BinaryMask)],
) -> Result<Option<f64>, MetricError> {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (pred, gt) in pairs {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(MetricError::Mask(MaskError::DimMismatch {
                ah: pred.height(),
                aw: pred.width(),
                bh: gt.height(),
                bw: gt.width(),
            }));
        }
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    Ok(if union == 0 { None } else { Some(inter as f64 / union as f64) })
}

/// Mean squared error between a soft prediction and a binary target.
pub fn foreground_mse(pred: &SoftMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    if pred.h != gt.height() || pred.w != gt.width() {
        return Err(MetricError::Mask(MaskError::DimMismatch {
            ah: pred.h,
            aw: pred.w,
            bh: gt.height(),
            bw: gt.width(),
        }));
    }
    let n = pred.values.len() as f64;
    let sum: f64 = pred
        .values
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let d = p - f64::from(g);
            d * d
        })
        .sum();
    Ok(sum / n)
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

/// Resolves overlapping scored masks into panoptic form: each pixel goes to
/// the highest-scoring covering segment (ties to the earliest), empty
/// leftovers are dropped.
pub fn resolve_overlaps(segments: &[ScoredMask], height: usize, width: usize) -> Vec<ScoredMask> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        segments[b]
            .score
            .partial_cmp(&segments[a].score)
            .expect("finite score")
            .then(a.cmp(&b))
    });
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for &idx in &order {
        for (pix, &b) in segments[idx].mask.bits().iter().enumerate() {
            if b && owner[pix].is_none() {
                owner[pix] = Some(idx);
            }
        }
    }
    let mut out = Vec::new();
    for (idx, seg) in segments.iter().enumerate() {
        let bits: Vec<bool> = owner.iter().map(|&o| o == Some(idx)).collect();
        if bits.iter().any(|&b| b) {
            out.push(ScoredMask {
                label: seg.label.clone(),
                score: seg.score,
                mask: BinaryMask::new(height, width, bits).expect("non-degenerate shape"),
                bbox: seg.bbox,
            });
        }
    }
    out
}

/// Combined evaluation report; tasks fill the fields they define.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_threshold: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_pq: Option<BTreeMap<String, PqClassStats>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_ap: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_iou: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

/// Mean and median of per-dataset scores.
pub fn aggregate_scores(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite score"));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    Some(Aggregate { mean, median })
}
