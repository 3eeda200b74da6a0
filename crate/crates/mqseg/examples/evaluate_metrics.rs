//! Walks the four evaluation metrics on small hand-checkable cases.
//!
//! ```bash
//! cargo run --example evaluate_metrics
//! ```

use mqseg::maskops::{BBox, BinaryMask, SoftMask};
use mqseg::metrics::{
    self, aggregate_scores, ImagePredictions, ScoredMask,
};
use mqseg::unified_data::{LabelMap, SegmentRecord, Task, UnifiedAnnotation};

fn strip(h: usize, y0: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_rect(h, 1, &BBox::new(0.0, y0 as f64, 1.0, y1 as f64).unwrap())
}

fn single_gt(label: &str, mask: &BinaryMask) -> UnifiedAnnotation {
    UnifiedAnnotation {
        image_id: "img".into(),
        height: mask.height(),
        width: mask.width(),
        task: Task::Panoptic,
        dataset_id: "demo".into(),
        records: vec![SegmentRecord::from_mask(label, mask).unwrap()],
    }
}

fn single_pred(label: &str, score: f64, mask: BinaryMask) -> Vec<ImagePredictions> {
    vec![ImagePredictions {
        image_id: "img".into(),
        segments: vec![ScoredMask { label: label.into(), score, mask, bbox: None }],
    }]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // panoptic quality: a 10-pixel strip matched by a 6-pixel prediction
    let report = metrics::panoptic_quality(
        &single_pred("cat", 0.9, strip(10, 0, 6)),
        &[single_gt("cat", &strip(10, 0, 10))],
    )?;
    println!("PQ with one match at IoU 0.6:      pq {:.3} sq {:.3} rq {:.3}", report.pq, report.sq, report.rq);

    // mask AP: IoU 5/9 passes the 0.50 and 0.55 thresholds only
    let report = metrics::mask_ap(
        &single_pred("cat", 0.9, strip(9, 2, 9)),
        &[single_gt("cat", &strip(9, 0, 7))],
    )?;
    println!("AP with IoU 5/9 = 0.556:           mean {:.3} (AP@0.50 {:.3})", report.mean_ap, report.ap50);

    // mean IoU: one class half right, one exact
    let gt = LabelMap::new(1, 4, vec!["a".into(), "a".into(), "b".into(), "b".into()])?;
    let pred = LabelMap::new(1, 4, vec!["a".into(), "ignore".into(), "b".into(), "b".into()])?;
    let report = metrics::mean_iou(&pred, &gt, "ignore")?;
    println!(
        "mIoU over classes at 0.5 and 1.0:  {:.3} ({:?})",
        report.miou.unwrap(),
        report.per_class
    );

    // foreground MSE: constant 0.5 against an all-ones target
    let target = BinaryMask::from_rect(2, 2, &BBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
    let soft = SoftMask::new(2, 2, vec![0.5; 4])?;
    println!("MSE of 0.5 vs all-ones target:     {:.3}", metrics::foreground_mse(&soft, &target)?);

    // referring IoU accumulates over the dataset
    let pairs = vec![
        (strip(4, 0, 2), strip(4, 0, 2)), // 2/2
        (strip(4, 0, 1), strip(4, 3, 4)), // 0/2
    ];
    println!(
        "cumulative referring IoU:          {:.3}",
        metrics::referring_cumulative_iou(&pairs)?.unwrap()
    );

    // per-dataset aggregation, the open-set benchmark convention
    let per_dataset_ap = [0.31, 0.62, 0.18, 0.44, 0.55];
    let agg = aggregate_scores(&per_dataset_ap).unwrap();
    println!("AP over 5 datasets:                mean {:.3}, median {:.3}", agg.mean, agg.median);
    Ok(())
}
