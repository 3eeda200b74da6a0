//! Trains the toy encoder-decoder until it memorizes a four-image synthetic
//! set, then scores the training set with Mask AP, PQ, and mIoU. Run with
//! `--release`, the loop is hot.
//!
//! ```bash
//! cargo run --release --example train_overfit
//! ```

use mqseg::datamix::{MixEntry, MixSpec};
use mqseg::losses::LossWeights;
use mqseg::maskops::{rle_encode, BBox, BinaryMask};
use mqseg::matching::QueryStrategy;
use mqseg::metrics::{self, ImagePredictions, ScoredMask};
use mqseg::toymodel::{self, ModelConfig, TrainConfig};
use mqseg::unified_data::{from_panoptic, Dataset, ThingStuff, UnifiedAnnotation};

fn rect(img: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> mqseg::maskops::Rle {
    let b = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
    rle_encode(&BinaryMask::from_rect(img, img, &b))
}

fn synthetic_images() -> Vec<UnifiedAnnotation> {
    let img = 8;
    let layouts = [
        [(0, 0, 2, 4), (3, 2, 5, 8), (6, 0, 8, 3)],
        [(0, 3, 2, 8), (3, 0, 5, 5), (6, 4, 8, 8)],
        [(0, 1, 3, 6), (4, 0, 5, 7), (6, 2, 8, 6)],
        [(0, 0, 1, 8), (2, 3, 5, 6), (6, 5, 8, 8)],
    ];
    let labels =
        [("crate", ThingStuff::Thing), ("moss", ThingStuff::Stuff), ("lamp", ThingStuff::Thing)];
    layouts
        .iter()
        .enumerate()
        .map(|(k, rects)| {
            let segments: Vec<_> = rects
                .iter()
                .zip(labels)
                .map(|(&(y0, x0, y1, x1), (label, tag))| {
                    (label.to_string(), rect(img, y0, x0, y1, x1), tag)
                })
                .collect();
            from_panoptic(&format!("overfit-{k}"), "toy", (img, img), &segments).unwrap()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let anns = synthetic_images();
    let datasets = vec![Dataset::new("toy", anns.clone())];
    let mix = MixSpec { seed: 7, entries: vec![MixEntry { dataset: "toy".into(), ratio: 1 }] };
    let labels: Vec<String> = ["crate", "moss", "lamp"].iter().map(|s| s.to_string()).collect();

    let model = ModelConfig {
        d_model: 32,
        pixel_channels: 16,
        grid_h: 8,
        grid_w: 8,
        n_learnable: 4,
        n_conditional: 12,
        d_text: 32,
        d_mask: 16,
        init_scale: 0.02,
    };
    let train = TrainConfig {
        learning_rate: 1e-2,
        epochs: 1200,
        batch_size: 4,
        warmup_iterations: 10,
        seed: 6,
        ..TrainConfig::default()
    };

    println!("training {} steps on 4 images x 3 objects (mixed strategy)...", train.epochs);
    let out = toymodel::train(
        &datasets,
        &mix,
        &model,
        &train,
        QueryStrategy::Mixed,
        &LossWeights::default(),
    )?;
    for (step, loss) in out.loss_trace.iter().enumerate() {
        if step % 200 == 0 || step + 1 == out.loss_trace.len() {
            println!("  step {step:>5}: loss {loss:.4}");
        }
    }

    // score the training set: thresholded predictions, overlaps resolved to
    // panoptic form
    let mut preds = Vec::new();
    for ann in &anns {
        let raw = toymodel::predict(&ann.image_id, &out.params, &labels, 0.5)?;
        let segments: Vec<ScoredMask> = raw
            .iter()
            .map(|p| ScoredMask {
                label: labels[p.label_index].clone(),
                score: p.score,
                mask: p.mask.threshold(0.5),
                bbox: None,
            })
            .collect();
        preds.push(ImagePredictions {
            image_id: ann.image_id.clone(),
            segments: metrics::resolve_overlaps(&segments, ann.height, ann.width),
        });
    }
    let ap = metrics::mask_ap(&preds, &anns)?;
    let pq = metrics::panoptic_quality(&preds, &anns)?;
    println!("\ntraining-set scores after overfitting:");
    println!("  Mask AP@0.50      {:.4}", ap.ap50);
    println!("  Mask AP (0.5:.95) {:.4}", ap.mean_ap);
    println!("  PQ                {:.4} (SQ {:.4}, RQ {:.4})", pq.pq, pq.sq, pq.rq);
    Ok(())
}
