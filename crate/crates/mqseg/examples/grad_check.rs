//! Verifies the analytic gradients against central finite differences: the
//! loss stack with respect to decoder outputs and pixel features, and the
//! whole toy model with respect to every parameter.
//!
//! ```bash
//! cargo run --release --example grad_check
//! ```

use mqseg::losses::{self, grad_check, DecoderOutputs, LossWeights, PixelFeatureMap};
use mqseg::maskops::{rle_encode, BBox, BinaryMask};
use mqseg::matching::{QueryProvenance, QueryStrategy};
use mqseg::rng::SplitMix64;
use mqseg::semantics::embed_text;
use mqseg::toymodel::{self, ModelConfig, ModelParams};
use mqseg::unified_data::{from_panoptic, ThingStuff, UnifiedAnnotation};

fn random_annotation(rng: &mut SplitMix64, img: usize, objects: usize) -> UnifiedAnnotation {
    let band = img / objects;
    let segments: Vec<_> = (0..objects)
        .map(|k| {
            let y0 = k * band;
            let bh = 1 + rng.next_below(band as u64) as usize;
            let x0 = rng.next_below((img / 2) as u64) as usize;
            let bw = 1 + rng.next_below((img - x0 - 1) as u64) as usize;
            let rect = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64).unwrap();
            let tag = if k % 2 == 0 { ThingStuff::Thing } else { ThingStuff::Stuff };
            (
                format!("object-{k}"),
                rle_encode(&BinaryMask::from_rect(img, img, &rect)),
                tag,
            )
        })
        .collect();
    from_panoptic("probe", "demo", (img, img), &segments).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SplitMix64::new(2);
    let weights = LossWeights::default();

    // 1. loss gradients at a random point: Q=8 queries, G=3 objects, 8x8 grid
    let (queries, dim_text, dim_mask, grid) = (8usize, 16usize, 8usize, 8usize);
    let ann = random_annotation(&mut rng, 2 * grid, 3);
    let bank: Vec<_> = ann
        .records
        .iter()
        .map(|r| embed_text(&r.label_text, dim_text).unwrap())
        .collect();
    let outputs = DecoderOutputs {
        dim_text,
        dim_mask,
        class_embeds: (0..queries * dim_text).map(|_| rng.next_normal() * 0.5).collect(),
        boxes: (0..queries)
            .map(|_| {
                [
                    0.2 + 0.6 * rng.next_f64(),
                    0.2 + 0.6 * rng.next_f64(),
                    0.1 + 0.3 * rng.next_f64(),
                    0.1 + 0.3 * rng.next_f64(),
                ]
            })
            .collect(),
        mask_embeds: (0..queries * dim_mask).map(|_| rng.next_normal() * 0.5).collect(),
    };
    let pixel = PixelFeatureMap {
        dim: dim_mask,
        height: grid,
        width: grid,
        features: (0..grid * grid * dim_mask).map(|_| rng.next_normal() * 0.5).collect(),
    };
    let provenance = QueryProvenance::layout(3, 5);
    let breakdown = losses::total_loss(
        &outputs,
        &ann,
        &bank,
        &pixel,
        &weights,
        QueryStrategy::Mixed,
        &provenance,
    )?;
    println!(
        "loss at probe point: total {:.4} (class {:.4}, box {:.4}, mask {:.4})",
        breakdown.total, breakdown.class_loss, breakdown.box_loss, breakdown.mask_loss
    );

    let mut point = Vec::new();
    point.extend_from_slice(&outputs.class_embeds);
    for b in &outputs.boxes {
        point.extend_from_slice(b);
    }
    point.extend_from_slice(&outputs.mask_embeds);
    point.extend_from_slice(&pixel.features);
    let mut analytic = Vec::new();
    analytic.extend_from_slice(&breakdown.grads.class_embeds);
    for b in &breakdown.grads.boxes {
        analytic.extend_from_slice(b);
    }
    analytic.extend_from_slice(&breakdown.grads.mask_embeds);
    analytic.extend_from_slice(&breakdown.pixel_grads);

    let ann_f = ann.clone();
    let bank_f = bank.clone();
    let f = |x: &[f64]| {
        let mut off = 0;
        let class_embeds = x[off..off + queries * dim_text].to_vec();
        off += queries * dim_text;
        let boxes: Vec<[f64; 4]> = (0..queries)
            .map(|i| [x[off + 4 * i], x[off + 4 * i + 1], x[off + 4 * i + 2], x[off + 4 * i + 3]])
            .collect();
        off += 4 * queries;
        let mask_embeds = x[off..off + queries * dim_mask].to_vec();
        off += queries * dim_mask;
        let features = x[off..].to_vec();
        let o = DecoderOutputs { dim_text, dim_mask, class_embeds, boxes, mask_embeds };
        let p = PixelFeatureMap { dim: dim_mask, height: grid, width: grid, features };
        losses::total_loss(&o, &ann_f, &bank_f, &p, &weights, QueryStrategy::Mixed, &provenance)
            .unwrap()
            .total
    };
    let report = grad_check(f, &point, &analytic, 1e-5);
    println!(
        "loss gradients vs finite differences: max rel err {:.2e} over {} coords ({} kink-skipped)",
        report.max_rel_err, report.checked, report.skipped
    );

    // 2. end-to-end model gradients: every trainable parameter
    let cfg = ModelConfig {
        d_model: 8,
        pixel_channels: 6,
        grid_h: 4,
        grid_w: 4,
        n_learnable: 3,
        n_conditional: 5,
        d_text: 16,
        d_mask: 6,
        init_scale: 0.05,
    };
    let params = ModelParams::init(cfg.clone(), 11)?;
    let ann = random_annotation(&mut rng, 8, 3);
    let bank: Vec<_> = ann
        .records
        .iter()
        .map(|r| embed_text(&r.label_text, cfg.d_text).unwrap())
        .collect();
    let model_provenance = cfg.provenance();
    let trace = toymodel::forward(&ann.image_id, &params)?;
    let breakdown = losses::total_loss(
        &trace.outputs,
        &ann,
        &bank,
        &trace.pixel,
        &weights,
        QueryStrategy::Mixed,
        &model_provenance,
    )?;
    let mut analytic = vec![0.0; params.num_params()];
    toymodel::backward(&trace, &params, &breakdown.grads, &breakdown.pixel_grads, &mut analytic);

    let base = params.clone();
    let f = |x: &[f64]| {
        let mut p = base.clone();
        p.flat_mut().copy_from_slice(x);
        let trace = toymodel::forward(&ann.image_id, &p).unwrap();
        losses::total_loss(
            &trace.outputs,
            &ann,
            &bank,
            &trace.pixel,
            &weights,
            QueryStrategy::Mixed,
            &model_provenance,
        )
        .unwrap()
        .total
    };
    let report = grad_check(f, params.flat(), &analytic, 1e-5);
    println!(
        "model gradients vs finite differences: max rel err {:.2e} over {} parameters ({} kink-skipped)",
        report.max_rel_err,
        params.num_params(),
        report.skipped
    );
    Ok(())
}
