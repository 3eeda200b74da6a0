//! Set-prediction training objective: focal class loss on class-embedding /
//! text-embedding dot products, GIoU + L1 box loss, and dice mask loss, each
//! with analytic gradients with respect to the decoder outputs (and, for the
//! mask term, the pixel features).
//!
//! Conventions: boxes are normalized (cx, cy, w, h) in [0,1]; ground-truth
//! boxes are normalized by image size before the loss; the class loss is
//! normalized by the number of ground truths, box and dice terms by the
//! number of matched pairs. Matching is treated as a constant during
//! differentiation.

use thiserror::Error;

use crate::maskops::{center_to_corners, BinaryMask};
use crate::matching::{self, Assignment, CostWeights, MatchError, QueryProvenance, QueryStrategy};
use crate::semantics::TextEmbedding;
use crate::unified_data::{DataError, UnifiedAnnotation};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("embedding dim mismatch: outputs carry {out} dims, text bank {bank}")]
    DimMismatch { out: usize, bank: usize },
    #[error("text bank has {bank} entries for {gts} ground truths")]
    BankSize { bank: usize, gts: usize },
    #[error("predicted box {index} has non-positive size ({w}, {h})")]
    DegenerateBox { index: usize, w: f64, h: f64 },
    #[error("assignment references query {query} but there are {queries}")]
    BadAssignment { query: usize, queries: usize },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-query decoder outputs: class embeddings, normalized boxes, mask
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutputs {
    pub dim_text: usize,
    pub dim_mask: usize,
    /// Q x dim_text, row-major.
    pub class_embeds: Vec<f64>,
    /// Normalized (cx, cy, w, h).
    pub boxes: Vec<[f64; 4]>,
    /// Q x dim_mask, row-major.
    pub mask_embeds: Vec<f64>,
}

impl DecoderOutputs {
    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn class_embed(&self, q: usize) -> &[f64] {
        &self.class_embeds[q * self.dim_text..(q + 1) * self.dim_text]
    }

    pub fn mask_embed(&self, q: usize) -> &[f64] {
        &self.mask_embeds[q * self.dim_mask..(q + 1) * self.dim_mask]
    }
}

/// Dense per-cell feature map from the pixel encoder; mask logits are dot
/// products of mask embeddings with these features.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    /// cells x dim, row-major over cells.
    pub features: Vec<f64>,
}

impl PixelFeatureMap {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn feature(&self, cell: usize) -> &[f64] {
        &self.features[cell * self.dim..(cell + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 4.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_dice: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    /// Matcher weights mirroring the loss weights.
    pub fn matcher_weights(&self) -> CostWeights {
        CostWeights {
            w_cls: self.lambda_cls,
            w_l1: self.lambda_l1,
            w_giou: self.lambda_giou,
            w_dice: self.lambda_dice,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            dice_eps: self.dice_eps,
        }
    }
}

/// Gradients shaped like [`DecoderOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub class_embeds: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
    pub mask_embeds: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros_like(outputs: &DecoderOutputs) -> Self {
        Self {
            class_embeds: vec![0.0; outputs.class_embeds.len()],
            boxes: vec![[0.0; 4]; outputs.boxes.len()],
            mask_embeds: vec![0.0; outputs.mask_embeds.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Focal class loss, unweighted, normalized by the number of GTs.
    pub class_loss: f64,
    /// lambda_l1 * mean L1 + lambda_giou * mean (1 - GIoU) over matched pairs.
    pub box_loss: f64,
    /// Mean dice loss over matched pairs, unweighted.
    pub mask_loss: f64,
    /// lambda_cls * class + box + lambda_dice * mask.
    pub total: f64,
    /// Gradients of `total` w.r.t. the decoder outputs.
    pub grads: OutputGrads,
    /// Gradient of `total` w.r.t. the pixel features.
    pub pixel_grads: Vec<f64>,
    /// The assignment the losses were computed on (absent when there were no
    /// ground truths).
    pub assignment: Option<Assignment>,
}

// ---------------------------------------------------------------------------
// numeric primitives
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss of a positive pair at logit `z`:
/// `-alpha * (1 - p)^gamma * ln p` with `p = sigmoid(z)`.
pub fn focal_positive(z: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let ln_p = -softplus(-z);
    let loss = alpha * (1.0 - p).powf(gamma) * (-ln_p);
    let dz = alpha * (gamma * p * (1.0 - p).powf(gamma) * ln_p - (1.0 - p).powf(gamma + 1.0));
    (loss, dz)
}

/// Focal loss of a negative pair at logit `z`:
/// `-(1 - alpha) * p^gamma * ln(1 - p)`.
pub fn focal_negative(z: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let sp = softplus(z); // -ln(1 - p)
    let loss = (1.0 - alpha) * p.powf(gamma) * sp;
    let dz = (1.0 - alpha) * (gamma * p.powf(gamma) * (1.0 - p) * sp + p.powf(gamma + 1.0));
    (loss, dz)
}

/// Matcher class cost: positive-pair loss minus negative-pair loss, so a
/// confident correct pair is strongly preferred over a confident wrong one.
pub fn focal_matcher_cost(z: f64, alpha: f64, gamma: f64) -> f64 {
    focal_positive(z, alpha, gamma).0 - focal_negative(z, alpha, gamma).0
}

/// GIoU of two corner-form boxes and its gradient w.r.t. the first box.
/// Min/max kinks take the first-box-active subgradient.
pub fn giou_with_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let area_p = (p[2] - p[0]) * (p[3] - p[1]);
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);

    let ix0 = p[0].max(g[0]);
    let iy0 = p[1].max(g[1]);
    let ix1 = p[2].min(g[2]);
    let iy1 = p[3].min(g[3]);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_g - inter;

    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let enclose = cw * ch;

    let iou = inter / union;
    let giou = iou - (enclose - union) / enclose;

    let active = iw > 0.0 && ih > 0.0;
    let d_inter = [
        if active && p[0] >= g[0] { -ih } else { 0.0 },
        if active && p[1] >= g[1] { -iw } else { 0.0 },
        if active && p[2] <= g[2] { ih } else { 0.0 },
        if active && p[3] <= g[3] { iw } else { 0.0 },
    ];
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let d_area = [-ph, -pw, ph, pw];
    let d_enclose = [
        if p[0] <= g[0] { -ch } else { 0.0 },
        if p[1] <= g[1] { -cw } else { 0.0 },
        if p[2] >= g[2] { ch } else { 0.0 },
        if p[3] >= g[3] { cw } else { 0.0 },
    ];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        // giou = iou - 1 + union / enclose
        grad[i] = d_iou + d_union / enclose - union * d_enclose[i] / (enclose * enclose);
    }
    (giou, grad)
}

/// Dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)` on given
/// probabilities, with the gradient w.r.t. the probabilities.
pub fn dice_loss_probs(probs: &[f64], target: &[f64], eps: f64) -> (f64, Vec<f64>) {
    debug_assert_eq!(probs.len(), target.len());
    let sum_p: f64 = probs.iter().sum();
    let sum_g: f64 = target.iter().sum();
    let inter: f64 = probs.iter().zip(target).map(|(p, g)| p * g).sum();
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_g + eps;
    let loss = 1.0 - num / den;
    let grads = target
        .iter()
        .map(|g| -(2.0 * g * den - num) / (den * den))
        .collect();
    (loss, grads)
}

/// Downsamples a binary mask to a grid by strict per-cell majority vote
/// (exactly half set counts as empty).
pub fn downsample_majority(mask: &BinaryMask, grid_h: usize, grid_w: usize) -> Vec<f64> {
    let mut set = vec![0usize; grid_h * grid_w];
    let mut total = vec![0usize; grid_h * grid_w];
    for y in 0..mask.height() {
        let gy = y * grid_h / mask.height();
        for x in 0..mask.width() {
            let gx = x * grid_w / mask.width();
            let cell = gy * grid_w + gx;
            total[cell] += 1;
            if mask.get(y, x) {
                set[cell] += 1;
            }
        }
    }
    set.iter()
        .zip(&total)
        .map(|(&s, &t)| if 2 * s > t { 1.0 } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// component losses
// ---------------------------------------------------------------------------

fn check_assignment(assignment: &Assignment, queries: usize) -> Result<(), LossError> {
    for &q in &assignment.query_for_gt {
        if q >= queries {
            return Err(LossError::BadAssignment { query: q, queries });
        }
    }
    Ok(())
}

/// Focal class loss over all (query, GT text) pairs: the matched pair is the
/// positive, every other pair is a negative. Normalized by the number of GTs.
/// Returns the loss and its gradient w.r.t. the class embeddings.
pub fn focal_class_loss(
    outputs: &DecoderOutputs,
    text_bank: &[TextEmbedding],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>), LossError> {
    let gts = text_bank.len();
    check_assignment(assignment, outputs.num_queries())?;
    if let Some(bad) = text_bank.iter().find(|t| t.dim() != outputs.dim_text) {
        return Err(LossError::DimMismatch { out: outputs.dim_text, bank: bad.dim() });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; outputs.class_embeds.len()];
    for q in 0..outputs.num_queries() {
        let embed = outputs.class_embed(q);
        for (g, text) in text_bank.iter().enumerate() {
            let z: f64 = embed.iter().zip(text.vector()).map(|(a, b)| a * b).sum();
            let positive = assignment.query_for_gt[g] == q;
            let (l, dz) = if positive {
                focal_positive(z, weights.focal_alpha, weights.focal_gamma)
            } else {
                focal_negative(z, weights.focal_alpha, weights.focal_gamma)
            };
            loss += l;
            let scale = dz / gts as f64;
            for (gi, hv) in grad[q * outputs.dim_text..(q + 1) * outputs.dim_text]
                .iter_mut()
                .zip(text.vector())
            {
                *gi += scale * hv;
            }
        }
    }
    Ok((loss / gts as f64, grad))
}

#[derive(Debug, Clone)]
pub struct BoxLossParts {
    /// lambda_l1 * l1_mean + lambda_giou * giou_mean.
    pub loss: f64,
    pub l1_mean: f64,
    pub giou_term_mean: f64,
    /// Gradient of `loss` w.r.t. the predicted boxes (center form).
    pub grad: Vec<[f64; 4]>,
}

/// L1 + GIoU box loss over matched pairs; GT boxes in normalized center form.
pub fn box_loss(
    outputs: &DecoderOutputs,
    gt_boxes: &[[f64; 4]],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<BoxLossParts, LossError> {
    check_assignment(assignment, outputs.num_queries())?;
    let matched = assignment.query_for_gt.len();
    let mut grad = vec![[0.0; 4]; outputs.num_queries()];
    let mut l1_sum = 0.0;
    let mut giou_sum = 0.0;
    for (g, &q) in assignment.query_for_gt.iter().enumerate() {
        let pred = outputs.boxes[q];
        if pred[2] <= 0.0 || pred[3] <= 0.0 {
            return Err(LossError::DegenerateBox { index: q, w: pred[2], h: pred[3] });
        }
        let gt = gt_boxes[g];
        for i in 0..4 {
            let delta = pred[i] - gt[i];
            l1_sum += delta.abs();
            grad[q][i] += weights.lambda_l1 * delta.signum() / matched as f64;
        }
        let (giou, d_corners) = giou_with_grad(center_to_corners(&pred), center_to_corners(&gt));
        giou_sum += 1.0 - giou;
        let scale = -weights.lambda_giou / matched as f64;
        // chain corner gradients back to (cx, cy, w, h)
        grad[q][0] += scale * (d_corners[0] + d_corners[2]);
        grad[q][1] += scale * (d_corners[1] + d_corners[3]);
        grad[q][2] += scale * (d_corners[2] - d_corners[0]) / 2.0;
        grad[q][3] += scale * (d_corners[3] - d_corners[1]) / 2.0;
    }
    let l1_mean = l1_sum / matched as f64;
    let giou_term_mean = giou_sum / matched as f64;
    Ok(BoxLossParts {
        loss: weights.lambda_l1 * l1_mean + weights.lambda_giou * giou_term_mean,
        l1_mean,
        giou_term_mean,
        grad,
    })
}

/// Dice mask loss over matched pairs. Predictions are sigmoids of mask
/// embedding / pixel feature dot products; GT masks arrive already
/// downsampled to the pixel grid. Returns (loss, grad wrt mask embeddings,
/// grad wrt pixel features), loss unweighted and averaged over pairs.
pub fn dice_mask_loss(
    outputs: &DecoderOutputs,
    pixel_features: &PixelFeatureMap,
    gt_grid_masks: &[Vec<f64>],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if pixel_features.dim != outputs.dim_mask {
        return Err(LossError::DimMismatch { out: outputs.dim_mask, bank: pixel_features.dim });
    }
    check_assignment(assignment, outputs.num_queries())?;
    let matched = assignment.query_for_gt.len();
    let cells = pixel_features.cells();
    let mut loss = 0.0;
    let mut grad_embeds = vec![0.0; outputs.mask_embeds.len()];
    let mut grad_pixels = vec![0.0; pixel_features.features.len()];
    for (g, &q) in assignment.query_for_gt.iter().enumerate() {
        let embed = outputs.mask_embed(q);
        let probs: Vec<f64> = (0..cells)
            .map(|c| {
                let z: f64 = embed
                    .iter()
                    .zip(pixel_features.feature(c))
                    .map(|(a, b)| a * b)
                    .sum();
                sigmoid(z)
            })
            .collect();
        let (l, dprobs) = dice_loss_probs(&probs, &gt_grid_masks[g], weights.dice_eps);
        loss += l / matched as f64;
        for c in 0..cells {
            let dz = dprobs[c] * probs[c] * (1.0 - probs[c]) / matched as f64;
            let feat = pixel_features.feature(c);
            for k in 0..outputs.dim_mask {
                grad_embeds[q * outputs.dim_mask + k] += dz * feat[k];
                grad_pixels[c * outputs.dim_mask + k] += dz * embed[k];
            }
        }
    }
    Ok((loss, grad_embeds, grad_pixels))
}

/// Matches ground truth to queries with the given strategy, then evaluates
/// the three component losses on the resulting assignment. Unmatched queries
/// contribute only negative class-loss terms. With no ground truths, all
/// terms and gradients are zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    outputs: &DecoderOutputs,
    ann: &UnifiedAnnotation,
    text_bank: &[TextEmbedding],
    pixel_features: &PixelFeatureMap,
    weights: &LossWeights,
    strategy: QueryStrategy,
    provenance: &QueryProvenance,
) -> Result<LossBreakdown, LossError> {
    if text_bank.len() != ann.records.len() {
        return Err(LossError::BankSize { bank: text_bank.len(), gts: ann.records.len() });
    }
    if ann.records.is_empty() {
        return Ok(LossBreakdown {
            class_loss: 0.0,
            box_loss: 0.0,
            mask_loss: 0.0,
            total: 0.0,
            grads: OutputGrads::zeros_like(outputs),
            pixel_grads: vec![0.0; pixel_features.features.len()],
            assignment: None,
        });
    }

    let gt_boxes: Vec<[f64; 4]> = ann
        .records
        .iter()
        .map(|r| r.bbox.to_center_form(ann.height, ann.width))
        .collect();
    let mut gt_grid_masks = Vec::with_capacity(ann.records.len());
    for rec in &ann.records {
        let mask = rec.decode_mask().map_err(DataError::from)?;
        gt_grid_masks.push(downsample_majority(&mask, pixel_features.height, pixel_features.width));
    }
    let tags: Vec<_> = ann.records.iter().map(|r| r.thing_stuff).collect();

    let costs = matching::build_cost_matrix(
        outputs,
        text_bank,
        &gt_boxes,
        &gt_grid_masks,
        pixel_features,
        &weights.matcher_weights(),
    )?;
    let assignment = matching::match_with_strategy(&costs, &tags, strategy, provenance)?;

    let (class_loss, class_grad) = focal_class_loss(outputs, text_bank, &assignment, weights)?;
    let box_parts = box_loss(outputs, &gt_boxes, &assignment, weights)?;
    let (mask_loss, mask_grad, mut pixel_grads) =
        dice_mask_loss(outputs, pixel_features, &gt_grid_masks, &assignment, weights)?;

    let total = weights.lambda_cls * class_loss + box_parts.loss + weights.lambda_dice * mask_loss;
    let mut grads = OutputGrads::zeros_like(outputs);
    for (gi, ci) in grads.class_embeds.iter_mut().zip(&class_grad) {
        *gi = weights.lambda_cls * ci;
    }
    grads.boxes = box_parts.grad;
    for (gi, mi) in grads.mask_embeds.iter_mut().zip(&mask_grad) {
        *gi = weights.lambda_dice * mi;
    }
    for p in &mut pixel_grads {
        *p *= weights.lambda_dice;
    }

    Ok(LossBreakdown {
        class_loss,
        box_loss: box_parts.loss,
        mask_loss,
        total,
        grads,
        pixel_grads,
        assignment: Some(assignment),
    })
}

// ---------------------------------------------------------------------------
// finite-difference verification harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    /// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates straddling a kink (one-sided slopes disagree), skipped
    /// rather than failed.
    pub skipped: usize,
}

/// Central finite differences of `f` against the supplied analytic gradient.
/// Coordinates where the one-sided slopes disagree sharply (L1 kinks,
/// assignment flips) are reported as skips.
pub fn grad_check<F: Fn(&[f64]) -> f64>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheckReport {
    assert!(step > 0.0, "step must be positive");
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let base = f(&x);
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;

        let fwd = (plus - base) / step;
        let bwd = (base - minus) / step;
        let kink = (fwd - bwd).abs() / (1.0 + fwd.abs() + bwd.abs());
        if kink > 0.05 {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(i);
        }
        checked += 1;
    }
    GradCheckReport { max_rel_err, worst_coord: worst, checked, skipped }
}
