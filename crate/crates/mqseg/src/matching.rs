//! Ground-truth-to-query assignment: cost construction, an exact Hungarian
//! solver, and the four query strategies.
//!
//! The mixed strategy runs one global matching over the full learnable +
//! conditional pool with no thing/stuff constraint; the separated baseline
//! matches stuff to learnable queries and things to conditional queries
//! independently and therefore requires tags on every ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{focal_matcher_cost, giou_with_grad, sigmoid, DecoderOutputs, PixelFeatureMap};
use crate::maskops::{center_to_corners, BBox, BinaryMask};
use crate::semantics::{embed_text, TextEmbedding, DEFAULT_TEXT_DIM};
use crate::unified_data::{SegmentRecord, ThingStuff};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatchError {
    #[error("{gts} ground truths cannot be injectively assigned to {queries} queries")]
    Infeasible { gts: usize, queries: usize },
    #[error("ground truth {index} lacks a thing/stuff tag (required by the separated strategy)")]
    MissingThingStuffTag { index: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix requires at least one ground truth")]
    NoGroundTruth,
    #[error("embedding dim mismatch: predictions {out}, text bank {bank}")]
    DimMismatch { out: usize, bank: usize },
    #[error("text bank has {bank} entries for {gts} ground truths")]
    BankSize { bank: usize, gts: usize },
    #[error("provenance covers {provenance} queries, cost matrix has {queries} columns")]
    ProvenanceSize { provenance: usize, queries: usize },
    #[error("record {index} has a blank label")]
    BlankLabel { index: usize },
    #[error("tags cover {tags} ground truths, cost matrix has {gts} rows")]
    TagSize { tags: usize, gts: usize },
}

/// Origin of a query slot in the mixed pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryOrigin {
    Learnable,
    Conditional,
}

/// Per-query origin tags, fixed for a model instance. Learnable slots come
/// first, then conditional slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryProvenance {
    origins: Vec<QueryOrigin>,
    n_learnable: usize,
}

impl QueryProvenance {
    pub fn layout(n_learnable: usize, n_conditional: usize) -> Self {
        let mut origins = vec![QueryOrigin::Learnable; n_learnable];
        origins.extend(std::iter::repeat_n(QueryOrigin::Conditional, n_conditional));
        Self { origins, n_learnable }
    }

    /// Arbitrary per-slot origins (file-level predictions are not laid out
    /// learnable-first).
    pub fn from_origins(origins: Vec<QueryOrigin>) -> Self {
        let n_learnable = origins.iter().filter(|&&o| o == QueryOrigin::Learnable).count();
        Self { origins, n_learnable }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origin(&self, query: usize) -> QueryOrigin {
        self.origins[query]
    }

    pub fn n_learnable(&self) -> usize {
        self.n_learnable
    }

    pub fn n_conditional(&self) -> usize {
        self.origins.len() - self.n_learnable
    }

    fn columns_of(&self, origin: QueryOrigin) -> Vec<usize> {
        (0..self.origins.len()).filter(|&q| self.origins[q] == origin).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStrategy {
    LearnableOnly,
    ConditionalOnly,
    Separated,
    Mixed,
}

impl std::str::FromStr for QueryStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learnable" => Ok(Self::LearnableOnly),
            "conditional" => Ok(Self::ConditionalOnly),
            "separated" => Ok(Self::Separated),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!(
                "unknown strategy {other:?} (expected mixed|separated|learnable|conditional)"
            )),
        }
    }
}

impl std::fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::LearnableOnly => "learnable",
            Self::ConditionalOnly => "conditional",
            Self::Separated => "separated",
            Self::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

/// Dense GT x query cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows_data: Vec<Vec<f64>>) -> Self {
        let rows = rows_data.len();
        let cols = rows_data.first().map_or(0, Vec::len);
        let data = rows_data.into_iter().flatten().collect();
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn validate_finite(&self) -> Result<(), MatchError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.get(r, c).is_finite() {
                    return Err(MatchError::NonFiniteCost { row: r, col: c });
                }
            }
        }
        Ok(())
    }

    /// Restricts to a subset of columns (for the single-set strategies).
    fn select_columns(&self, cols: &[usize]) -> CostMatrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            for &c in cols {
                data.push(self.get(r, c));
            }
        }
        CostMatrix { rows: self.rows, cols: cols.len(), data }
    }

    /// Restricts to a subset of rows.
    fn select_rows(&self, rows: &[usize]) -> CostMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            for c in 0..self.cols {
                data.push(self.get(r, c));
            }
        }
        CostMatrix { rows: rows.len(), cols: self.cols, data }
    }
}

/// Injective map from ground truths to queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub query_for_gt: Vec<usize>,
    pub total_cost: f64,
}

/// Exact minimum-cost injective assignment via shortest augmenting paths with
/// dual potentials (Jonker-Volgenant style), O(G^2 * Q). Ties resolve toward
/// the lowest ground-truth index, then the lowest query index, so results are
/// reproducible.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment, MatchError> {
    let g = costs.rows();
    let q = costs.cols();
    if g > q {
        return Err(MatchError::Infeasible { gts: g, queries: q });
    }
    costs.validate_finite()?;
    if g == 0 {
        return Ok(Assignment { query_for_gt: Vec::new(), total_cost: 0.0 });
    }

    // 1-based arrays; p[j] is the row assigned to column j, column 0 is the
    // staging slot for the row currently being inserted.
    let mut u = vec![0.0f64; g + 1];
    let mut v = vec![0.0f64; q + 1];
    let mut p = vec![0usize; q + 1];
    let mut way = vec![0usize; q + 1];

    for i in 1..=g {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; q + 1];
        let mut used = vec![false; q + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=q {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=q {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the recorded path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut query_for_gt = vec![usize::MAX; g];
    for j in 1..=q {
        if p[j] != 0 {
            query_for_gt[p[j] - 1] = j - 1;
        }
    }
    let total_cost = query_for_gt
        .iter()
        .enumerate()
        .map(|(i, &j)| costs.get(i, j))
        .sum();
    Ok(Assignment { query_for_gt, total_cost })
}

/// Matcher weights; the class cost uses the focal positive/negative form on
/// the sigmoid of the class-text dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_cls: 4.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_dice: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

/// Builds the GT x query cost matrix mirroring the three loss terms:
/// `w_cls * focal(class . text) + w_l1 * L1(box) + w_giou * (1 - GIoU) +
/// w_dice * dice(mask)`. GT boxes are normalized center form; GT masks are
/// already downsampled onto the pixel-feature grid.
pub fn build_cost_matrix(
    preds: &DecoderOutputs,
    text_bank: &[TextEmbedding],
    gt_boxes: &[[f64; 4]],
    gt_grid_masks: &[Vec<f64>],
    pixel_features: &PixelFeatureMap,
    weights: &CostWeights,
) -> Result<CostMatrix, MatchError> {
    let g = gt_boxes.len();
    if g == 0 {
        return Err(MatchError::NoGroundTruth);
    }
    if text_bank.len() != g {
        return Err(MatchError::BankSize { bank: text_bank.len(), gts: g });
    }
    if let Some(bad) = text_bank.iter().find(|t| t.dim() != preds.dim_text) {
        return Err(MatchError::DimMismatch { out: preds.dim_text, bank: bad.dim() });
    }
    if pixel_features.dim != preds.dim_mask {
        return Err(MatchError::DimMismatch { out: preds.dim_mask, bank: pixel_features.dim });
    }
    let q = preds.num_queries();
    let cells = pixel_features.cells();

    // per-query predicted mask probabilities, shared across GTs
    let mut probs = vec![0.0f64; q * cells];
    for query in 0..q {
        let embed = preds.mask_embed(query);
        for c in 0..cells {
            let z: f64 = embed
                .iter()
                .zip(pixel_features.feature(c))
                .map(|(a, b)| a * b)
                .sum();
            probs[query * cells + c] = sigmoid(z);
        }
    }

    let mut costs = CostMatrix::zeros(g, q);
    for row in 0..g {
        let text = &text_bank[row];
        let gt_box = gt_boxes[row];
        let gt_corners = center_to_corners(&gt_box);
        let gt_mask = &gt_grid_masks[row];
        let sum_g: f64 = gt_mask.iter().sum();
        for col in 0..q {
            let mut cost = 0.0;
            if weights.w_cls != 0.0 {
                let z: f64 = preds
                    .class_embed(col)
                    .iter()
                    .zip(text.vector())
                    .map(|(a, b)| a * b)
                    .sum();
                cost += weights.w_cls
                    * focal_matcher_cost(z, weights.focal_alpha, weights.focal_gamma);
            }
            if weights.w_l1 != 0.0 {
                let pb = preds.boxes[col];
                let l1: f64 = (0..4).map(|i| (pb[i] - gt_box[i]).abs()).sum();
                cost += weights.w_l1 * l1;
            }
            if weights.w_giou != 0.0 {
                let (giou, _) = giou_with_grad(center_to_corners(&preds.boxes[col]), gt_corners);
                cost += weights.w_giou * (1.0 - giou);
            }
            if weights.w_dice != 0.0 {
                let p = &probs[col * cells..(col + 1) * cells];
                let sum_p: f64 = p.iter().sum();
                let inter: f64 = p.iter().zip(gt_mask).map(|(a, b)| a * b).sum();
                let dice = (2.0 * inter + weights.dice_eps) / (sum_p + sum_g + weights.dice_eps);
                cost += weights.w_dice * (1.0 - dice);
            }
            costs.set(row, col, cost);
        }
    }
    costs.validate_finite()?;
    Ok(costs)
}

/// File-level prediction for matching without decoder internals: a label, a
/// box, and a binary mask.
#[derive(Debug, Clone)]
pub struct RecordPrediction {
    pub label: String,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// Logit scale applied to text-embedding cosines when matching file-level
/// records (their labels come as text, not class embeddings).
const RECORD_CLASS_SCALE: f64 = 4.0;

/// Cost matrix between annotation records and file-level predictions; the
/// analogue of [`build_cost_matrix`] for the `match-stats` workflow.
pub fn build_record_cost_matrix(
    gts: &[SegmentRecord],
    preds: &[RecordPrediction],
    image_size: (usize, usize),
    weights: &CostWeights,
) -> Result<CostMatrix, MatchError> {
    if gts.is_empty() {
        return Err(MatchError::NoGroundTruth);
    }
    let embed_all = |texts: Vec<&str>| -> Result<Vec<TextEmbedding>, MatchError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                embed_text(t, DEFAULT_TEXT_DIM).map_err(|_| MatchError::BlankLabel { index })
            })
            .collect()
    };
    let gt_embeds = embed_all(gts.iter().map(|r| r.label_text.as_str()).collect())?;
    let pred_embeds = embed_all(preds.iter().map(|p| p.label.as_str()).collect())?;
    let mut costs = CostMatrix::zeros(gts.len(), preds.len());
    for (row, gt) in gts.iter().enumerate() {
        let gt_mask = gt.decode_mask().map_err(|_| MatchError::NonFiniteCost { row, col: 0 })?;
        let gt_center = gt.bbox.to_center_form(image_size.0, image_size.1);
        for (col, pred) in preds.iter().enumerate() {
            let z = RECORD_CLASS_SCALE * gt_embeds[row].dot(&pred_embeds[col]);
            let mut cost =
                weights.w_cls * focal_matcher_cost(z, weights.focal_alpha, weights.focal_gamma);
            let pred_center = pred.bbox.to_center_form(image_size.0, image_size.1);
            let l1: f64 = (0..4).map(|i| (pred_center[i] - gt_center[i]).abs()).sum();
            cost += weights.w_l1 * l1;
            let (giou, _) =
                giou_with_grad(center_to_corners(&pred_center), center_to_corners(&gt_center));
            cost += weights.w_giou * (1.0 - giou);
            let inter = gt_mask
                .bits()
                .iter()
                .zip(pred.mask.bits())
                .filter(|(&a, &b)| a && b)
                .count() as f64;
            let dice = (2.0 * inter + weights.dice_eps)
                / (gt_mask.area() as f64 + pred.mask.area() as f64 + weights.dice_eps);
            cost += weights.w_dice * (1.0 - dice);
            costs.set(row, col, cost);
        }
    }
    costs.validate_finite()?;
    Ok(costs)
}

/// Runs the chosen strategy on a prebuilt cost matrix.
///
/// Mixed solves one global assignment and never reads the tags. The
/// single-set strategies restrict the columns to one provenance. Separated
/// solves stuff x learnable and thing x conditional independently and
/// requires every ground truth to be tagged.
pub fn match_with_strategy(
    costs: &CostMatrix,
    gt_tags: &[ThingStuff],
    strategy: QueryStrategy,
    provenance: &QueryProvenance,
) -> Result<Assignment, MatchError> {
    if provenance.len() != costs.cols() {
        return Err(MatchError::ProvenanceSize {
            provenance: provenance.len(),
            queries: costs.cols(),
        });
    }
    match strategy {
        QueryStrategy::Mixed => hungarian(costs),
        QueryStrategy::LearnableOnly => {
            match_in_columns(costs, &provenance.columns_of(QueryOrigin::Learnable))
        }
        QueryStrategy::ConditionalOnly => {
            match_in_columns(costs, &provenance.columns_of(QueryOrigin::Conditional))
        }
        QueryStrategy::Separated => {
            if gt_tags.len() != costs.rows() {
                return Err(MatchError::TagSize { tags: gt_tags.len(), gts: costs.rows() });
            }
            let mut stuff_rows = Vec::new();
            let mut thing_rows = Vec::new();
            for (i, tag) in gt_tags.iter().enumerate() {
                match tag {
                    ThingStuff::Stuff => stuff_rows.push(i),
                    ThingStuff::Thing => thing_rows.push(i),
                    ThingStuff::Unknown => {
                        return Err(MatchError::MissingThingStuffTag { index: i });
                    }
                }
            }
            let learnable_cols = provenance.columns_of(QueryOrigin::Learnable);
            let conditional_cols = provenance.columns_of(QueryOrigin::Conditional);
            let stuff_part =
                match_in_columns(&costs.select_rows(&stuff_rows), &learnable_cols)?;
            let thing_part =
                match_in_columns(&costs.select_rows(&thing_rows), &conditional_cols)?;
            let mut query_for_gt = vec![usize::MAX; costs.rows()];
            for (k, &row) in stuff_rows.iter().enumerate() {
                query_for_gt[row] = stuff_part.query_for_gt[k];
            }
            for (k, &row) in thing_rows.iter().enumerate() {
                query_for_gt[row] = thing_part.query_for_gt[k];
            }
            Ok(Assignment {
                query_for_gt,
                total_cost: stuff_part.total_cost + thing_part.total_cost,
            })
        }
    }
}

fn match_in_columns(costs: &CostMatrix, cols: &[usize]) -> Result<Assignment, MatchError> {
    if costs.rows() > cols.len() {
        return Err(MatchError::Infeasible { gts: costs.rows(), queries: cols.len() });
    }
    let sub = costs.select_columns(cols);
    let mut assignment = hungarian(&sub)?;
    for q in &mut assignment.query_for_gt {
        *q = cols[*q];
    }
    Ok(assignment)
}

/// Ratios of tagged ground truths matched to the "counter-intuitive" query
/// type: things to conditional queries and stuff to learnable queries.
/// Unknown-tagged GTs are excluded; a ratio is absent when its denominator
/// is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub things_matched: usize,
    pub things_to_conditional: usize,
    pub stuff_matched: usize,
    pub stuff_to_learnable: usize,
    pub thing_to_conditional_ratio: Option<f64>,
    pub stuff_to_learnable_ratio: Option<f64>,
}

pub fn selection_stats(
    assignments: &[Assignment],
    gt_tags: &[Vec<ThingStuff>],
    provenance: &QueryProvenance,
) -> SelectionStats {
    let mut things_matched = 0usize;
    let mut things_to_conditional = 0usize;
    let mut stuff_matched = 0usize;
    let mut stuff_to_learnable = 0usize;
    for (assignment, tags) in assignments.iter().zip(gt_tags) {
        for (g, &q) in assignment.query_for_gt.iter().enumerate() {
            match tags[g] {
                ThingStuff::Thing => {
                    things_matched += 1;
                    if provenance.origin(q) == QueryOrigin::Conditional {
                        things_to_conditional += 1;
                    }
                }
                ThingStuff::Stuff => {
                    stuff_matched += 1;
                    if provenance.origin(q) == QueryOrigin::Learnable {
                        stuff_to_learnable += 1;
                    }
                }
                ThingStuff::Unknown => {}
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    SelectionStats {
        things_matched,
        things_to_conditional,
        stuff_matched,
        stuff_to_learnable,
        thing_to_conditional_ratio: ratio(things_to_conditional, things_matched),
        stuff_to_learnable_ratio: ratio(stuff_to_learnable, stuff_matched),
    }
}
