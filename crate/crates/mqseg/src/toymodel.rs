//! Minimal trainable encoder-decoder over a coarse feature grid.
//!
//! The encoder synthesizes deterministic pseudo-pixel features keyed by
//! image id (positional channels plus id-seeded noise), refines them with a
//! trained projection, and scores per-location proposals. Conditional
//! queries take the top-k proposal locations; learnable queries are
//! persistent parameters. One cross-attention decoder layer produces class,
//! box, and mask embeddings per query; boxes from conditional queries are
//! predicted as deltas on their proposal anchors. Everything is
//! differentiable by hand-written backward passes, training is a seeded,
//! deterministic AdamW loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamix::{BatchStream, MixError, MixSpec};
use crate::losses::{self, sigmoid, DecoderOutputs, LossError, LossWeights, PixelFeatureMap};
use crate::maskops::SoftMask;
use crate::matching::{QueryProvenance, QueryStrategy};
use crate::rng::{hash_str, SplitMix64};
use crate::semantics::{embed_text, TextEmbedding, TextError};
use crate::unified_data::Dataset;

#[derive(Debug, Error)]
pub enum ToyModelError {
    #[error("k = {k} conditional queries exceed the {cells} grid locations")]
    KTooLarge { k: usize, cells: usize },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_d_model() -> usize {
    32
}
fn default_pixel_channels() -> usize {
    16
}
fn default_grid() -> usize {
    16
}
fn default_n_learnable() -> usize {
    8
}
fn default_n_conditional() -> usize {
    24
}
fn default_d_text() -> usize {
    64
}
fn default_d_mask() -> usize {
    16
}
fn default_init_scale() -> f64 {
    0.02
}

/// Architecture sizes. The full-scale query split (100 learnable + 300
/// conditional) is available by config; the defaults are desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_pixel_channels")]
    pub pixel_channels: usize,
    #[serde(default = "default_grid")]
    pub grid_h: usize,
    #[serde(default = "default_grid")]
    pub grid_w: usize,
    #[serde(default = "default_n_learnable")]
    pub n_learnable: usize,
    #[serde(default = "default_n_conditional")]
    pub n_conditional: usize,
    #[serde(default = "default_d_text")]
    pub d_text: usize,
    #[serde(default = "default_d_mask")]
    pub d_mask: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: default_d_model(),
            pixel_channels: default_pixel_channels(),
            grid_h: default_grid(),
            grid_w: default_grid(),
            n_learnable: default_n_learnable(),
            n_conditional: default_n_conditional(),
            d_text: default_d_text(),
            d_mask: default_d_mask(),
            init_scale: default_init_scale(),
        }
    }
}

impl ModelConfig {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_queries(&self) -> usize {
        self.n_learnable + self.n_conditional
    }

    pub fn provenance(&self) -> QueryProvenance {
        QueryProvenance::layout(self.n_learnable, self.n_conditional)
    }

    pub fn validate(&self) -> Result<(), ToyModelError> {
        if self.d_model == 0 || self.d_text < 8 || self.d_mask == 0 {
            return Err(ToyModelError::Config("embedding dims too small".into()));
        }
        if self.pixel_channels < 2 {
            return Err(ToyModelError::Config("pixel_channels must be >= 2".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(ToyModelError::Config("grid must be non-empty".into()));
        }
        if self.n_conditional > self.cells() {
            return Err(ToyModelError::Config(format!(
                "{} conditional queries exceed {} grid locations",
                self.n_conditional,
                self.cells()
            )));
        }
        if self.num_queries() == 0 {
            return Err(ToyModelError::Config("no queries configured".into()));
        }
        Ok(())
    }
}

fn default_learning_rate() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_warmup() -> usize {
    10
}
fn default_decay_points() -> Vec<f64> {
    vec![0.9, 0.95]
}
fn default_decay_factor() -> f64 {
    10.0
}
fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iterations: usize,
    /// Fractions of the total step count at which the learning rate divides
    /// by `lr_decay_factor`.
    #[serde(default = "default_decay_points")]
    pub lr_decay_points: Vec<f64>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            warmup_iterations: default_warmup(),
            lr_decay_points: default_decay_points(),
            lr_decay_factor: default_decay_factor(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyModelError> {
        if self.learning_rate < 0.0 {
            return Err(ToyModelError::Config("learning_rate must be >= 0".into()));
        }
        let mut last = 0.0;
        for &p in &self.lr_decay_points {
            if p <= last || p >= 1.0 {
                return Err(ToyModelError::Config(
                    "lr_decay_points must be strictly increasing in (0, 1)".into(),
                ));
            }
            last = p;
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ToyModelError::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: &'static str,
    offset: usize,
    rows: usize,
    cols: usize,
}

/// All trainable tensors in one flat buffer, enumerable in a fixed order for
/// optimizer state and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

fn layout(cfg: &ModelConfig) -> Vec<(&'static str, usize, usize)> {
    let d = cfg.d_model;
    vec![
        ("learnable_queries", cfg.n_learnable, d),
        ("enc_synth_w", d, cfg.pixel_channels),
        ("enc_synth_b", 1, d),
        ("objectness_w", 1, d),
        ("objectness_b", 1, 1),
        ("proposal_w", 4, d),
        ("proposal_b", 1, 4),
        ("attn_query_w", d, d),
        ("attn_query_b", 1, d),
        ("attn_key_w", d, d),
        ("attn_key_b", 1, d),
        ("attn_value_w", d, d),
        ("attn_value_b", 1, d),
        ("class_head_w", cfg.d_text, d),
        ("class_head_b", 1, cfg.d_text),
        ("box_head_w", 4, d),
        ("box_head_b", 1, 4),
        ("mask_head_w", cfg.d_mask, d),
        ("mask_head_b", 1, cfg.d_mask),
        ("pixel_head_w", cfg.d_mask, d),
        ("pixel_head_b", 1, cfg.d_mask),
    ]
}

impl ModelParams {
    /// Seeded Gaussian init at `init_scale`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ToyModelError> {
        config.validate()?;
        let mut specs = Vec::new();
        let mut offset = 0usize;
        for (name, rows, cols) in layout(&config) {
            specs.push(ParamSpec { name, offset, rows, cols });
            offset += rows * cols;
        }
        let mut rng = SplitMix64::new(seed ^ 0x9e37_79b9);
        let data = (0..offset).map(|_| rng.next_normal() * config.init_scale).collect();
        Ok(Self { config, specs, data })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.specs.iter().map(|s| s.name).collect()
    }

    fn spec(&self, name: &str) -> &ParamSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn view(&self, name: &str) -> &[f64] {
        let s = self.spec(name);
        &self.data[s.offset..s.offset + s.rows * s.cols]
    }

    /// Offset and length of the named tensor in the flat buffer.
    pub fn span(&self, name: &str) -> (usize, usize) {
        let s = self.spec(name);
        (s.offset, s.rows * s.cols)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ToyModelError> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            rows: usize,
            cols: usize,
            data: &'a [f64],
        }
        #[derive(Serialize)]
        struct File<'a> {
            version: u32,
            config: &'a ModelConfig,
            params: Vec<Entry<'a>>,
        }
        let params = self
            .specs
            .iter()
            .map(|s| Entry {
                name: s.name,
                rows: s.rows,
                cols: s.cols,
                data: &self.data[s.offset..s.offset + s.rows * s.cols],
            })
            .collect();
        let file = File { version: 1, config: &self.config, params };
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ToyModelError> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct File {
            version: u32,
            config: ModelConfig,
            params: Vec<Entry>,
        }
        let input = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: File = serde_json::from_reader(input)?;
        if file.version != 1 {
            return Err(ToyModelError::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut params = Self::init(file.config, 0)?;
        if file.params.len() != params.specs.len() {
            return Err(ToyModelError::Checkpoint("parameter count mismatch".into()));
        }
        for (spec, entry) in params.specs.iter().zip(&file.params) {
            if spec.name != entry.name || spec.rows != entry.rows || spec.cols != entry.cols {
                return Err(ToyModelError::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{} for {}",
                    entry.name, entry.rows, entry.cols, spec.rows, spec.cols, spec.name
                )));
            }
            if entry.data.len() != spec.rows * spec.cols {
                return Err(ToyModelError::Checkpoint(format!(
                    "tensor {} data length {}",
                    entry.name,
                    entry.data.len()
                )));
            }
            params.data[spec.offset..spec.offset + entry.data.len()].copy_from_slice(&entry.data);
        }
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// small dense kernels (row-major)
// ---------------------------------------------------------------------------

/// y = a (n x k) . w^T (m x k) -> n x m
fn matmul_nt(a: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * w[j * k + l];
            }
            y[i * m + j] = acc;
        }
    }
    y
}

/// y = a (n x k) . b (k x m) -> n x m
fn matmul_nn(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                y[i * m + j] += av * b[l * m + j];
            }
        }
    }
    y
}

/// y = a^T (a: n x m) . b (n x k) -> m x k; the dW = dY^T . X pattern.
fn matmul_tn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * k];
    for i in 0..n {
        for j in 0..m {
            let av = a[i * m + j];
            if av == 0.0 {
                continue;
            }
            for l in 0..k {
                y[j * k + l] += av * b[i * k + l];
            }
        }
    }
    y
}

fn add_bias(y: &mut [f64], n: usize, m: usize, b: &[f64]) {
    for i in 0..n {
        for j in 0..m {
            y[i * m + j] += b[j];
        }
    }
}

fn column_sums(y: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut s = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            s[j] += y[i * m + j];
        }
    }
    s
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

/// Single-scale feature grid with per-location proposal scores and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_model: usize,
    /// cells x d_model, row-major.
    pub grid: Vec<f64>,
    /// Per-location proposal confidence.
    pub objectness: Vec<f64>,
    /// Normalized (cx, cy, w, h) per location.
    pub proposal_boxes: Vec<[f64; 4]>,
    /// Pre-sigmoid proposal boxes; conditional queries refine these.
    pub proposal_logits: Vec<[f64; 4]>,
}

/// Deterministic pseudo-pixels for an image id: a few positional channels,
/// the rest id-seeded noise.
fn synth_raw(image_id: &str, cfg: &ModelConfig) -> Vec<f64> {
    let cells = cfg.cells();
    let d_in = cfg.pixel_channels;
    let pos_channels = 8.min(d_in.div_ceil(2));
    let mut rng = SplitMix64::new(hash_str(image_id) ^ 0x5eed_0f00d);
    let mut raw = vec![0.0; cells * d_in];
    for cell in 0..cells {
        let y = cell / cfg.grid_w;
        let x = cell % cfg.grid_w;
        let xn = (x as f64 + 0.5) / cfg.grid_w as f64;
        let yn = (y as f64 + 0.5) / cfg.grid_h as f64;
        let pos = [
            2.0 * xn - 1.0,
            2.0 * yn - 1.0,
            (std::f64::consts::TAU * xn).sin(),
            (std::f64::consts::TAU * xn).cos(),
            (std::f64::consts::TAU * yn).sin(),
            (std::f64::consts::TAU * yn).cos(),
            (2.0 * std::f64::consts::TAU * xn).sin(),
            (2.0 * std::f64::consts::TAU * yn).sin(),
        ];
        for c in 0..d_in {
            raw[cell * d_in + c] = if c < pos_channels {
                pos[c]
            } else {
                rng.next_normal() * 0.5
            };
        }
    }
    raw
}

/// Deterministic feature map for (image_id, params).
pub fn encode(image_id: &str, params: &ModelParams) -> ToyFeatureMap {
    let cfg = &params.config;
    let cells = cfg.cells();
    let d = cfg.d_model;
    let raw = synth_raw(image_id, cfg);

    let mut pre = matmul_nt(&raw, cells, cfg.pixel_channels, params.view("enc_synth_w"), d);
    add_bias(&mut pre, cells, d, params.view("enc_synth_b"));
    let grid: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();

    let w_obj = params.view("objectness_w");
    let b_obj = params.view("objectness_b")[0];
    let objectness: Vec<f64> = (0..cells)
        .map(|c| {
            let mut acc = b_obj;
            for l in 0..d {
                acc += grid[c * d + l] * w_obj[l];
            }
            acc
        })
        .collect();

    let mut prop = matmul_nt(&grid, cells, d, params.view("proposal_w"), 4);
    add_bias(&mut prop, cells, 4, params.view("proposal_b"));
    let mut proposal_logits = Vec::with_capacity(cells);
    let mut proposal_boxes = Vec::with_capacity(cells);
    for c in 0..cells {
        let logits = [prop[c * 4], prop[c * 4 + 1], prop[c * 4 + 2], prop[c * 4 + 3]];
        proposal_logits.push(logits);
        proposal_boxes.push([
            sigmoid(logits[0]),
            sigmoid(logits[1]),
            sigmoid(logits[2]),
            sigmoid(logits[3]),
        ]);
    }

    ToyFeatureMap {
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        d_model: d,
        grid,
        objectness,
        proposal_boxes,
        proposal_logits,
    }
}

/// Content selected for the conditional queries of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSelection {
    /// k x d_model grid features, highest objectness first.
    pub queries: Vec<f64>,
    /// Normalized proposal boxes of the selected locations.
    pub boxes: Vec<[f64; 4]>,
    /// Flat grid indices of the selected locations.
    pub indices: Vec<usize>,
}

/// The `k` grid locations with highest objectness (ties to the lowest flat
/// index).
pub fn select_conditional(
    fm: &ToyFeatureMap,
    k: usize,
) -> Result<ConditionalSelection, ToyModelError> {
    let cells = fm.grid_h * fm.grid_w;
    if k > cells {
        return Err(ToyModelError::KTooLarge { k, cells });
    }
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| {
        fm.objectness[b]
            .partial_cmp(&fm.objectness[a])
            .expect("objectness is finite")
            .then(a.cmp(&b))
    });
    let indices: Vec<usize> = order.into_iter().take(k).collect();
    let d = fm.d_model;
    let mut queries = Vec::with_capacity(k * d);
    let mut boxes = Vec::with_capacity(k);
    for &c in &indices {
        queries.extend_from_slice(&fm.grid[c * d..(c + 1) * d]);
        boxes.push(fm.proposal_boxes[c]);
    }
    Ok(ConditionalSelection { queries, boxes, indices })
}

/// Mixed pool descriptor: learnable slots come from the trained bank,
/// conditional capacity is filled per image.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedQueryBank {
    pub n_learnable: usize,
    pub n_conditional: usize,
}

impl MixedQueryBank {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self { n_learnable: cfg.n_learnable, n_conditional: cfg.n_conditional }
    }

    pub fn num_queries(&self) -> usize {
        self.n_learnable + self.n_conditional
    }

    pub fn provenance(&self) -> QueryProvenance {
        QueryProvenance::layout(self.n_learnable, self.n_conditional)
    }
}

/// Pixel-encoder features of the grid.
pub fn pixel_encode(fm: &ToyFeatureMap, params: &ModelParams) -> PixelFeatureMap {
    let cfg = &params.config;
    let cells = fm.grid_h * fm.grid_w;
    let mut features = matmul_nt(&fm.grid, cells, cfg.d_model, params.view("pixel_head_w"), cfg.d_mask);
    add_bias(&mut features, cells, cfg.d_mask, params.view("pixel_head_b"));
    PixelFeatureMap { dim: cfg.d_mask, height: fm.grid_h, width: fm.grid_w, features }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace {
    pub raw: Vec<f64>,
    pub fm: ToyFeatureMap,
    pub selected: Vec<usize>,
    contents: Vec<f64>,
    qm: Vec<f64>,
    keys: Vec<f64>,
    vals: Vec<f64>,
    attn: Vec<f64>,
    hq: Vec<f64>,
    pub outputs: DecoderOutputs,
    pub pixel: PixelFeatureMap,
}

/// One decoder layer over a feature map: cross-attention then the three
/// heads. For training, use [`forward`], whose trace feeds [`backward`].
pub fn decode(
    fm: &ToyFeatureMap,
    bank: &MixedQueryBank,
    params: &ModelParams,
) -> Result<DecoderOutputs, ToyModelError> {
    Ok(decode_traced(fm.clone(), Vec::new(), bank, params)?.outputs)
}

fn decode_traced(
    fm: ToyFeatureMap,
    raw: Vec<f64>,
    bank: &MixedQueryBank,
    params: &ModelParams,
) -> Result<ForwardTrace, ToyModelError> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let cells = fm.grid_h * fm.grid_w;
    let n_l = bank.n_learnable;
    let n_c = bank.n_conditional;
    let q = n_l + n_c;

    let selection = select_conditional(&fm, n_c)?;
    let selected = selection.indices;

    let mut contents = Vec::with_capacity(q * d);
    contents.extend_from_slice(params.view("learnable_queries"));
    contents.extend_from_slice(&selection.queries);

    let mut qm = matmul_nt(&contents, q, d, params.view("attn_query_w"), d);
    add_bias(&mut qm, q, d, params.view("attn_query_b"));
    let mut keys = matmul_nt(&fm.grid, cells, d, params.view("attn_key_w"), d);
    add_bias(&mut keys, cells, d, params.view("attn_key_b"));
    let mut vals = matmul_nt(&fm.grid, cells, d, params.view("attn_value_w"), d);
    add_bias(&mut vals, cells, d, params.view("attn_value_b"));

    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = matmul_nt(&qm, q, d, &keys, cells);
    for row in 0..q {
        let row_slice = &mut attn[row * cells..(row + 1) * cells];
        let mut max = f64::NEG_INFINITY;
        for v in row_slice.iter_mut() {
            *v *= scale;
            if *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for v in row_slice.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row_slice.iter_mut() {
            *v /= sum;
        }
    }

    let ctx = matmul_nn(&attn, q, cells, &vals, d);
    let hq: Vec<f64> = contents.iter().zip(&ctx).map(|(c, x)| c + x).collect();

    let mut class_embeds = matmul_nt(&hq, q, d, params.view("class_head_w"), cfg.d_text);
    add_bias(&mut class_embeds, q, cfg.d_text, params.view("class_head_b"));

    let mut box_raw = matmul_nt(&hq, q, d, params.view("box_head_w"), 4);
    add_bias(&mut box_raw, q, 4, params.view("box_head_b"));
    let mut boxes = Vec::with_capacity(q);
    for i in 0..q {
        let mut pre = [box_raw[i * 4], box_raw[i * 4 + 1], box_raw[i * 4 + 2], box_raw[i * 4 + 3]];
        if i >= n_l {
            let anchor = fm.proposal_logits[selected[i - n_l]];
            for (p, a) in pre.iter_mut().zip(anchor) {
                *p += a;
            }
        }
        boxes.push([sigmoid(pre[0]), sigmoid(pre[1]), sigmoid(pre[2]), sigmoid(pre[3])]);
    }

    let mut mask_embeds = matmul_nt(&hq, q, d, params.view("mask_head_w"), cfg.d_mask);
    add_bias(&mut mask_embeds, q, cfg.d_mask, params.view("mask_head_b"));

    let pixel = pixel_encode(&fm, params);

    Ok(ForwardTrace {
        raw,
        fm,
        selected,
        contents,
        qm,
        keys,
        vals,
        attn,
        hq,
        outputs: DecoderOutputs {
            dim_text: cfg.d_text,
            dim_mask: cfg.d_mask,
            class_embeds,
            boxes,
            mask_embeds,
        },
        pixel,
    })
}

/// Full forward pass for one image.
pub fn forward(image_id: &str, params: &ModelParams) -> Result<ForwardTrace, ToyModelError> {
    let raw = synth_raw(image_id, &params.config);
    let fm = encode(image_id, params);
    decode_traced(fm, raw, &MixedQueryBank::from_config(&params.config), params)
}

/// Accumulates d(total)/d(params) into `grad` given the loss gradients with
/// respect to the decoder outputs and pixel features. The top-k selection is
/// treated as locally constant; objectness receives no gradient.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    out_grads: &losses::OutputGrads,
    pixel_grads: &[f64],
    grad: &mut [f64],
) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let cells = trace.fm.grid_h * trace.fm.grid_w;
    let n_l = cfg.n_learnable;
    let q = cfg.num_queries();

    let mut acc = |name: &str, values: &[f64]| {
        let (offset, len) = params.span(name);
        debug_assert_eq!(len, values.len());
        for (g, v) in grad[offset..offset + len].iter_mut().zip(values) {
            *g += v;
        }
    };

    let mut d_hq = vec![0.0; q * d];
    let mut d_grid = vec![0.0; cells * d];
    let mut d_prop_logits = vec![0.0; cells * 4];

    // class head
    let d_class = &out_grads.class_embeds;
    acc("class_head_w", &matmul_tn(d_class, q, cfg.d_text, &trace.hq, d));
    acc("class_head_b", &column_sums(d_class, q, cfg.d_text));
    for (h, v) in d_hq
        .iter_mut()
        .zip(matmul_nn(d_class, q, cfg.d_text, params.view("class_head_w"), d))
    {
        *h += v;
    }

    // mask head
    let d_mask = &out_grads.mask_embeds;
    acc("mask_head_w", &matmul_tn(d_mask, q, cfg.d_mask, &trace.hq, d));
    acc("mask_head_b", &column_sums(d_mask, q, cfg.d_mask));
    for (h, v) in d_hq
        .iter_mut()
        .zip(matmul_nn(d_mask, q, cfg.d_mask, params.view("mask_head_w"), d))
    {
        *h += v;
    }

    // box head: chain through the sigmoid, splitting conditional deltas off
    // to their proposal anchors
    let mut d_box_logit = vec![0.0; q * 4];
    for i in 0..q {
        for j in 0..4 {
            let b = trace.outputs.boxes[i][j];
            let g = out_grads.boxes[i][j] * b * (1.0 - b);
            d_box_logit[i * 4 + j] = g;
            if i >= n_l {
                d_prop_logits[trace.selected[i - n_l] * 4 + j] += g;
            }
        }
    }
    acc("box_head_w", &matmul_tn(&d_box_logit, q, 4, &trace.hq, d));
    acc("box_head_b", &column_sums(&d_box_logit, q, 4));
    for (h, v) in d_hq
        .iter_mut()
        .zip(matmul_nn(&d_box_logit, q, 4, params.view("box_head_w"), d))
    {
        *h += v;
    }

    // pixel head
    acc("pixel_head_w", &matmul_tn(pixel_grads, cells, cfg.d_mask, &trace.fm.grid, d));
    acc("pixel_head_b", &column_sums(pixel_grads, cells, cfg.d_mask));
    for (g, v) in d_grid
        .iter_mut()
        .zip(matmul_nn(pixel_grads, cells, cfg.d_mask, params.view("pixel_head_w"), d))
    {
        *g += v;
    }

    // residual: hq = contents + ctx
    let mut d_contents = d_hq.clone();
    let d_ctx = &d_hq;

    // ctx = attn . vals
    let d_attn = matmul_nt(d_ctx, q, d, &trace.vals, cells);
    let d_vals = matmul_tn(&trace.attn, q, cells, d_ctx, d);

    // softmax backward
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_scores = vec![0.0; q * cells];
    for row in 0..q {
        let a = &trace.attn[row * cells..(row + 1) * cells];
        let da = &d_attn[row * cells..(row + 1) * cells];
        let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for c in 0..cells {
            d_scores[row * cells + c] = a[c] * (da[c] - dot) * scale;
        }
    }

    // scores = qm . keys^T (pre-scale handled above)
    let d_qm = matmul_nn(&d_scores, q, cells, &trace.keys, d);
    let d_keys = matmul_tn(&d_scores, q, cells, &trace.qm, d);

    acc("attn_key_w", &matmul_tn(&d_keys, cells, d, &trace.fm.grid, d));
    acc("attn_key_b", &column_sums(&d_keys, cells, d));
    for (g, v) in d_grid.iter_mut().zip(matmul_nn(&d_keys, cells, d, params.view("attn_key_w"), d)) {
        *g += v;
    }
    acc("attn_value_w", &matmul_tn(&d_vals, cells, d, &trace.fm.grid, d));
    acc("attn_value_b", &column_sums(&d_vals, cells, d));
    for (g, v) in d_grid
        .iter_mut()
        .zip(matmul_nn(&d_vals, cells, d, params.view("attn_value_w"), d))
    {
        *g += v;
    }
    acc("attn_query_w", &matmul_tn(&d_qm, q, d, &trace.contents, d));
    acc("attn_query_b", &column_sums(&d_qm, q, d));
    for (c, v) in d_contents.iter_mut().zip(matmul_nn(&d_qm, q, d, params.view("attn_query_w"), d)) {
        *c += v;
    }

    // contents: learnable rows are parameters, conditional rows are selected
    // grid features
    acc("learnable_queries", &d_contents[..n_l * d]);
    for (j, &cell) in trace.selected.iter().enumerate() {
        let row = &d_contents[(n_l + j) * d..(n_l + j + 1) * d];
        for (g, v) in d_grid[cell * d..(cell + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
    }

    // proposal head (gradient arrives only via conditional box anchors)
    acc("proposal_w", &matmul_tn(&d_prop_logits, cells, 4, &trace.fm.grid, d));
    acc("proposal_b", &column_sums(&d_prop_logits, cells, 4));
    for (g, v) in d_grid
        .iter_mut()
        .zip(matmul_nn(&d_prop_logits, cells, 4, params.view("proposal_w"), d))
    {
        *g += v;
    }

    // tanh encoder
    let mut d_pre = vec![0.0; cells * d];
    for i in 0..cells * d {
        d_pre[i] = d_grid[i] * (1.0 - trace.fm.grid[i] * trace.fm.grid[i]);
    }
    acc("enc_synth_w", &matmul_tn(&d_pre, cells, d, &trace.raw, cfg.pixel_channels));
    acc("enc_synth_b", &column_sums(&d_pre, cells, d));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = if cfg.warmup_iterations > 0 && step < cfg.warmup_iterations {
        (step + 1) as f64 / cfg.warmup_iterations as f64
    } else {
        1.0
    };
    let mut decay = 1.0;
    for &point in &cfg.lr_decay_points {
        if step >= (point * total_steps as f64).floor() as usize {
            decay /= cfg.lr_decay_factor;
        }
    }
    cfg.learning_rate * warmup * decay
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub loss_trace: Vec<f64>,
}

/// Seeded, deterministic training loop: sample a batch, forward, loss,
/// backward, AdamW step with linear warmup and stepped decay.
pub fn train(
    datasets: &[Dataset],
    mix: &MixSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    strategy: QueryStrategy,
    weights: &LossWeights,
) -> Result<TrainOutcome, ToyModelError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut params = ModelParams::init(model_cfg.clone(), train_cfg.seed)?;
    let mut stream = BatchStream::new(datasets, mix)?;
    let steps_per_epoch = stream.plan_len().div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * steps_per_epoch;
    let provenance = model_cfg.provenance();

    let n = params.num_params();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut loss_trace = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let batch = stream.next_batch(train_cfg.batch_size);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss_sum = 0.0;
        for ann in &batch {
            let trace = forward(&ann.image_id, &params)?;
            let mut bank = Vec::with_capacity(ann.records.len());
            for rec in &ann.records {
                bank.push(embed_text(&rec.label_text, model_cfg.d_text)?);
            }
            let breakdown = losses::total_loss(
                &trace.outputs,
                ann,
                &bank,
                &trace.pixel,
                weights,
                strategy,
                &provenance,
            )?;
            loss_sum += breakdown.total;
            backward(&trace, &params, &breakdown.grads, &breakdown.pixel_grads, &mut grad);
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(ToyModelError::NonFiniteLoss { step });
        }
        loss_trace.push(loss);

        let lr = lr_at(step, total_steps, train_cfg);
        let t = (step + 1) as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        let data = params.flat_mut();
        for i in 0..n {
            let g = grad[i] * inv;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + train_cfg.weight_decay * data[i]);
        }
    }

    Ok(TrainOutcome { params, loss_trace })
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// One thresholded query output against an open-vocabulary label bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_index: usize,
    /// Index into the label bank of the best label.
    pub label_index: usize,
    /// Best per-label score.
    pub score: f64,
    /// Score against every bank label.
    pub scores: Vec<f64>,
    /// Normalized (cx, cy, w, h).
    pub box_norm: [f64; 4],
    /// Soft mask at grid resolution.
    pub mask: SoftMask,
}

/// Runs the model on an image id against an arbitrary label bank and returns
/// every query scoring strictly above the threshold, from the whole mixed
/// pool with no provenance filtering.
pub fn predict(
    image_id: &str,
    params: &ModelParams,
    labels: &[String],
    score_threshold: f64,
) -> Result<Vec<Prediction>, ToyModelError> {
    let cfg = &params.config;
    let bank: Vec<TextEmbedding> = labels
        .iter()
        .map(|l| embed_text(l, cfg.d_text))
        .collect::<Result<_, _>>()?;
    let trace = forward(image_id, params)?;
    let cells = cfg.cells();
    let mut out = Vec::new();
    for q in 0..cfg.num_queries() {
        let embed = trace.outputs.class_embed(q);
        let scores: Vec<f64> = bank
            .iter()
            .map(|t| {
                let z: f64 = embed.iter().zip(t.vector()).map(|(a, b)| a * b).sum();
                sigmoid(z)
            })
            .collect();
        let (label_index, &score) = scores
            .iter()
            .enumerate()
            .max_by(|(ai, av), (bi, bv)| av.partial_cmp(bv).unwrap().then(bi.cmp(ai)))
            .expect("non-empty label bank");
        if score > score_threshold {
            let mask_embed = trace.outputs.mask_embed(q);
            let values: Vec<f64> = (0..cells)
                .map(|c| {
                    let z: f64 = mask_embed
                        .iter()
                        .zip(trace.pixel.feature(c))
                        .map(|(a, b)| a * b)
                        .sum();
                    sigmoid(z)
                })
                .collect();
            out.push(Prediction {
                query_index: q,
                label_index,
                score,
                scores,
                box_norm: trace.outputs.boxes[q],
                mask: SoftMask { h: cfg.grid_h, w: cfg.grid_w, values },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::grad_check;
    use crate::maskops::{rle_encode, BBox, BinaryMask};
    use crate::unified_data::{from_panoptic, ThingStuff};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            pixel_channels: 6,
            grid_h: 4,
            grid_w: 4,
            n_learnable: 3,
            n_conditional: 5,
            d_text: 16,
            d_mask: 6,
            init_scale: 0.05,
        }
    }

    #[test]
    fn encode_is_deterministic_and_id_sensitive() {
        let params = ModelParams::init(small_config(), 1).unwrap();
        let a = encode("img-a", &params);
        let b = encode("img-a", &params);
        assert_eq!(a, b);
        let c = encode("img-b", &params);
        assert_ne!(a.grid, c.grid);
        assert_eq!(a.objectness.len(), 16);
    }

    #[test]
    fn default_grid_has_256_locations() {
        let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let fm = encode("x", &params);
        assert_eq!(fm.objectness.len(), 256);
    }

    #[test]
    fn select_top_k_and_ties() {
        let params = ModelParams::init(small_config(), 2).unwrap();
        let mut fm = encode("img", &params);
        for v in &mut fm.objectness {
            *v = -1e18;
        }
        fm.objectness[0] = 0.9;
        fm.objectness[1] = 0.1;
        fm.objectness[2] = 0.5;
        let sel = select_conditional(&fm, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);

        // equal scores at 3 and 7: lowest flat index wins
        fm.objectness[3] = 2.0;
        fm.objectness[7] = 2.0;
        let sel = select_conditional(&fm, 1).unwrap();
        assert_eq!(sel.indices, vec![3]);

        // k = all cells selects everything
        let sel = select_conditional(&fm, 16).unwrap();
        assert_eq!(sel.indices.len(), 16);
        assert!(matches!(
            select_conditional(&fm, 17),
            Err(ToyModelError::KTooLarge { k: 17, cells: 16 })
        ));
    }

    #[test]
    fn decode_shape_laws_and_box_bounds() {
        let cfg = small_config();
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let trace = forward("img", &params).unwrap();
        let q = cfg.num_queries();
        assert_eq!(trace.outputs.class_embeds.len(), q * cfg.d_text);
        assert_eq!(trace.outputs.boxes.len(), q);
        assert_eq!(trace.outputs.mask_embeds.len(), q * cfg.d_mask);
        for b in &trace.outputs.boxes {
            for &v in b {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn zero_params_collapse_queries() {
        let cfg = small_config();
        let mut params = ModelParams::init(cfg.clone(), 4).unwrap();
        params.flat_mut().iter_mut().for_each(|v| *v = 0.0);
        let trace = forward("img", &params).unwrap();
        let q = cfg.num_queries();
        for i in 1..q {
            assert_eq!(trace.outputs.class_embed(i), trace.outputs.class_embed(0));
            assert_eq!(trace.outputs.boxes[i], trace.outputs.boxes[0]);
        }
        assert_eq!(trace.outputs.boxes[0], [0.5, 0.5, 0.5, 0.5]);
    }

    fn overfit_annotation(id: &str) -> crate::unified_data::UnifiedAnnotation {
        let img = 8;
        let rects = [
            (0usize, 0usize, 3usize, 3usize, "crate", ThingStuff::Thing),
            (4, 4, 7, 8, "moss", ThingStuff::Stuff),
            (0, 5, 2, 8, "lamp", ThingStuff::Thing),
        ];
        let segments: Vec<(String, crate::maskops::Rle, ThingStuff)> = rects
            .iter()
            .map(|&(y0, x0, y1, x1, label, tag)| {
                let b = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
                (label.to_string(), rle_encode(&BinaryMask::from_rect(img, img, &b)), tag)
            })
            .collect();
        from_panoptic(id, "toy", (img, img), &segments).unwrap()
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = small_config();
        let params = ModelParams::init(cfg.clone(), 7).unwrap();
        let ann = overfit_annotation("img-3");
        let bank: Vec<TextEmbedding> = ann
            .records
            .iter()
            .map(|r| embed_text(&r.label_text, cfg.d_text).unwrap())
            .collect();
        let weights = LossWeights::default();
        let provenance = cfg.provenance();

        let trace = forward(&ann.image_id, &params).unwrap();
        let breakdown = losses::total_loss(
            &trace.outputs,
            &ann,
            &bank,
            &trace.pixel,
            &weights,
            QueryStrategy::Mixed,
            &provenance,
        )
        .unwrap();
        let mut analytic = vec![0.0; params.num_params()];
        backward(&trace, &params, &breakdown.grads, &breakdown.pixel_grads, &mut analytic);

        let f = |x: &[f64]| -> f64 {
            let mut p = params.clone();
            p.flat_mut().copy_from_slice(x);
            let trace = forward(&ann.image_id, &p).unwrap();
            losses::total_loss(
                &trace.outputs,
                &ann,
                &bank,
                &trace.pixel,
                &weights,
                QueryStrategy::Mixed,
                &provenance,
            )
            .unwrap()
            .total
        };
        let report = grad_check(f, params.flat(), &analytic, 1e-5);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?} ({} checked, {} skipped)",
            report.max_rel_err,
            report.worst_coord,
            report.checked,
            report.skipped
        );
        // selection and matching flips should be rare on a random instance
        assert!(report.skipped < params.num_params() / 20);
    }

    fn toy_training_setup() -> (Vec<Dataset>, MixSpec) {
        let anns = (0..4).map(|i| overfit_annotation(&format!("img-{i}"))).collect();
        let datasets = vec![Dataset::new("toy", anns)];
        let mix = MixSpec {
            seed: 11,
            entries: vec![crate::datamix::MixEntry { dataset: "toy".into(), ratio: 1 }],
        };
        (datasets, mix)
    }

    #[test]
    fn train_is_deterministic() {
        let (datasets, mix) = toy_training_setup();
        let cfg = small_config();
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 4,
            warmup_iterations: 2,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(&datasets, &mix, &cfg, &tcfg, QueryStrategy::Mixed, &LossWeights::default())
            .unwrap();
        let b = train(&datasets, &mix, &cfg, &tcfg, QueryStrategy::Mixed, &LossWeights::default())
            .unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params.flat(), b.params.flat());
        assert_eq!(a.loss_trace.len(), 5);
    }

    #[test]
    fn zero_learning_rate_flat_trace() {
        let (datasets, mix) = toy_training_setup();
        let cfg = small_config();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            batch_size: 4,
            warmup_iterations: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&datasets, &mix, &cfg, &tcfg, QueryStrategy::Mixed, &LossWeights::default())
            .unwrap();
        for w in out.loss_trace.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn predict_threshold_bounds() {
        let cfg = small_config();
        let params = ModelParams::init(cfg.clone(), 5).unwrap();
        let labels = vec!["crate".to_string(), "moss".to_string()];
        let none = predict("img-0", &params, &labels, 1.0).unwrap();
        assert!(none.is_empty());
        let all = predict("img-0", &params, &labels, 0.0).unwrap();
        assert_eq!(all.len(), cfg.num_queries());
        for p in &all {
            assert_eq!(p.mask.values.len(), cfg.cells());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = ModelParams::init(small_config(), 9).unwrap();
        params.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn lr_schedule_warmup_and_decay() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_iterations: 10,
            lr_decay_points: vec![0.9, 0.95],
            lr_decay_factor: 10.0,
            ..TrainConfig::default()
        };
        assert!((lr_at(0, 100, &cfg) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!((lr_at(50, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!((lr_at(90, 100, &cfg) - 0.1).abs() < 1e-12);
        assert!((lr_at(95, 100, &cfg) - 0.01).abs() < 1e-12);
    }
}
