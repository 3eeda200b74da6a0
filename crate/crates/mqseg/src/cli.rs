//! Command-line front door. Every subcommand echoes its fully resolved
//! configuration to stderr as JSON before doing any work, writes outputs
//! only to paths given by flags (or stdout), and exits 0 on success, 1 on a
//! domain error, 2 on a usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamix::{BatchStream, MixSpec};
use crate::losses::{self, LossWeights};
use crate::maskops::{self, BBox, BinaryMask, Rle, SoftMask};
use crate::matching::{self, QueryOrigin, QueryStrategy, RecordPrediction};
use crate::metrics::{self, ImagePredictions, MetricReport, ScoredMask};
use crate::rng::SplitMix64;
use crate::semantics::embed_text;
use crate::toymodel::{self, ModelConfig, ModelParams, TrainConfig};
use crate::unified_data::{self, Dataset, LabelMap, Task, ThingStuff, UnifiedAnnotation};

#[derive(Parser)]
#[command(
    name = "mqseg",
    version,
    about = "Unified segmentation training core: convert annotations, train the toy model, evaluate, and inspect query matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert task-specific annotation files to the unified JSONL format.
    Convert(ConvertArgs),
    /// Train the toy encoder-decoder on unified annotation files.
    TrainToy(TrainToyArgs),
    /// Run a trained checkpoint on image ids against a label bank.
    Predict(PredictArgs),
    /// Score predictions against ground truth for one task.
    Eval(EvalArgs),
    /// Hungarian-match predictions to ground truth and report which query
    /// kinds picked up things and stuff.
    MatchStats(MatchStatsArgs),
    /// Build an epoch plan from a mix spec and show dataset frequencies.
    Sample(SampleArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Convert(args) => cmd_convert(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::MatchStats(args) => cmd_match_stats(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

type CmdResult = Result<i32, Box<dyn std::error::Error>>;

fn echo_resolved<T: Serialize>(config: &T) {
    eprintln!("{}", serde_json::to_string(config).expect("resolved config serializes"));
}

fn write_json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

// ---------------------------------------------------------------------------
// prediction file schema (unified schema plus a score field)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredFileRecord {
    pub label: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_mask: Option<SoftMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<QueryOrigin>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredFileLine {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
    pub records: Vec<PredFileRecord>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredFileLine>, Box<dyn std::error::Error>> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredFileLine = serde_json::from_str(&line)
            .map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
        for (i, rec) in parsed.records.iter().enumerate() {
            let context = |reason: String| {
                format!("{}:{}: record {i}: {reason}", path.display(), lineno + 1)
            };
            if rec.label.trim().is_empty() {
                return Err(context("empty label".into()).into());
            }
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(context(format!("score {} outside [0, 1]", rec.score)).into());
            }
            if let Some(rle) = &rec.mask {
                rle.validate().map_err(|e| context(e.to_string()))?;
            }
            if let Some(soft) = &rec.soft_mask {
                SoftMask::new(soft.h, soft.w, soft.values.clone())
                    .map_err(|e| context(e.to_string()))?;
            }
        }
        out.push(parsed);
    }
    Ok(out)
}

fn pred_line_to_masks(line: &PredFileLine) -> Result<ImagePredictions, Box<dyn std::error::Error>> {
    let mut segments = Vec::with_capacity(line.records.len());
    for (i, rec) in line.records.iter().enumerate() {
        let mask = match (&rec.mask, &rec.soft_mask) {
            (Some(rle), _) => maskops::rle_decode(rle)?,
            (None, Some(soft)) => soft.threshold(0.5),
            (None, None) => {
                return Err(format!(
                    "image {:?} record {i} has neither mask nor soft_mask",
                    line.image_id
                )
                .into())
            }
        };
        segments.push(ScoredMask { label: rec.label.clone(), score: rec.score, mask, bbox: rec.bbox });
    }
    Ok(ImagePredictions { image_id: line.image_id.clone(), segments })
}

// ---------------------------------------------------------------------------
// convert
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct ConvertArgs {
    /// Task of the input file.
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Task-specific JSONL input.
    #[arg(long)]
    input: PathBuf,
    /// Unified JSONL output.
    #[arg(long)]
    output: PathBuf,
    /// Dataset id stamped on every annotation.
    #[arg(long, default_value = "default")]
    dataset_id: String,
    /// Label treated as unannotated in semantic label maps.
    #[arg(long, default_value = "ignore")]
    ignore_label: String,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "instance" => Ok(Task::Instance),
        "semantic" => Ok(Task::Semantic),
        "panoptic" => Ok(Task::Panoptic),
        "foreground" => Ok(Task::Foreground),
        "referring" => Ok(Task::Referring),
        other => Err(format!(
            "unknown task {other:?} (expected instance|semantic|panoptic|foreground|referring)"
        )),
    }
}

#[derive(Deserialize)]
struct InstanceLine {
    image_id: String,
    h: usize,
    w: usize,
    instances: Vec<LabeledMask>,
}

#[derive(Deserialize)]
struct LabeledMask {
    label: String,
    mask: Rle,
}

#[derive(Deserialize)]
struct SemanticLine {
    image_id: String,
    h: usize,
    w: usize,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct PanopticLine {
    image_id: String,
    h: usize,
    w: usize,
    segments: Vec<PanopticSegment>,
}

#[derive(Deserialize)]
struct PanopticSegment {
    label: String,
    mask: Rle,
    #[serde(default)]
    thing_stuff: ThingStuff,
}

#[derive(Deserialize)]
struct ForegroundLine {
    image_id: String,
    h: usize,
    w: usize,
    fg_mask: Rle,
}

#[derive(Deserialize)]
struct ReferringLine {
    image_id: String,
    h: usize,
    w: usize,
    refs: Vec<CaptionedMask>,
}

#[derive(Deserialize)]
struct CaptionedMask {
    caption: String,
    mask: Rle,
}

fn cmd_convert(args: ConvertArgs) -> CmdResult {
    echo_resolved(&args);
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(&args.input)?);
    let mut anns = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let context =
            |e: serde_json::Error| format!("{}:{}: {e}", args.input.display(), lineno + 1);
        let ann = match args.task {
            Task::Instance => {
                let parsed: InstanceLine = serde_json::from_str(&line).map_err(context)?;
                let instances: Vec<(String, Rle)> =
                    parsed.instances.into_iter().map(|i| (i.label, i.mask)).collect();
                unified_data::from_instance(
                    &parsed.image_id,
                    &args.dataset_id,
                    (parsed.h, parsed.w),
                    &instances,
                )?
            }
            Task::Semantic => {
                let parsed: SemanticLine = serde_json::from_str(&line).map_err(context)?;
                let map = LabelMap::new(parsed.h, parsed.w, parsed.labels)?;
                unified_data::from_semantic(
                    &parsed.image_id,
                    &args.dataset_id,
                    &map,
                    &args.ignore_label,
                )?
            }
            Task::Panoptic => {
                let parsed: PanopticLine = serde_json::from_str(&line).map_err(context)?;
                let segments: Vec<(String, Rle, ThingStuff)> = parsed
                    .segments
                    .into_iter()
                    .map(|s| (s.label, s.mask, s.thing_stuff))
                    .collect();
                unified_data::from_panoptic(
                    &parsed.image_id,
                    &args.dataset_id,
                    (parsed.h, parsed.w),
                    &segments,
                )?
            }
            Task::Foreground => {
                let parsed: ForegroundLine = serde_json::from_str(&line).map_err(context)?;
                unified_data::from_foreground(
                    &parsed.image_id,
                    &args.dataset_id,
                    (parsed.h, parsed.w),
                    &parsed.fg_mask,
                )?
            }
            Task::Referring => {
                let parsed: ReferringLine = serde_json::from_str(&line).map_err(context)?;
                let refs: Vec<(String, Rle)> =
                    parsed.refs.into_iter().map(|r| (r.caption, r.mask)).collect();
                unified_data::from_referring(
                    &parsed.image_id,
                    &args.dataset_id,
                    (parsed.h, parsed.w),
                    &refs,
                )?
            }
        };
        anns.push(ann);
    }
    unified_data::write_jsonl(&args.output, &anns)?;
    eprintln!("wrote {} annotations to {}", anns.len(), args.output.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

/// On-disk run configuration; the stderr echo of `train-toy` is exactly this
/// shape and can be fed back via --config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub weights: LossWeights,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Unified annotation files (datasets grouped by dataset_id).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Mix spec JSON; defaults to every found dataset at ratio 1.
    #[arg(long)]
    mix: Option<PathBuf>,
    /// Run config JSON ({"model": .., "train": .., "weights": ..}); flags
    /// override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "mixed")]
    strategy: QueryStrategy,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides the config learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step loss trace output (one value per line).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Accept records whose bbox differs from the mask-derived box.
    #[arg(long)]
    external_boxes: bool,
}

fn load_datasets(
    paths: &[PathBuf],
    external_boxes: bool,
) -> Result<Vec<Dataset>, Box<dyn std::error::Error>> {
    let mut by_id: BTreeMap<String, Vec<UnifiedAnnotation>> = BTreeMap::new();
    for path in paths {
        for ann in unified_data::read_jsonl(path, external_boxes)? {
            by_id.entry(ann.dataset_id.clone()).or_default().push(ann);
        }
    }
    Ok(by_id.into_iter().map(|(id, anns)| Dataset::new(id, anns)).collect())
}

fn resolve_run_config(
    config: Option<&PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
) -> Result<RunConfigFile, Box<dyn std::error::Error>> {
    let mut run: RunConfigFile = match config {
        Some(path) => {
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?
        }
        None => RunConfigFile::default(),
    };
    if let Some(seed) = seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = epochs {
        run.train.epochs = epochs;
    }
    if let Some(batch) = batch_size {
        run.train.batch_size = batch;
    }
    if let Some(lr) = lr {
        run.train.learning_rate = lr;
    }
    Ok(run)
}

fn cmd_train_toy(args: TrainToyArgs) -> CmdResult {
    let run = resolve_run_config(
        args.config.as_ref(),
        args.seed,
        args.epochs,
        args.batch_size,
        args.lr,
    )?;
    echo_resolved(&run);

    let datasets = load_datasets(&args.data, args.external_boxes)?;
    let mix = match &args.mix {
        Some(path) => {
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?
        }
        None => MixSpec {
            seed: run.train.seed,
            entries: datasets
                .iter()
                .map(|d| crate::datamix::MixEntry { dataset: d.dataset_id.clone(), ratio: 1 })
                .collect(),
        },
    };

    let outcome =
        toymodel::train(&datasets, &mix, &run.model, &run.train, args.strategy, &run.weights)?;
    outcome.params.save(&args.out)?;
    if let Some(trace_path) = &args.trace {
        let mut f = std::io::BufWriter::new(std::fs::File::create(trace_path)?);
        for loss in &outcome.loss_trace {
            writeln!(f, "{loss:?}")?;
        }
    }
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "trained {} steps, final loss {last:.6}, checkpoint {}",
        outcome.loss_trace.len(),
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image ids to run, one prediction line each.
    #[arg(long = "image-id", required = true, num_args = 1..)]
    image_ids: Vec<String>,
    /// Comma-separated open-vocabulary label bank.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output height (defaults to the model grid height).
    #[arg(long)]
    height: Option<usize>,
    /// Output width (defaults to the model grid width).
    #[arg(long)]
    width: Option<usize>,
    /// Prediction JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-pixel soft masks.
    #[arg(long)]
    soft: bool,
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    echo_resolved(&args);
    let params = ModelParams::load(&args.ckpt)?;
    let h = args.height.unwrap_or(params.config.grid_h);
    let w = args.width.unwrap_or(params.config.grid_w);
    let mut lines = Vec::new();
    for image_id in &args.image_ids {
        let preds = toymodel::predict(image_id, &params, &args.labels, args.threshold)?;
        let mut records = Vec::with_capacity(preds.len());
        for p in preds {
            let soft = p.mask.resize_nearest(h, w);
            let binary = soft.threshold(0.5);
            let corners = maskops::center_to_corners(&p.box_norm);
            let bbox = BBox::new(
                corners[0] * w as f64,
                corners[1] * h as f64,
                corners[2] * w as f64,
                corners[3] * h as f64,
            )
            .ok();
            records.push(PredFileRecord {
                label: args.labels[p.label_index].clone(),
                score: p.score,
                bbox,
                mask: Some(maskops::rle_encode(&binary)),
                soft_mask: args.soft.then_some(soft),
                provenance: Some(if p.query_index < params.config.n_learnable {
                    QueryOrigin::Learnable
                } else {
                    QueryOrigin::Conditional
                }),
            });
        }
        lines.push(PredFileLine { image_id: image_id.clone(), h, w, records });
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for line in &lines {
        write_json_line(&mut *out, line)?;
    }
    out.flush()?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Unified annotation ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// Score box IoU instead of mask IoU (instance task only).
    #[arg(long)]
    box_iou: bool,
    #[arg(long, default_value = "ignore")]
    ignore_label: String,
    /// Resolve overlapping predictions into panoptic form (highest score
    /// wins each pixel) before scoring PQ, instead of rejecting them.
    #[arg(long)]
    resolve_overlaps: bool,
    /// Accept records whose bbox differs from the mask-derived box.
    #[arg(long)]
    external_boxes: bool,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    echo_resolved(&args);
    let gts = unified_data::read_jsonl(&args.gt, args.external_boxes)?;
    let pred_lines = read_predictions(&args.pred)?;

    // both directions must align, whatever the task
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    for line in &pred_lines {
        if !gt_ids.contains(line.image_id.as_str()) {
            return Err(format!(
                "prediction for image {:?} has no ground-truth counterpart",
                line.image_id
            )
            .into());
        }
    }
    let by_id: BTreeMap<&str, &PredFileLine> =
        pred_lines.iter().map(|l| (l.image_id.as_str(), l)).collect();
    let line_for = |gt: &UnifiedAnnotation| -> Result<&&PredFileLine, String> {
        by_id.get(gt.image_id.as_str()).ok_or_else(|| {
            format!("ground truth for image {:?} has no prediction entry", gt.image_id)
        })
    };

    let mut report = MetricReport {
        task: Some(format!("{:?}", args.task).to_lowercase()),
        ..Default::default()
    };

    match args.task {
        Task::Panoptic => {
            let mut preds: Vec<ImagePredictions> =
                pred_lines.iter().map(pred_line_to_masks).collect::<Result<_, _>>()?;
            if args.resolve_overlaps {
                for (line, pred) in pred_lines.iter().zip(&mut preds) {
                    pred.segments = metrics::resolve_overlaps(&pred.segments, line.h, line.w);
                }
            }
            let pq = metrics::panoptic_quality(&preds, &gts)?;
            report.pq = Some(pq.pq);
            report.sq = Some(pq.sq);
            report.rq = Some(pq.rq);
            report.per_class_pq = Some(pq.per_class);
        }
        Task::Instance => {
            let preds: Vec<ImagePredictions> =
                pred_lines.iter().map(pred_line_to_masks).collect::<Result<_, _>>()?;
            let ap = metrics::average_precision(&preds, &gts, args.box_iou)?;
            report.mask_ap = Some(ap.mean_ap);
            report.ap50 = Some(ap.ap50);
            report.per_threshold = Some(ap.per_threshold);
            report.per_class_ap = Some(ap.per_class);
        }
        Task::Semantic => {
            let mut confusion = metrics::SemanticConfusion::new();
            for gt in &gts {
                let line = line_for(gt)?;
                let pred_map = paint_label_map(line, &args.ignore_label)?;
                let gt_map = unified_data::rasterize_records(gt, &args.ignore_label)?;
                confusion.add(&pred_map, &gt_map, &args.ignore_label)?;
            }
            let miou = confusion.finish();
            report.miou = miou.miou;
            report.per_class_iou = Some(miou.per_class);
        }
        Task::Referring => {
            let mut pairs = Vec::new();
            for gt in &gts {
                let line = line_for(gt)?;
                if line.records.len() != gt.records.len() {
                    return Err(format!(
                        "image {:?}: {} referring predictions for {} ground truths",
                        gt.image_id,
                        line.records.len(),
                        gt.records.len()
                    )
                    .into());
                }
                let preds = pred_line_to_masks(line)?;
                for (rec, seg) in gt.records.iter().zip(preds.segments) {
                    pairs.push((seg.mask, rec.decode_mask()?));
                }
            }
            report.miou = metrics::referring_cumulative_iou(&pairs)?;
        }
        Task::Foreground => {
            let mut total = 0.0;
            let mut count = 0usize;
            for gt in &gts {
                let line = line_for(gt)?;
                let gt_mask = gt
                    .records
                    .iter()
                    .find(|r| r.label_text == "foreground")
                    .map(|r| r.decode_mask())
                    .transpose()?
                    .unwrap_or_else(|| BinaryMask::zeros(gt.height, gt.width));
                let pred_soft = foreground_soft_mask(line, gt.height, gt.width)?;
                total += metrics::foreground_mse(&pred_soft, &gt_mask)?;
                count += 1;
            }
            report.mse = if count > 0 { Some(total / count as f64) } else { None };
        }
    }

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    Ok(0)
}

/// Paints prediction records onto a label map, highest score winning.
fn paint_label_map(
    line: &PredFileLine,
    ignore: &str,
) -> Result<LabelMap, Box<dyn std::error::Error>> {
    let preds = pred_line_to_masks(line)?;
    let resolved = metrics::resolve_overlaps(&preds.segments, line.h, line.w);
    let mut labels = vec![ignore.to_string(); line.h * line.w];
    for seg in &resolved {
        for (pix, &b) in seg.mask.bits().iter().enumerate() {
            if b {
                labels[pix] = seg.label.clone();
            }
        }
    }
    Ok(LabelMap::new(line.h, line.w, labels)?)
}

/// The soft foreground prediction of an image: an explicit soft mask when
/// present, else the binary mask as hard probabilities, else all zero.
fn foreground_soft_mask(
    line: &PredFileLine,
    h: usize,
    w: usize,
) -> Result<SoftMask, Box<dyn std::error::Error>> {
    let rec = line
        .records
        .iter()
        .find(|r| r.label == "foreground")
        .or_else(|| line.records.first());
    match rec {
        None => Ok(SoftMask::new(h, w, vec![0.0; h * w])?),
        Some(rec) => {
            if let Some(soft) = &rec.soft_mask {
                return Ok(soft.clone());
            }
            if let Some(rle) = &rec.mask {
                let mask = maskops::rle_decode(rle)?;
                let values = mask.bits().iter().map(|&b| f64::from(b)).collect();
                return Ok(SoftMask::new(mask.height(), mask.width(), values)?);
            }
            Err(format!("image {:?} has neither mask nor soft_mask", line.image_id).into())
        }
    }
}

// ---------------------------------------------------------------------------
// match-stats
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct MatchStatsArgs {
    /// Unified annotation ground truth (tags required for the ratios).
    #[arg(long)]
    gt: PathBuf,
    /// Prediction JSONL with per-record provenance.
    #[arg(long)]
    pred: PathBuf,
    /// Accept records whose bbox differs from the mask-derived box.
    #[arg(long)]
    external_boxes: bool,
}

fn cmd_match_stats(args: MatchStatsArgs) -> CmdResult {
    echo_resolved(&args);
    let gts = unified_data::read_jsonl(&args.gt, args.external_boxes)?;
    let pred_lines = read_predictions(&args.pred)?;
    let by_id: BTreeMap<&str, &PredFileLine> =
        pred_lines.iter().map(|l| (l.image_id.as_str(), l)).collect();

    let weights = matching::CostWeights::default();
    let mut assignments = Vec::new();
    let mut tag_sets = Vec::new();
    let mut merged_origins: Vec<QueryOrigin> = Vec::new();
    let mut offset = 0usize;

    for gt in &gts {
        let line = by_id.get(gt.image_id.as_str()).ok_or_else(|| {
            format!("ground truth for image {:?} has no prediction entry", gt.image_id)
        })?;
        if gt.records.is_empty() {
            continue;
        }
        let mut preds = Vec::with_capacity(line.records.len());
        let mut origins = Vec::with_capacity(line.records.len());
        for (i, rec) in line.records.iter().enumerate() {
            let origin = rec
                .provenance
                .ok_or_else(|| format!("image {:?} record {i} lacks provenance", line.image_id))?;
            let mask = match (&rec.mask, &rec.soft_mask) {
                (Some(rle), _) => maskops::rle_decode(rle)?,
                (None, Some(soft)) => soft.threshold(0.5),
                (None, None) => {
                    return Err(format!("image {:?} record {i} has no mask", line.image_id).into())
                }
            };
            let bbox = match rec.bbox {
                Some(b) => b,
                None => maskops::mask_to_bbox(&mask)?,
            };
            preds.push(RecordPrediction { label: rec.label.clone(), bbox, mask });
            origins.push(origin);
        }
        let costs =
            matching::build_record_cost_matrix(&gt.records, &preds, gt.image_size(), &weights)?;
        // offset the assignment into a merged provenance space so one stats
        // pass covers all images
        let mut assignment = matching::hungarian(&costs)?;
        for q in &mut assignment.query_for_gt {
            *q += offset;
        }
        offset += origins.len();
        merged_origins.extend(origins);
        assignments.push(assignment);
        tag_sets.push(gt.records.iter().map(|r| r.thing_stuff).collect::<Vec<_>>());
    }

    let provenance = matching::QueryProvenance::from_origins(merged_origins);
    let stats = matching::selection_stats(&assignments, &tag_sets, &provenance);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &stats)?;
    out.write_all(b"\n")?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct SampleArgs {
    /// Mix spec JSON; "default" for the built-in joint-training profile.
    #[arg(long)]
    mix: String,
    /// Directory of unified .jsonl files (datasets grouped by dataset_id).
    #[arg(long)]
    datasets: PathBuf,
    /// Number of draws; a single full epoch when omitted.
    #[arg(long)]
    n: Option<usize>,
    /// Print the per-dataset frequency table instead of the draw sequence.
    #[arg(long)]
    dry_run: bool,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Accept records whose bbox differs from the mask-derived box.
    #[arg(long)]
    external_boxes: bool,
}

fn cmd_sample(args: SampleArgs) -> CmdResult {
    echo_resolved(&args);
    let mut spec: MixSpec = if args.mix == "default" {
        MixSpec::default_profile(0)
    } else {
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&args.mix)?))?
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }

    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.datasets)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    paths.sort();
    let datasets = load_datasets(&paths, args.external_boxes)?;

    let mut stream = BatchStream::new(&datasets, &spec)?;
    let draws = args.n.unwrap_or_else(|| stream.plan_len());
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if args.dry_run {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..draws {
            let ann = &stream.next_batch(1)[0];
            *freq.entry(ann.dataset_id.clone()).or_default() += 1;
        }
        serde_json::to_writer_pretty(&mut out, &freq)?;
        out.write_all(b"\n")?;
    } else {
        #[derive(Serialize)]
        struct Draw<'a> {
            dataset_id: &'a str,
            image_id: &'a str,
        }
        for _ in 0..draws {
            let batch = stream.next_batch(1);
            let ann = &batch[0];
            write_json_line(
                &mut out,
                &Draw { dataset_id: &ann.dataset_id, image_id: &ann.image_id },
            )?;
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random loss instances to probe.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Whole-model instances to probe (finite differences over every
    /// parameter, so these are slower).
    #[arg(long, default_value_t = 2)]
    model_instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Serialize)]
struct GradcheckOutput {
    loss_max_rel_err: f64,
    model_max_rel_err: f64,
    loss_instances: usize,
    model_instances: usize,
    skipped: usize,
    tolerance: f64,
    pass: bool,
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    echo_resolved(&args);
    let mut rng = SplitMix64::new(args.seed);
    let mut skipped = 0usize;

    let mut loss_max = 0.0f64;
    for _ in 0..args.instances {
        let report = loss_gradcheck_instance(&mut rng, args.step)?;
        loss_max = loss_max.max(report.max_rel_err);
        skipped += report.skipped;
    }

    let mut model_max = 0.0f64;
    for _ in 0..args.model_instances {
        let report = model_gradcheck_instance(&mut rng, args.step)?;
        model_max = model_max.max(report.max_rel_err);
        skipped += report.skipped;
    }

    let pass = loss_max < args.tolerance && model_max < args.tolerance;
    let output = GradcheckOutput {
        loss_max_rel_err: loss_max,
        model_max_rel_err: model_max,
        loss_instances: args.instances,
        model_instances: args.model_instances,
        skipped,
        tolerance: args.tolerance,
        pass,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &output)?;
    out.write_all(b"\n")?;
    Ok(if pass { 0 } else { 1 })
}

/// Random panoptic-style annotation: disjoint rectangles in separate row
/// bands, tags alternating thing/stuff.
pub fn random_rect_annotation(
    rng: &mut SplitMix64,
    image_id: &str,
    img: usize,
    objects: usize,
) -> UnifiedAnnotation {
    let band = img / objects.max(1);
    let mut segments = Vec::new();
    for k in 0..objects {
        let y0 = k * band;
        let bh = 1 + rng.next_below(band as u64) as usize;
        let x0 = rng.next_below((img / 2) as u64) as usize;
        let bw = 1 + rng.next_below((img - x0 - 1) as u64) as usize;
        let rect =
            BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64).expect("area");
        let mask = BinaryMask::from_rect(img, img, &rect);
        let tag = if k % 2 == 0 { ThingStuff::Thing } else { ThingStuff::Stuff };
        segments.push((format!("object-{k}"), maskops::rle_encode(&mask), tag));
    }
    unified_data::from_panoptic(image_id, "gradcheck", (img, img), &segments)
        .expect("disjoint by construction")
}

fn loss_gradcheck_instance(
    rng: &mut SplitMix64,
    step: f64,
) -> Result<losses::GradCheckReport, Box<dyn std::error::Error>> {
    use losses::{DecoderOutputs, PixelFeatureMap};
    let queries = 8;
    let gts = 3;
    let dim_text = 16;
    let dim_mask = 8;
    let grid = 8;
    let seed = rng.next_u64();
    let mut local = SplitMix64::new(seed);

    let ann = random_rect_annotation(&mut local, "probe", 2 * grid, gts);
    let bank: Vec<_> = ann
        .records
        .iter()
        .map(|r| embed_text(&r.label_text, dim_text).unwrap())
        .collect();
    let outputs = DecoderOutputs {
        dim_text,
        dim_mask,
        class_embeds: (0..queries * dim_text).map(|_| local.next_normal() * 0.5).collect(),
        boxes: (0..queries)
            .map(|_| {
                [
                    0.2 + 0.6 * local.next_f64(),
                    0.2 + 0.6 * local.next_f64(),
                    0.1 + 0.3 * local.next_f64(),
                    0.1 + 0.3 * local.next_f64(),
                ]
            })
            .collect(),
        mask_embeds: (0..queries * dim_mask).map(|_| local.next_normal() * 0.5).collect(),
    };
    let pixel = PixelFeatureMap {
        dim: dim_mask,
        height: grid,
        width: grid,
        features: (0..grid * grid * dim_mask).map(|_| local.next_normal() * 0.5).collect(),
    };
    let weights = LossWeights::default();
    let provenance = matching::QueryProvenance::layout(3, 5);

    let breakdown = losses::total_loss(
        &outputs,
        &ann,
        &bank,
        &pixel,
        &weights,
        QueryStrategy::Mixed,
        &provenance,
    )?;

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

    let f = move |x: &[f64]| -> f64 {
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
        losses::total_loss(&o, &ann, &bank, &p, &weights, QueryStrategy::Mixed, &provenance)
            .expect("probe instance stays valid")
            .total
    };
    Ok(losses::grad_check(f, &point, &analytic, step))
}

fn model_gradcheck_instance(
    rng: &mut SplitMix64,
    step: f64,
) -> Result<losses::GradCheckReport, Box<dyn std::error::Error>> {
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
    let seed = rng.next_u64();
    let mut local = SplitMix64::new(seed);
    let params = ModelParams::init(cfg.clone(), seed)?;
    let ann = random_rect_annotation(&mut local, &format!("probe-{seed}"), 8, 3);
    let bank: Vec<_> = ann
        .records
        .iter()
        .map(|r| embed_text(&r.label_text, cfg.d_text).unwrap())
        .collect();
    let weights = LossWeights::default();
    let provenance = cfg.provenance();

    let trace = toymodel::forward(&ann.image_id, &params)?;
    let breakdown = losses::total_loss(
        &trace.outputs,
        &ann,
        &bank,
        &trace.pixel,
        &weights,
        QueryStrategy::Mixed,
        &provenance,
    )?;
    let mut analytic = vec![0.0; params.num_params()];
    toymodel::backward(&trace, &params, &breakdown.grads, &breakdown.pixel_grads, &mut analytic);

    let base = params.clone();
    let ann_for_f = ann.clone();
    let bank_for_f = bank.clone();
    let f = move |x: &[f64]| -> f64 {
        let mut p = base.clone();
        p.flat_mut().copy_from_slice(x);
        let trace = toymodel::forward(&ann_for_f.image_id, &p).expect("probe forward");
        losses::total_loss(
            &trace.outputs,
            &ann_for_f,
            &bank_for_f,
            &trace.pixel,
            &weights,
            QueryStrategy::Mixed,
            &provenance,
        )
        .expect("probe instance stays valid")
        .total
    };
    Ok(losses::grad_check(f, params.flat(), &analytic, step))
}
