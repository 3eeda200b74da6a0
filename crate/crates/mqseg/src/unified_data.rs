//! Unified annotation format and the adapters that map instance, semantic,
//! panoptic, foreground, and referring annotations into it.
//!
//! Every task reduces to the same per-segment triplet: a free-form label
//! text, a bounding box, and a mask. Boxes are rederived from masks by all
//! adapters; externally supplied boxes survive ingestion only behind an
//! explicit flag and are validated to contain the mask.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskops::{self, BBox, BinaryMask, MaskError, Rle};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("segment masks {a} and {b} overlap")]
    Overlap { a: usize, b: usize },
    #[error("record index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("caption pool of {count} exceeds the maximum of 5")]
    TooManyCaptions { count: usize },
    #[error("caption pool is empty")]
    EmptyCaptions,
    #[error("label map has {len} labels for a {h}x{w} image")]
    LabelMapSize { len: usize, h: usize, w: usize },
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("external bbox on record {index} does not contain its mask")]
    ExternalBboxMismatch { index: usize },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Thing/stuff metadata. Optional everywhere: only the separated-query
/// baseline and selection statistics consume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThingStuff {
    Thing,
    Stuff,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Instance,
    Semantic,
    Panoptic,
    Foreground,
    Referring,
}

/// One segment annotation: label text (class name or referring caption),
/// box, and mask, plus optional thing/stuff tag and synthetic-caption pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    #[serde(rename = "label")]
    pub label_text: String,
    /// [x_min, y_min, x_max, y_max], half-open pixels.
    pub bbox: BBox,
    pub mask: Rle,
    #[serde(default, skip_serializing_if = "is_unknown")]
    pub thing_stuff: ThingStuff,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_pool: Option<Vec<String>>,
    /// Set when the box was ingested from an external source instead of
    /// derived from the mask.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub external_bbox: bool,
}

fn is_unknown(ts: &ThingStuff) -> bool {
    *ts == ThingStuff::Unknown
}

impl SegmentRecord {
    /// Builds a record with the box derived from the mask.
    pub fn from_mask(label_text: impl Into<String>, mask: &BinaryMask) -> Result<Self, DataError> {
        let bbox = maskops::mask_to_bbox(mask)?;
        Ok(Self {
            label_text: label_text.into(),
            bbox,
            mask: maskops::rle_encode(mask),
            thing_stuff: ThingStuff::Unknown,
            caption_pool: None,
            external_bbox: false,
        })
    }

    pub fn with_tag(mut self, tag: ThingStuff) -> Self {
        self.thing_stuff = tag;
        self
    }

    pub fn decode_mask(&self) -> Result<BinaryMask, MaskError> {
        maskops::rle_decode(&self.mask)
    }
}

/// Per-image annotation set shared by all five tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedAnnotation {
    pub image_id: String,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub task: Task,
    pub dataset_id: String,
    pub records: Vec<SegmentRecord>,
}

impl UnifiedAnnotation {
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Checks the format invariants: mask sizes, panoptic disjointness, and
    /// the foreground label alphabet.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut decoded = Vec::with_capacity(self.records.len());
        for (i, rec) in self.records.iter().enumerate() {
            if rec.mask.h != self.height || rec.mask.w != self.width {
                return Err(DataError::BadRecord {
                    index: i,
                    reason: format!(
                        "mask is {}x{} but image is {}x{}",
                        rec.mask.h, rec.mask.w, self.height, self.width
                    ),
                });
            }
            if rec.label_text.trim().is_empty() {
                return Err(DataError::BadRecord { index: i, reason: "empty label".into() });
            }
            if let Some(pool) = &rec.caption_pool {
                if pool.is_empty() {
                    return Err(DataError::EmptyCaptions);
                }
                if pool.len() > 5 {
                    return Err(DataError::TooManyCaptions { count: pool.len() });
                }
            }
            decoded.push(rec.decode_mask()?);
        }
        if self.task == Task::Panoptic {
            for i in 0..decoded.len() {
                for j in (i + 1)..decoded.len() {
                    if decoded[i].intersects(&decoded[j]) {
                        return Err(DataError::Overlap { a: i, b: j });
                    }
                }
            }
        }
        if self.task == Task::Foreground {
            for (i, rec) in self.records.iter().enumerate() {
                if rec.label_text != "foreground" && rec.label_text != "background" {
                    return Err(DataError::BadRecord {
                        index: i,
                        reason: format!("foreground task label {:?}", rec.label_text),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Named, ordered collection of annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dataset_id: String,
    pub annotations: Vec<UnifiedAnnotation>,
}

impl Dataset {
    pub fn new(dataset_id: impl Into<String>, annotations: Vec<UnifiedAnnotation>) -> Self {
        Self { dataset_id: dataset_id.into(), annotations }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

/// Per-pixel label map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<String>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<String>) -> Result<Self, DataError> {
        if labels.len() != height * width {
            return Err(DataError::LabelMapSize { len: labels.len(), h: height, w: width });
        }
        Ok(Self { height, width, labels })
    }

    pub fn get(&self, row: usize, col: usize) -> &str {
        &self.labels[row * self.width + col]
    }
}

/// Instance annotations: one record per (class text, mask) pair.
pub fn from_instance(
    image_id: &str,
    dataset_id: &str,
    image_size: (usize, usize),
    instances: &[(String, Rle)],
) -> Result<UnifiedAnnotation, DataError> {
    let mut records = Vec::with_capacity(instances.len());
    for (label, rle) in instances {
        let mask = sized_decode(rle, image_size)?;
        records.push(SegmentRecord::from_mask(label.clone(), &mask)?);
    }
    Ok(UnifiedAnnotation {
        image_id: image_id.into(),
        height: image_size.0,
        width: image_size.1,
        task: Task::Instance,
        dataset_id: dataset_id.into(),
        records,
    })
}

/// Semantic annotations: one record per distinct non-ignore class, in first
/// appearance order; masks partition the non-ignore pixels.
pub fn from_semantic(
    image_id: &str,
    dataset_id: &str,
    label_map: &LabelMap,
    ignore_label: &str,
) -> Result<UnifiedAnnotation, DataError> {
    let mut class_masks: BTreeMap<&str, BinaryMask> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for y in 0..label_map.height {
        for x in 0..label_map.width {
            let label = label_map.get(y, x);
            if label == ignore_label {
                continue;
            }
            let mask = class_masks.entry(label).or_insert_with(|| {
                order.push(label);
                BinaryMask::zeros(label_map.height, label_map.width)
            });
            mask.set(y, x, true);
        }
    }
    let mut records = Vec::with_capacity(order.len());
    for label in order {
        records.push(SegmentRecord::from_mask(label, &class_masks[label])?);
    }
    Ok(UnifiedAnnotation {
        image_id: image_id.into(),
        height: label_map.height,
        width: label_map.width,
        task: Task::Semantic,
        dataset_id: dataset_id.into(),
        records,
    })
}

/// Panoptic annotations: disjoint segments with optional thing/stuff tags.
pub fn from_panoptic(
    image_id: &str,
    dataset_id: &str,
    image_size: (usize, usize),
    segments: &[(String, Rle, ThingStuff)],
) -> Result<UnifiedAnnotation, DataError> {
    let mut decoded = Vec::with_capacity(segments.len());
    for (_, rle, _) in segments {
        decoded.push(sized_decode(rle, image_size)?);
    }
    for i in 0..decoded.len() {
        for j in (i + 1)..decoded.len() {
            if decoded[i].intersects(&decoded[j]) {
                return Err(DataError::Overlap { a: i, b: j });
            }
        }
    }
    let mut records = Vec::with_capacity(segments.len());
    for ((label, _, tag), mask) in segments.iter().zip(&decoded) {
        records.push(SegmentRecord::from_mask(label.clone(), mask)?.with_tag(*tag));
    }
    Ok(UnifiedAnnotation {
        image_id: image_id.into(),
        height: image_size.0,
        width: image_size.1,
        task: Task::Panoptic,
        dataset_id: dataset_id.into(),
        records,
    })
}

/// Foreground annotations as binary segmentation: a "foreground" record for
/// the given mask and a "background" record for its complement, each emitted
/// only when nonempty.
pub fn from_foreground(
    image_id: &str,
    dataset_id: &str,
    image_size: (usize, usize),
    fg_mask: &Rle,
) -> Result<UnifiedAnnotation, DataError> {
    let fg = sized_decode(fg_mask, image_size)?;
    let bg = fg.complement();
    let mut records = Vec::new();
    if !fg.is_empty() {
        records.push(SegmentRecord::from_mask("foreground", &fg)?);
    }
    if !bg.is_empty() {
        records.push(SegmentRecord::from_mask("background", &bg)?);
    }
    Ok(UnifiedAnnotation {
        image_id: image_id.into(),
        height: image_size.0,
        width: image_size.1,
        task: Task::Foreground,
        dataset_id: dataset_id.into(),
        records,
    })
}

/// Referring annotations: the label text is a free-form caption.
pub fn from_referring(
    image_id: &str,
    dataset_id: &str,
    image_size: (usize, usize),
    refs: &[(String, Rle)],
) -> Result<UnifiedAnnotation, DataError> {
    let mut records = Vec::with_capacity(refs.len());
    for (caption, rle) in refs {
        let mask = sized_decode(rle, image_size)?;
        records.push(SegmentRecord::from_mask(caption.clone(), &mask)?);
    }
    Ok(UnifiedAnnotation {
        image_id: image_id.into(),
        height: image_size.0,
        width: image_size.1,
        task: Task::Referring,
        dataset_id: dataset_id.into(),
        records,
    })
}

fn sized_decode(rle: &Rle, image_size: (usize, usize)) -> Result<BinaryMask, DataError> {
    if rle.h != image_size.0 || rle.w != image_size.1 {
        return Err(DataError::Mask(MaskError::DimMismatch {
            ah: rle.h,
            aw: rle.w,
            bh: image_size.0,
            bw: image_size.1,
        }));
    }
    Ok(maskops::rle_decode(rle)?)
}

/// Attaches synthetic caption pools (at most five per record); the original
/// label text stays as the fallback.
pub fn attach_synthetic_captions(
    mut ann: UnifiedAnnotation,
    captions: &BTreeMap<usize, Vec<String>>,
) -> Result<UnifiedAnnotation, DataError> {
    for (&index, pool) in captions {
        if index >= ann.records.len() {
            return Err(DataError::IndexOutOfRange { index, len: ann.records.len() });
        }
        if pool.is_empty() {
            return Err(DataError::EmptyCaptions);
        }
        if pool.len() > 5 {
            return Err(DataError::TooManyCaptions { count: pool.len() });
        }
        ann.records[index].caption_pool = Some(pool.clone());
    }
    Ok(ann)
}

/// Keeps exactly the annotations whose image id is not excluded; order
/// preserved.
pub fn apply_exclusion(ds: &Dataset, excluded_image_ids: &HashSet<String>) -> Dataset {
    Dataset {
        dataset_id: ds.dataset_id.clone(),
        annotations: ds
            .annotations
            .iter()
            .filter(|a| !excluded_image_ids.contains(&a.image_id))
            .cloned()
            .collect(),
    }
}

/// Paints records onto a label map in record order (later records win);
/// uncovered pixels get the ignore label.
pub fn rasterize_records(
    ann: &UnifiedAnnotation,
    ignore_label: &str,
) -> Result<LabelMap, DataError> {
    let mut labels = vec![ignore_label.to_string(); ann.height * ann.width];
    for rec in &ann.records {
        let mask = rec.decode_mask()?;
        for y in 0..ann.height {
            for x in 0..ann.width {
                if mask.get(y, x) {
                    labels[y * ann.width + x] = rec.label_text.clone();
                }
            }
        }
    }
    LabelMap::new(ann.height, ann.width, labels)
}

/// Writes one annotation per line.
pub fn write_jsonl(path: &Path, anns: &[UnifiedAnnotation]) -> Result<(), DataError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ann in anns {
        serde_json::to_writer(&mut file, ann)
            .map_err(|source| DataError::Json { line: 0, source })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a unified annotation file. Boxes that differ from the mask-derived
/// box are rejected unless `allow_external_boxes` is set, in which case they
/// must contain the mask and are flagged on the record.
pub fn read_jsonl(path: &Path, allow_external_boxes: bool) -> Result<Vec<UnifiedAnnotation>, DataError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut anns = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ann: UnifiedAnnotation = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { line: lineno + 1, source })?;
        ann.validate()?;
        for (i, rec) in ann.records.iter_mut().enumerate() {
            let derived = maskops::mask_to_bbox(&maskops::rle_decode(&rec.mask)?)?;
            if rec.bbox != derived {
                if !allow_external_boxes {
                    return Err(DataError::BadRecord {
                        index: i,
                        reason: format!(
                            "bbox {:?} differs from mask-derived {:?} (pass the external-box flag to ingest)",
                            rec.bbox, derived
                        ),
                    });
                }
                if !rec.bbox.contains(&derived) {
                    return Err(DataError::ExternalBboxMismatch { index: i });
                }
                rec.external_bbox = true;
            }
        }
        anns.push(ann);
    }
    Ok(anns)
}
