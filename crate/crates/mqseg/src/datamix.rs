//! Multi-dataset joint-training sampler with exact integer upsampling
//! ratios, plus per-iteration synthetic-caption selection.
//!
//! An epoch plan repeats every annotation of dataset `d` exactly `ratio_d`
//! times and shuffles the whole sequence with a seeded RNG, so epoch
//! composition is testable exactly rather than in expectation. Epoch `e`
//! shuffles with `seed + e`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::unified_data::{Dataset, SegmentRecord, UnifiedAnnotation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MixError {
    #[error("mix entry references unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset {0:?} appears twice in the mix")]
    DuplicateDataset(String),
    #[error("ratio for dataset {0:?} must be >= 1")]
    ZeroRatio(String),
    #[error("the mix selects no annotations")]
    EmptyMix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixEntry {
    pub dataset: String,
    pub ratio: u32,
}

/// Which datasets participate in joint training and how often each one's
/// annotations repeat per epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub seed: u64,
    pub entries: Vec<MixEntry>,
}

impl MixSpec {
    /// The default joint-training profile.
    pub fn default_profile(seed: u64) -> Self {
        let table = [
            ("coco", 3),
            ("ade20k", 30),
            ("lvis", 3),
            ("visual_genome", 9),
            ("objects365", 1),
            ("referring", 6),
            ("syn-coco", 3),
            ("syn-objects365", 1),
            ("foreground", 9),
        ];
        Self {
            seed,
            entries: table
                .iter()
                .map(|(dataset, ratio)| MixEntry { dataset: dataset.to_string(), ratio: *ratio })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), MixError> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if entry.ratio == 0 {
                return Err(MixError::ZeroRatio(entry.dataset.clone()));
            }
            if !seen.insert(&entry.dataset) {
                return Err(MixError::DuplicateDataset(entry.dataset.clone()));
            }
        }
        Ok(())
    }
}

/// One epoch's worth of (dataset index, annotation index) draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub items: Vec<(usize, usize)>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Builds the epoch-0 plan: exact occurrence counts, uniform seeded shuffle.
pub fn build_epoch_plan(datasets: &[Dataset], spec: &MixSpec) -> Result<EpochPlan, MixError> {
    build_epoch_plan_for_epoch(datasets, spec, 0)
}

/// Same as [`build_epoch_plan`] but shuffled with `seed + epoch`.
pub fn build_epoch_plan_for_epoch(
    datasets: &[Dataset],
    spec: &MixSpec,
    epoch: u64,
) -> Result<EpochPlan, MixError> {
    spec.validate()?;
    let mut items = Vec::new();
    for entry in &spec.entries {
        let idx = datasets
            .iter()
            .position(|d| d.dataset_id == entry.dataset)
            .ok_or_else(|| MixError::UnknownDataset(entry.dataset.clone()))?;
        for _ in 0..entry.ratio {
            for ann in 0..datasets[idx].len() {
                items.push((idx, ann));
            }
        }
    }
    let mut rng = SplitMix64::new(spec.seed.wrapping_add(epoch));
    rng.shuffle(&mut items);
    Ok(EpochPlan { items })
}

/// Uniform draw from the caption pool when present, otherwise the label text.
pub fn draw_caption(record: &SegmentRecord, rng: &mut SplitMix64) -> String {
    match &record.caption_pool {
        Some(pool) => pool[rng.next_below(pool.len() as u64) as usize].clone(),
        None => record.label_text.clone(),
    }
}

/// Single-consumer batch stream over the shuffled plan; wraps to a freshly
/// shuffled epoch at the end. Caption draws come from a dedicated RNG stream
/// so they do not perturb the shuffle schedule.
pub struct BatchStream<'a> {
    datasets: &'a [Dataset],
    spec: MixSpec,
    plan: EpochPlan,
    epoch: u64,
    pos: usize,
    caption_rng: SplitMix64,
}

/// Offset decoupling the caption stream from the shuffle stream.
const CAPTION_STREAM_SALT: u64 = 0xc0de_cafe_f00d_beef;

impl<'a> BatchStream<'a> {
    pub fn new(datasets: &'a [Dataset], spec: &MixSpec) -> Result<Self, MixError> {
        let plan = build_epoch_plan(datasets, spec)?;
        if plan.is_empty() {
            return Err(MixError::EmptyMix);
        }
        Ok(Self {
            datasets,
            spec: spec.clone(),
            plan,
            epoch: 0,
            pos: 0,
            caption_rng: SplitMix64::new(spec.seed ^ CAPTION_STREAM_SALT),
        })
    }

    pub fn plan_len(&self) -> usize {
        self.plan.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Draws the next `batch_size` annotations, resolving each record's
    /// caption for this iteration.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<UnifiedAnnotation> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.pos >= self.plan.len() {
                self.epoch += 1;
                self.plan = build_epoch_plan_for_epoch(self.datasets, &self.spec, self.epoch)
                    .expect("plan was valid at construction");
                self.pos = 0;
            }
            let (ds, idx) = self.plan.items[self.pos];
            self.pos += 1;
            let mut ann = self.datasets[ds].annotations[idx].clone();
            for rec in &mut ann.records {
                rec.label_text = draw_caption(rec, &mut self.caption_rng);
            }
            batch.push(ann);
        }
        batch
    }
}
