//! Training-core building blocks for unified, open-vocabulary image
//! segmentation at desk scale.
//!
//! The crate models five segmentation tasks (instance, semantic, panoptic,
//! foreground, referring) in one annotation format, matches ground truth to a
//! mixed pool of learnable and conditional object queries with exact Hungarian
//! assignment, evaluates the focal/GIoU+L1/dice set-prediction loss stack with
//! analytic gradients, trains a small deterministic encoder–decoder end to
//! end, mixes datasets with exact integer upsampling ratios, and scores
//! results with PQ, Mask AP, mIoU, and MSE.
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `mqseg` binary for file-based workflows (`convert`, `train-toy`, `predict`,
//! `eval`, `match-stats`, `sample`, `gradcheck`).

pub mod cli;
pub mod datamix;
pub mod losses;
pub mod maskops;
pub mod matching;
pub mod metrics;
pub mod rng;
pub mod semantics;
pub mod toymodel;
pub mod unified_data;
