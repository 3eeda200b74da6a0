//! Builds an epoch plan with the default joint-training upsampling profile
//! and verifies the exact per-dataset repetition counts.
//!
//! ```bash
//! cargo run --example mix_sampler
//! ```

use std::collections::BTreeMap;

use mqseg::datamix::{build_epoch_plan, BatchStream, MixSpec};
use mqseg::maskops::{rle_encode, BBox, BinaryMask};
use mqseg::unified_data::{from_instance, Dataset};

fn tiny_dataset(id: &str, images: usize) -> Dataset {
    let anns = (0..images)
        .map(|i| {
            let mask = BinaryMask::from_rect(4, 4, &BBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
            from_instance(
                &format!("{id}-{i:03}"),
                id,
                (4, 4),
                &[("object".into(), rle_encode(&mask))],
            )
            .unwrap()
        })
        .collect();
    Dataset::new(id, anns)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // stand-ins for the joint-training corpora, deliberately small
    let sizes: &[(&str, usize)] = &[
        ("coco", 10),
        ("ade20k", 2),
        ("lvis", 5),
        ("visual_genome", 3),
        ("objects365", 20),
        ("referring", 4),
        ("syn-coco", 10),
        ("syn-objects365", 20),
        ("foreground", 2),
    ];
    let datasets: Vec<Dataset> = sizes.iter().map(|&(id, n)| tiny_dataset(id, n)).collect();

    let spec = MixSpec::default_profile(7);
    let plan = build_epoch_plan(&datasets, &spec)?;

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &(ds, _) in &plan.items {
        *counts.entry(datasets[ds].dataset_id.as_str()).or_default() += 1;
    }
    println!("one epoch of the default profile ({} draws):", plan.len());
    println!("  {:<16} {:>6} {:>6} {:>8}", "dataset", "size", "ratio", "draws");
    for entry in &spec.entries {
        let size = sizes.iter().find(|(id, _)| *id == entry.dataset).unwrap().1;
        println!(
            "  {:<16} {:>6} {:>6} {:>8}",
            entry.dataset, size, entry.ratio, counts[entry.dataset.as_str()]
        );
        assert_eq!(counts[entry.dataset.as_str()], size * entry.ratio as usize);
    }

    // the stream wraps into freshly shuffled epochs; same spec, same stream
    let mut stream = BatchStream::new(&datasets, &spec)?;
    let batch = stream.next_batch(6);
    println!("\nfirst batch of the stream:");
    for ann in &batch {
        println!("  {:<16} {}", ann.dataset_id, ann.image_id);
    }
    Ok(())
}
