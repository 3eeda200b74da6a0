//! Attaches synthetic caption pools to annotations and shows the
//! per-iteration caption draw: each training pass over a record sees one
//! caption selected uniformly from its pool.
//!
//! ```bash
//! cargo run --example synthetic_captions
//! ```

use std::collections::BTreeMap;

use mqseg::datamix::{BatchStream, MixEntry, MixSpec};
use mqseg::maskops::{rle_encode, BBox, BinaryMask};
use mqseg::unified_data::{attach_synthetic_captions, from_instance, Dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mask = BinaryMask::from_rect(8, 8, &BBox::new(1.0, 1.0, 6.0, 5.0).unwrap());
    let ann = from_instance(
        "street-42",
        "syn-demo",
        (8, 8),
        &[("car".into(), rle_encode(&mask))],
    )?;

    // five synthetic captions for record 0; the original label stays as the
    // fallback
    let pool: Vec<String> = [
        "a red hatchback parked at the curb",
        "small car in front of a shop",
        "a parked vehicle seen from the side",
        "red car with an open window",
        "a hatchback on a narrow street",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let ann = attach_synthetic_captions(ann, &BTreeMap::from([(0usize, pool.clone())]))?;
    println!("record label: {:?}", ann.records[0].label_text);
    println!("caption pool ({}):", pool.len());
    for caption in &pool {
        println!("  - {caption}");
    }

    // drawing through the batch stream resolves one caption per iteration
    let datasets = vec![Dataset::new("syn-demo", vec![ann])];
    let spec = MixSpec {
        seed: 21,
        entries: vec![MixEntry { dataset: "syn-demo".into(), ratio: 1 }],
    };
    let mut stream = BatchStream::new(&datasets, &spec)?;
    println!("\nfirst 8 training iterations see:");
    let mut frequencies: BTreeMap<String, usize> = BTreeMap::new();
    for step in 0..8 {
        let batch = stream.next_batch(1);
        println!("  step {step}: {:?}", batch[0].records[0].label_text);
    }
    for _ in 0..5000 {
        let batch = stream.next_batch(1);
        *frequencies.entry(batch[0].records[0].label_text.clone()).or_default() += 1;
    }
    println!("\nfrequencies over 5000 further draws (uniform at 1000 each):");
    for (caption, count) in &frequencies {
        println!("  {count:>5}  {caption}");
    }
    Ok(())
}
