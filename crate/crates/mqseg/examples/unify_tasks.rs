//! Converts annotations from all five segmentation tasks into the unified
//! per-segment format and round-trips them through the JSONL interface.
//!
//! ```bash
//! cargo run --example unify_tasks
//! ```

use mqseg::maskops::{rle_encode, BBox, BinaryMask, Rle};
use mqseg::unified_data::{
    from_foreground, from_instance, from_panoptic, from_referring, from_semantic, read_jsonl,
    write_jsonl, LabelMap, ThingStuff,
};

fn rect(img: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Rle {
    let b = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
    rle_encode(&BinaryMask::from_rect(img, img, &b))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let img = 8;

    let instance = from_instance(
        "kitchen-01",
        "demo",
        (img, img),
        &[
            ("mug".into(), rect(img, 1, 1, 4, 3)),
            ("mug".into(), rect(img, 5, 5, 8, 8)),
        ],
    )?;

    let labels: Vec<String> = (0..img * img)
        .map(|i| if i / img < 3 { "sky".to_string() } else { "road".to_string() })
        .collect();
    let semantic = from_semantic(
        "street-17",
        "demo",
        &LabelMap::new(img, img, labels)?,
        "ignore",
    )?;

    let panoptic = from_panoptic(
        "park-08",
        "demo",
        (img, img),
        &[
            ("person".into(), rect(img, 0, 0, 4, 2), ThingStuff::Thing),
            ("grass".into(), rect(img, 5, 0, 8, 8), ThingStuff::Stuff),
        ],
    )?;

    let foreground = from_foreground("poster-03", "demo", (img, img), &rect(img, 2, 2, 6, 6))?;

    let referring = from_referring(
        "cafe-11",
        "demo",
        (img, img),
        &[("a person wearing a red shirt".into(), rect(img, 1, 3, 6, 6))],
    )?;

    let all = vec![instance, semantic, panoptic, foreground, referring];
    for ann in &all {
        println!(
            "{:<10} task={:<10} records={}",
            ann.image_id,
            format!("{:?}", ann.task).to_lowercase(),
            ann.records.len()
        );
        for rec in &ann.records {
            println!(
                "           {:<30} bbox=({}, {}, {}, {}) area={}",
                format!("{:?}", rec.label_text),
                rec.bbox.x_min,
                rec.bbox.y_min,
                rec.bbox.x_max,
                rec.bbox.y_max,
                rec.decode_mask()?.area()
            );
        }
    }

    let dir = std::env::temp_dir().join("mqseg-unify-tasks");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("unified.jsonl");
    write_jsonl(&path, &all)?;
    let back = read_jsonl(&path, false)?;
    println!(
        "\nwrote {} annotations to {} and re-read them losslessly: {}",
        all.len(),
        path.display(),
        back == all
    );
    Ok(())
}
