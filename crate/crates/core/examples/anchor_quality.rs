//! Hand-designed anchor statistics for a COCO-style annotation file.
//!
//! cargo run --example anchor_quality -- [annotations.json]

use std::path::PathBuf;

use augrpn::coco::load_annotations;
use augrpn::commands::anchor_stats;
use augrpn::config::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_images.json")
        });
    let set = load_annotations(&path)?;
    println!(
        "{}: {} images, {} annotations, {} dropped",
        path.display(),
        set.images.len(),
        set.num_annotations(),
        set.dropped
    );
    let cfg = ExperimentConfig::default();
    let doc = anchor_stats(&set, &cfg)?;
    println!(
        "{:>3} {:>6} {:>14} {:>8}",
        "d", "stride", "mean best IoU", "AUC"
    );
    for &d in &cfg.pipeline.dilations {
        for &s in &cfg.scene.strides {
            let k = |f: &str| {
                doc.get(&format!("anchors.d{d}.s{s}.{f}"))
                    .unwrap_or(f64::NAN)
            };
            println!(
                "{d:>3} {s:>6} {:>14.4} {:>8.4}",
                k("mean_best_iou"),
                k("auc")
            );
        }
    }
    Ok(())
}
