//! Writes an SVG of one synthetic scene: grid anchors, augmented anchors and
//! final proposals of briefly trained heads.
//!
//! cargo run --release --example render_scene -- [out.svg]

use augrpn::commands::{cmd_train, eval_scenes, render_scene};
use augrpn::config::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "scene.svg".into());
    let mut cfg = ExperimentConfig {
        out_dir: std::env::temp_dir().join("augrpn_render_scene"),
        ..ExperimentConfig::default()
    };
    cfg.iterations = 150;
    cfg.train_scenes = 16;
    cfg.eval_scenes = 4;
    cfg.diag_scenes = 2;
    let heads = cmd_train(&cfg)?.heads;
    let scene = &eval_scenes(&cfg)[0];
    std::fs::write(&target, render_scene(scene, &heads, &cfg)?)?;
    println!(
        "{} ground-truth boxes drawn to {target}",
        scene.gt_boxes().len()
    );
    Ok(())
}
