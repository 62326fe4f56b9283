//! Trains on synthetic scenes and compares the result with the hand-designed
//! anchors and the zero-regression baseline.
//!
//! cargo run --release --example train_desk -- [iterations]

use augrpn::commands::cmd_train;
use augrpn::config::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig {
        out_dir: std::env::temp_dir().join("augrpn_train_desk"),
        ..ExperimentConfig::default()
    };
    if let Some(n) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.iterations = n;
    }
    let out = cmd_train(&cfg)?;
    let d = &out.doc;
    let m = |k: &str| d.get(k).unwrap_or(f64::NAN);

    println!("loss curve (every 50th step):");
    for p in d.loss_curve.iter().step_by(50) {
        println!("  {:>4}  {:.4}", p.iteration, p.value);
    }
    println!("EM diagnostic:");
    for p in &d.em_curve {
        println!("  {:>4}  {:.4}", p.iteration, p.value);
    }
    println!(
        "mean best IoU   hand {:.4}  augmented {:.4}",
        m("anchors.hand.mean_best_iou"),
        m("anchors.augmented.mean_best_iou")
    );
    println!(
        "separability    hand {:.4}  augmented {:.4}",
        m("anchors.hand.auc"),
        m("anchors.augmented.auc")
    );
    println!(
        "AR@100          baseline {:.4}  refined {:.4}",
        m("baseline.ar100.ar"),
        m("eval.ar100.ar")
    );
    println!(
        "AR@1000         baseline {:.4}  refined {:.4}",
        m("baseline.ar1000.ar"),
        m("eval.ar1000.ar")
    );
    println!("checkpoint: {}", out.checkpoint.display());
    Ok(())
}
