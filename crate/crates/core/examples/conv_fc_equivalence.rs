//! The dense head and the per-box head agree on grid anchors, and the
//! analytic gradients match finite differences.
//!
//! cargo run --release --example conv_fc_equivalence -- [instances]

use augrpn::verify::{run_verify, VerifyOptions, EQUIVALENCE_TOL, GRADIENT_TOL};

fn main() {
    let instances = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(100);
    for corrupt_layout in [false, true] {
        let report = run_verify(&VerifyOptions {
            seed: 1,
            instances,
            corrupt_layout,
        })
        .expect("well-formed instances");
        let e = &report.equivalence;
        println!(
            "{}: {} instances, {} cells ({} border), max |conv - fc| = {:.3e} (tolerance {EQUIVALENCE_TOL:e})",
            if corrupt_layout { "scrambled taps" } else { "matching layout" },
            e.instances,
            e.cells,
            e.border_cells,
            e.max_abs_error
        );
        if !corrupt_layout {
            for g in &report.gradients {
                println!(
                    "  {:<14} {:>3} probes, max relative error {:.2e}",
                    g.name, g.checked, g.max_rel_error
                );
            }
            println!("  gradient tolerance {GRADIENT_TOL:e}");
        }
        println!("  passed: {}", report.passed());
    }
}
