//! Anchor shapes implied by kernel size, dilation and stride.
//!
//! cargo run --example anchor_geometry

use augrpn::geometry::{anchor_aspect_ratio, anchor_scale, generate_anchor_grid, AnchorSpec};

fn main() {
    println!(
        "{:>7} {:>3} {:>6} {:>8} {:>6} {:>14}",
        "kernel", "d", "stride", "scale", "ratio", "pixels (w x h)"
    );
    for (m, n) in [(3, 3), (3, 5), (5, 3)] {
        for d in [1, 2, 4] {
            for s in [8, 32] {
                let spec = AnchorSpec::new(m, n, d, s).expect("positive spec");
                println!(
                    "{:>7} {d:>3} {s:>6} {:>8.3} {:>6.3} {:>8} x {:<5}",
                    format!("{m}x{n}"),
                    anchor_scale(&spec),
                    anchor_aspect_ratio(&spec),
                    spec.width_px(),
                    spec.height_px()
                );
            }
        }
    }

    let spec = AnchorSpec::new(3, 3, 2, 16).expect("positive spec");
    println!("\nfirst anchors of a 3x3, d=2 grid on a stride-16 map:");
    for a in generate_anchor_grid(&spec, 0, 2, 2) {
        let b = a.bbox;
        println!(
            "  cell ({}, {}): ({:.1}, {:.1}, {:.1}, {:.1})",
            a.cell_row, a.cell_col, b.x1, b.y1, b.x2, b.y2
        );
    }
}
