//! Side-by-side SVG panels of boxes over one image.
//!
//! Every box, ground truth included, is one `<rect>`; nothing else in the
//! document is a rect.

use std::fmt::Write as _;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub boxes: Vec<BBox>,
    /// Stroke colour for `boxes`.
    pub color: String,
}

const GAP: f64 = 16.0;
const TITLE: f64 = 20.0;
const GT_COLOR: &str = "#1a9641";

pub fn render_svg(width: u32, height: u32, gts: &[BBox], panels: &[Panel]) -> String {
    let (w, h) = (width as f64, height as f64);
    let n = panels.len().max(1) as f64;
    let total_w = n * w + (n + 1.0) * GAP;
    let total_h = h + TITLE + 2.0 * GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" viewBox="0 0 {total_w} {total_h}">"#
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = GAP + i as f64 * (w + GAP);
        let oy = GAP + TITLE;
        let _ = writeln!(s, r#"  <g class="panel" transform="translate({ox} {oy})">"#);
        let _ = writeln!(
            s,
            r#"    <text x="0" y="-6" font-family="sans-serif" font-size="13">{}</text>"#,
            escape(&p.title)
        );
        let _ = writeln!(
            s,
            r##"    <path class="frame" d="M0 0 H{w} V{h} H0 Z" fill="#f4f4f4" stroke="#888"/>"##
        );
        for b in &p.boxes {
            rect(&mut s, b, &p.color, "box", 1.0);
        }
        for g in gts {
            rect(&mut s, g, GT_COLOR, "gt", 2.0);
        }
        s.push_str("  </g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn rect(s: &mut String, b: &BBox, color: &str, class: &str, width: f64) {
    let _ = writeln!(
        s,
        r#"    <rect class="{class}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
        b.x1,
        b.y1,
        b.width(),
        b.height()
    );
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
