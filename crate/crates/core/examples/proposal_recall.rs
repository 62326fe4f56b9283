//! Average recall bookkeeping on a hand-made image.
//!
//! cargo run --example proposal_recall

use augrpn::geometry::BBox;
use augrpn::metrics::average_recall;

fn main() {
    let gts = [
        BBox::from_xywh(10.0, 10.0, 20.0, 20.0),
        BBox::from_xywh(60.0, 20.0, 50.0, 40.0),
        BBox::from_xywh(20.0, 80.0, 120.0, 100.0),
    ];
    // best first: a loose hit on the large box, a tight one on the medium box,
    // a near miss on the small box
    let proposals = [
        BBox::from_xywh(25.0, 85.0, 120.0, 100.0),
        BBox::from_xywh(61.0, 21.0, 50.0, 40.0),
        BBox::from_xywh(14.0, 14.0, 20.0, 20.0),
        BBox::from_xywh(150.0, 150.0, 30.0, 30.0),
    ];
    for k in [1, 2, 4] {
        let r = average_recall(&proposals, &gts, k);
        println!(
            "top {k}: AR {:.3}  small {:?}  medium {:?}  large {:?}",
            r.ar.unwrap_or(0.0),
            r.ar_small,
            r.ar_medium,
            r.ar_large
        );
        let per: Vec<String> = r
            .recalls
            .iter()
            .map(|t| format!("{:.2}:{:.2}", t.iou, t.recall.unwrap_or(0.0)))
            .collect();
        println!("        {}", per.join(" "));
    }
}
