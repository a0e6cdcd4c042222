// Boxes, IoU, the anchor delta codec, NMS and the anchor layout.

use detpretrain::geometry::{decode_deltas, encode_deltas, filter_proposals, iou, nms, AnchorConfig, AnchorSet};
use detpretrain::BBox;

pub fn run_example() -> detpretrain::Result<()> {
    let a = BBox::new(10.0, 10.0, 60.0, 40.0)?;
    let b = BBox::new(20.0, 15.0, 70.0, 45.0)?;
    println!("iou(a, b) = {:.4}", iou(&a, &b));

    let t = encode_deltas(&a, &b);
    let back = decode_deltas(&a, t)?;
    println!("deltas {t:.4?} decode back to {:?}", back.coords());

    let scored = [a.with_score(0.9), b.with_score(0.8), BBox::new(100.0, 100.0, 150.0, 150.0)?.with_score(0.7)];
    for keep in nms(&scored, 0.5) {
        println!("nms keeps {:?} @ {:.1}", keep.coords(), keep.score.unwrap_or(0.0));
    }

    let candidates = [BBox::new(0.0, 0.0, 224.0, 224.0)?, BBox::new(10.0, 10.0, 110.0, 60.0)?];
    println!("{} of {} candidates pass the proposal filter", filter_proposals(&candidates, 224.0, 224.0).len(), candidates.len());

    let anchors = AnchorSet::generate(&AnchorConfig::default(), 224, 224, 4)?;
    for l in &anchors.levels {
        println!("stride {:2}: {}x{} grid, {} anchors of size {}", l.stride, l.grid_h, l.grid_w, l.boxes.len(), l.size);
    }
    println!("total {} anchors", anchors.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
