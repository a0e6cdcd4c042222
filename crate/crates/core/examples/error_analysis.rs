// Average precision and stratified error attribution on hand-made detections.

use detpretrain::evaluation::{average_precision, stratify_errors, StratifyConfig};
use detpretrain::BBox;

pub fn run_example() -> detpretrain::Result<()> {
    let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)?.with_class(0), BBox::new(20.0, 0.0, 30.0, 10.0)?.with_class(1)]];
    let dets = vec![vec![
        BBox::new(0.0, 0.0, 10.0, 10.0)?.with_class(0).with_score(0.9),
        // a near miss: IoU 0.4 with the class-1 object
        BBox::new(20.0, 0.0, 24.0, 10.0)?.with_class(1).with_score(0.8),
        BBox::new(0.0, 0.0, 10.0, 10.0)?.with_class(0).with_score(0.7),
        BBox::new(50.0, 50.0, 60.0, 60.0)?.with_class(0).with_score(0.6),
    ]];
    println!("mAP50 {:.4}", average_precision(&dets, &gt, 0.5)?);
    let report = stratify_errors(&dets, &gt, &StratifyConfig::default())?;
    print!("{}", report.to_table());
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
