// Unsupervised proposals on a synthetic image, scored against its annotations.

use detpretrain::evaluation::proposal_recall;
use detpretrain::segmentation::{felzenszwalb_segment, propose, SegmentationParams};
use detpretrain::synth::{synth_image, SynthConfig};

pub fn run_example() -> detpretrain::Result<()> {
    let sample = synth_image(7, &SynthConfig::default());
    let params = SegmentationParams::default();
    let seg = felzenszwalb_segment(&sample.image, &params)?;
    println!("{} initial regions", seg.regions.len());

    let proposals = propose(&sample.image, &params)?;
    println!("{} proposals after merging and filtering", proposals.len());
    for p in proposals.iter().take(5) {
        println!("  {:?}", p.coords());
    }
    println!("{} annotated objects, recall@0.5 {:.2}", sample.boxes.len(), proposal_recall(&proposals, &sample.boxes, 0.5));
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
