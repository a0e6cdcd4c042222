// Builds the three augmented views of an image and follows boxes through them.

use detpretrain::synth::{synth_image, SynthConfig};
use detpretrain::views::{make_views, ViewConfig};

pub fn run_example() -> detpretrain::Result<()> {
    let sample = synth_image(3, &SynthConfig::default());
    let views = make_views(&sample.image, &sample.boxes, 42, &ViewConfig::default())?;
    println!("V1 {}x{}, V2 {}x{}, V3 {}x{}", views.v1.width, views.v1.height, views.v2.width, views.v2.height, views.v3.width, views.v3.height);
    println!("crop at ({:.1}, {:.1}) side {:.1}", views.crop.x1, views.crop.y1, views.crop.side);
    for vb in &views.boxes {
        match (vb.v2, vb.v3) {
            (Some(v2), Some(v3)) => println!("{:?} -> {:?} -> {:?}", vb.v1.coords(), v2.coords(), v3.coords()),
            _ => println!("{:?} is mostly cropped out of V2", vb.v1.coords()),
        }
    }
    println!("{} of {} boxes visible in every view", views.valid_count(), views.boxes.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
