// Runs the region proposal network of a freshly initialized model.

use detpretrain::detector::{propose_image, ModelPair, ProposeOptions};
use detpretrain::synth::{synth_image, SynthConfig};
use detpretrain::training::ModelPreset;

pub fn run_example() -> detpretrain::Result<()> {
    let pair = ModelPair::new(ModelPreset::Tiny.config(), 0)?;
    println!("{} parameters", pair.params.numel());
    let sample = synth_image(1, &SynthConfig { size: 96, object_scale: (32.0, 60.0), ..Default::default() });
    let proposals = propose_image(&pair, &sample.image, &ProposeOptions { k: 6, ..Default::default() })?;
    for p in &proposals {
        println!("{:?} objectness {:.4}", p.coords(), p.score.unwrap_or(0.0));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
