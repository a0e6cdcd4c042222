// End to end on disk: synthetic corpus, cached proposals, a short joint
// pre-training run and evaluation of the resulting RPN.

use detpretrain::commands::{cmd_evaluate, cmd_pretrain, cmd_propose, cmd_synth, EvalOptions};
use detpretrain::segmentation::SegmentationParams;
use detpretrain::training::{ModelPreset, TrainConfig};

pub fn run_example() -> detpretrain::Result<()> {
    let dir = tempfile::tempdir().map_err(|source| detpretrain::Error::Io { path: std::env::temp_dir(), source })?;
    let root = dir.path();
    println!("synth: {}", cmd_synth(6, &root.join("corpus"), 0)?);
    println!("propose: {}", cmd_propose(&root.join("corpus"), &root.join("cache"), &SegmentationParams::default())?);

    let cfg = TrainConfig {
        model: ModelPreset::Tiny,
        view_size: 96,
        steps: 4,
        batch_size: 2,
        base_lr: 0.01,
        corpus: root.join("corpus"),
        proposal_cache: root.join("cache"),
        checkpoint: root.join("model.ckpt"),
        ..Default::default()
    };
    let report = cmd_pretrain(&cfg)?;
    for line in &report.log {
        println!("step {line}");
    }
    let eval = cmd_evaluate(&report.checkpoint, &root.join("corpus"), &EvalOptions::default())?;
    print!("{eval}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
