// Anchor matching, the RPN loss and the similarity loss on one image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use detpretrain::detector::{rpn_forward, Binding, ModelPair, Side};
use detpretrain::losses::{det_loss, match_anchors, rpn_loss, total_loss, view_pyramids, AnchorLabel, MatchConfig};
use detpretrain::numerics::Graph;
use detpretrain::synth::{synth_image, SynthConfig};
use detpretrain::training::ModelPreset;
use detpretrain::views::{make_views, ViewConfig};

pub fn run_example() -> detpretrain::Result<()> {
    let pair = ModelPair::new(ModelPreset::Tiny.config(), 0)?;
    let sample = synth_image(2, &SynthConfig { size: 96, object_scale: (32.0, 60.0), ..Default::default() });
    let views = make_views(&sample.image, &sample.boxes, 5, &ViewConfig { size: 96, ..Default::default() })?;

    let mut g = Graph::new();
    let mut b = Binding::new();
    b.bind_side(&mut g, &pair.params, Side::Online, true);
    b.bind_side(&mut g, &pair.params, Side::Target, false);
    let vp = view_pyramids(&mut g, &b, &pair.config, &views)?;

    let rpn = rpn_forward(&mut g, &b, &pair.config, &vp.online[0])?;
    let gt: Vec<_> = views.boxes.iter().map(|v| v.v1).collect();
    let m = match_anchors(&rpn.anchors, &gt, &MatchConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} anchors: {} positive, {} negative", m.labels.len(), m.count(AnchorLabel::Positive), m.count(AnchorLabel::Negative));
    let l_rpn = rpn_loss(&mut g, rpn.logits, rpn.deltas, &m, 1.0)?;
    let l_det = det_loss(&mut g, &b, &pair.config, &vp, &views.boxes)?;
    let total = total_loss(&mut g, l_rpn.total, l_det.total)?;
    println!("rpn {:.4} (cls {:.4}, reg {:.4})", g.item(l_rpn.total), g.item(l_rpn.classification), g.item(l_rpn.regression));
    println!("det {:.4}, total {:.4}", g.item(l_det.total), g.item(total));

    let back = g.backward(total)?;
    let grads = b.gradients(&g, &back);
    println!("gradients for {} online tensors", grads.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
