use super::{conv, Binding, ModelConfig, Side};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Tensor, Var};

/// Pyramid levels `p2, p3, ...` of one input.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// An image as a constant `(C, H, W)` graph leaf.
pub fn image_input(graph: &mut Graph, image: &Image) -> Result<Var> {
    let t = Tensor::new(vec![image.channels, image.height, image.width], image.to_chw())?;
    Ok(graph.constant(t))
}

/// Runs the first `num_levels` backbone stages and builds the pyramid with
/// 1x1 laterals and nearest-neighbour top-down addition.
///
/// Each stage is conv3x3, relu, conv3x3, relu, 2x2 max-pool; the first conv
/// of stage 1 has stride 2 so that `p2` sits at stride 4. The input extent
/// must be divisible by the coarsest stride `2^(num_levels + 1)`.
pub fn extract(graph: &mut Graph, b: &Binding, side: Side, cfg: &ModelConfig, image: Var, num_levels: usize) -> Result<FeaturePyramid> {
    let s = graph.shape(image).to_vec();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::InvalidShape { op: "extract", detail: format!("input {s:?}, expected {} channels", cfg.in_channels) });
    }
    if num_levels == 0 || num_levels > cfg.num_stages() {
        return Err(Error::Config(format!("{num_levels} pyramid levels requested, backbone has {}", cfg.num_stages())));
    }
    let coarsest = 1usize << (num_levels + 1);
    if !s[1].is_multiple_of(coarsest) || !s[2].is_multiple_of(coarsest) || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidShape {
            op: "extract",
            detail: format!("{}x{} input is not divisible by stride {coarsest}", s[1], s[2]),
        });
    }
    let side = side.prefix();
    let mut x = image;
    let mut laterals = Vec::with_capacity(num_levels);
    for stage in 1..=num_levels {
        let first_stride = if stage == 1 { 2 } else { 1 };
        x = conv(graph, b, &format!("{side}.f.stage{stage}.conv1"), x, first_stride, 1)?;
        x = graph.relu(x);
        x = conv(graph, b, &format!("{side}.f.stage{stage}.conv2"), x, 1, 1)?;
        x = graph.relu(x);
        x = graph.max_pool2d(x, 2, 2)?;
        laterals.push(conv(graph, b, &format!("{side}.f.lateral{}", stage + 1), x, 1, 0)?);
    }
    let mut levels = laterals.clone();
    for l in (0..num_levels - 1).rev() {
        let up = graph.upsample_nearest(levels[l + 1], 2)?;
        levels[l] = graph.add(laterals[l], up)?;
    }
    Ok(FeaturePyramid { levels, strides: (0..num_levels).map(|l| 1 << (l + 2)).collect(), height: s[1], width: s[2] })
}
