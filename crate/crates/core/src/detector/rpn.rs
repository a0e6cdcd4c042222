use super::{conv, extract, image_input, Binding, FeaturePyramid, ModelConfig, ModelPair, Side};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::levels_for;
use crate::geometry::{decode_deltas_clipped, nms_indices, AnchorSet, BBox};
use crate::numerics::graph::sigmoid;
use crate::numerics::{Graph, Var};

/// Log-scale delta clamp applied before decoding, as in Faster R-CNN.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// RPN outputs flattened into anchor order.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// Objectness logits, shape `(N)`.
    pub logits: Var,
    /// Deltas, shape `(4N)`, four consecutive entries per anchor.
    pub deltas: Var,
    pub anchors: AnchorSet,
    /// Per-level `(logits (A, H, W), deltas (4A, H, W))` before flattening.
    pub per_level: Vec<(Var, Var)>,
}

/// Shared 3x3 conv with relu, then 1x1 objectness and delta heads on every
/// pyramid level of the online side.
pub fn rpn_forward(graph: &mut Graph, b: &Binding, cfg: &ModelConfig, fp: &FeaturePyramid) -> Result<RpnOutput> {
    let anchors = AnchorSet::generate(&cfg.anchors, fp.height, fp.width, fp.num_levels())?;
    let a = cfg.anchors_per_position();
    let mut flat_logits = Vec::with_capacity(fp.num_levels());
    let mut flat_deltas = Vec::with_capacity(fp.num_levels());
    let mut per_level = Vec::with_capacity(fp.num_levels());
    for (&feat, level) in fp.levels.iter().zip(&anchors.levels) {
        let t = conv(graph, b, "online.rpn.conv", feat, 1, 1)?;
        let t = graph.relu(t);
        let logits = conv(graph, b, "online.rpn.obj", t, 1, 0)?;
        let deltas = conv(graph, b, "online.rpn.delta", t, 1, 0)?;
        let (h, w) = (level.grid_h, level.grid_w);
        if graph.shape(logits) != [a, h, w] {
            return Err(Error::ShapeMismatch { op: "rpn_forward", lhs: graph.shape(logits).to_vec(), rhs: vec![a, h, w] });
        }
        let hw = h * w;
        let mut li = Vec::with_capacity(a * hw);
        let mut di = Vec::with_capacity(4 * a * hw);
        for pos in 0..hw {
            for r in 0..a {
                li.push(r * hw + pos);
                di.extend((0..4).map(|k| (r * 4 + k) * hw + pos));
            }
        }
        flat_logits.push(graph.gather(logits, &li)?);
        flat_deltas.push(graph.gather(deltas, &di)?);
        per_level.push((logits, deltas));
    }
    let logits = graph.concat_rows(&flat_logits)?;
    let deltas = graph.concat_rows(&flat_deltas)?;
    Ok(RpnOutput { logits, deltas, anchors, per_level })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposeOptions {
    pub pre_nms_top: usize,
    pub nms_threshold: f64,
    pub k: usize,
}

impl Default for ProposeOptions {
    fn default() -> Self {
        Self { pre_nms_top: 64, nms_threshold: 0.7, k: 4 }
    }
}

/// Decode, clip, drop degenerate boxes, keep the `pre_nms_top` highest
/// logits (ties in anchor order), suppress, keep the first `k`.
/// Scores are objectness probabilities.
pub fn propose_from_outputs(
    anchors: &AnchorSet,
    logits: &[f64],
    deltas: &[f64],
    height: usize,
    width: usize,
    opts: &ProposeOptions,
) -> Result<Vec<BBox>> {
    let n = anchors.len();
    if logits.len() != n || deltas.len() != 4 * n {
        return Err(Error::ShapeMismatch { op: "rpn_propose", lhs: vec![logits.len(), deltas.len()], rhs: vec![n, 4 * n] });
    }
    let mut candidates: Vec<(f64, BBox)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, anchor)| {
            let d = &deltas[4 * i..4 * i + 4];
            let d = [d[0], d[1], d[2].min(MAX_LOG_SCALE), d[3].min(MAX_LOG_SCALE)];
            let b = decode_deltas_clipped(anchor, d, width as f64, height as f64)?;
            logits[i].is_finite().then(|| (logits[i], b.with_score(sigmoid(logits[i]))))
        })
        .collect();
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0));
    candidates.truncate(opts.pre_nms_top);
    // Probabilities can saturate to equal values for distinct logits, so NMS
    // ranks by position in the logit order instead.
    let ranked: Vec<BBox> = candidates.iter().enumerate().map(|(r, c)| c.1.with_score(-(r as f64))).collect();
    let kept = nms_indices(&ranked, opts.nms_threshold);
    Ok(kept.into_iter().take(opts.k).map(|i| candidates[i].1).collect())
}

/// Proposals from an evaluated [`RpnOutput`].
pub fn rpn_propose(graph: &Graph, out: &RpnOutput, fp: &FeaturePyramid, opts: &ProposeOptions) -> Result<Vec<BBox>> {
    propose_from_outputs(&out.anchors, graph.data(out.logits), graph.data(out.deltas), fp.height, fp.width, opts)
}

/// RPN proposals of the online network for a whole image.
pub fn propose_image(pair: &ModelPair, image: &Image, opts: &ProposeOptions) -> Result<Vec<BBox>> {
    let mut g = Graph::inference();
    let mut b = Binding::new();
    b.bind_side(&mut g, &pair.params, Side::Online, false);
    let levels = levels_for(image.height.min(image.width), &pair.config)?;
    let x = image_input(&mut g, image)?;
    let fp = extract(&mut g, &b, Side::Online, &pair.config, x, levels)?;
    let out = rpn_forward(&mut g, &b, &pair.config, &fp)?;
    rpn_propose(&g, &out, &fp, opts)
}
