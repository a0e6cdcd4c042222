//! Training objectives: anchor matching and sampling, the RPN loss, the
//! cross-view cosine similarity losses, and their sum.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;

use crate::detector::{extract, head_embed, image_input, roi_align_pyramid, Binding, FeaturePyramid, ModelConfig, Side};
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, AnchorSet, BBox};
use crate::numerics::{Graph, Tensor, Var};
use crate::views::{ViewBoxes, ViewTriple};

/// Probability clamp keeping the log loss finite.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    /// Positive when IoU exceeds this.
    pub fg_iou: f64,
    /// Negative when the best IoU is below this.
    pub bg_iou: f64,
    pub batch_size: usize,
    pub max_positives: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { fg_iou: 0.7, bg_iou: 0.3, batch_size: 256, max_positives: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct AnchorMatch {
    pub labels: Vec<AnchorLabel>,
    /// Regression target of each positive anchor.
    pub targets: Vec<Option<[f64; 4]>>,
    /// Anchors entering the loss, ascending.
    pub sampled: Vec<usize>,
    /// Regression normalizer: the number of anchor positions.
    pub num_positions: usize,
}

impl AnchorMatch {
    pub fn sampled_positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled.iter().copied().filter(|&i| self.labels[i] == AnchorLabel::Positive)
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Labels every anchor against pseudo ground truth and samples the
/// anchors that enter the loss.
///
/// Positive: IoU above `fg_iou` with any box, or the highest-IoU anchor (ties
/// included) of some box. Negative: best IoU below `bg_iou` and not positive.
/// A positive regresses towards its highest-IoU box.
pub fn match_anchors(anchors: &AnchorSet, gt: &[BBox], cfg: &MatchConfig, rng: &mut impl Rng) -> Result<AnchorMatch> {
    if gt.is_empty() {
        return Err(Error::Config("anchor matching needs at least one box".into()));
    }
    let all: Vec<&BBox> = anchors.iter().collect();
    let n = all.len();
    let mut best = vec![(0.0f64, 0usize); n];
    let mut gt_best = vec![0.0f64; gt.len()];
    let mut ious = vec![0.0; n * gt.len()];
    for (i, a) in all.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            ious[i * gt.len() + j] = v;
            if v > best[i].0 {
                best[i] = (v, j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, _)| {
            if v > cfg.fg_iou {
                AnchorLabel::Positive
            } else if v < cfg.bg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for i in 0..n {
        let row = &ious[i * gt.len()..(i + 1) * gt.len()];
        if row.iter().zip(&gt_best).any(|(&v, &m)| m > 0.0 && v == m) {
            labels[i] = AnchorLabel::Positive;
        }
    }
    let targets = (0..n)
        .map(|i| (labels[i] == AnchorLabel::Positive).then(|| encode_deltas(all[i], &gt[best[i].1])))
        .collect();

    let pick = |pool: Vec<usize>, k: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        if pool.len() <= k {
            pool
        } else {
            sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
        }
    };
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let mut sampled = pick(positives, cfg.max_positives.min(cfg.batch_size), rng);
    let remaining = cfg.batch_size - sampled.len();
    sampled.extend(pick(negatives, remaining, rng));
    sampled.sort_unstable();
    let per_position = anchors.levels.first().map_or(1, |l| l.boxes.len() / (l.grid_h * l.grid_w).max(1)).max(1);
    Ok(AnchorMatch { labels, targets, sampled, num_positions: n / per_position })
}

/// Scalar smooth-L1: quadratic below 1, linear above.
pub fn smooth_l1(x: f64) -> f64 {
    crate::numerics::graph::smooth_l1(x)
}

/// Parts of the RPN loss.
#[derive(Debug, Clone, Copy)]
pub struct RpnLoss {
    pub total: Var,
    pub classification: Var,
    pub regression: Var,
}

/// Mean binary log loss over the sampled anchors plus `lambda` times the
/// smooth-L1 regression summed over sampled positives, divided by the number
/// of anchor positions.
///
/// `logits` has one entry per anchor and `deltas` four per anchor.
pub fn rpn_loss(graph: &mut Graph, logits: Var, deltas: Var, m: &AnchorMatch, lambda: f64) -> Result<RpnLoss> {
    if m.sampled.is_empty() {
        return Err(Error::Config("no anchors sampled".into()));
    }
    let labels: Vec<f64> = m.sampled.iter().map(|&i| if m.labels[i] == AnchorLabel::Positive { 1.0 } else { 0.0 }).collect();
    let n_cls = labels.len() as f64;
    let picked = graph.gather(logits, &m.sampled)?;
    let p = graph.sigmoid(picked);
    let p = graph.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = graph.log(p);
    let neg_p = graph.scale(p, -1.0);
    let q = graph.add_scalar(neg_p, 1.0);
    let log_q = graph.log(q);
    let y = graph.constant(Tensor::vector(labels.clone()));
    let not_y = graph.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let pos_term = graph.mul(y, log_p)?;
    let neg_term = graph.mul(not_y, log_q)?;
    let ll = graph.add(pos_term, neg_term)?;
    let ll = graph.sum(ll);
    let classification = graph.scale(ll, -1.0 / n_cls);

    let positives: Vec<usize> = m.sampled_positives().collect();
    let regression = if positives.is_empty() {
        graph.constant(Tensor::scalar(0.0))
    } else {
        let idx: Vec<usize> = positives.iter().flat_map(|&i| (0..4).map(move |k| 4 * i + k)).collect();
        let t = graph.gather(deltas, &idx)?;
        let star: Vec<f64> = positives.iter().flat_map(|&i| m.targets[i].expect("positive has a target")).collect();
        let star = graph.constant(Tensor::vector(star));
        let diff = graph.sub(t, star)?;
        let sl = graph.smooth_l1(diff);
        let s = graph.sum(sl);
        graph.scale(s, lambda / m.num_positions.max(1) as f64)
    };
    let total = graph.add(classification, regression)?;
    Ok(RpnLoss { total, classification, regression })
}

/// Sum over rows of `-2 cos(online_i, target_i)`, targets gradient-stopped.
fn neg_cos_sum(graph: &mut Graph, online: Var, target: Var) -> Result<Var> {
    let t = graph.stop_gradient(target);
    let on = graph.l2_normalize(online)?;
    let tn = graph.l2_normalize(t)?;
    let prod = graph.mul(on, tn)?;
    let s = graph.sum(prod);
    Ok(graph.scale(s, -2.0))
}

fn zero(graph: &mut Graph) -> Var {
    graph.constant(Tensor::scalar(0.0))
}

/// `(1/K) Σ_i [-2 cos(v_i, t1_i) - 2 cos(v_i, t2_i)]` over `(K, E)` rows.
/// An empty batch contributes zero.
pub fn sim_loss(graph: &mut Graph, online: Var, target1: Var, target2: Var) -> Result<Var> {
    let k = graph.shape(online).first().copied().unwrap_or(0);
    if k == 0 {
        warn!("similarity loss over zero proposals");
        return Ok(zero(graph));
    }
    let a = neg_cos_sum(graph, online, target1)?;
    let b = neg_cos_sum(graph, online, target2)?;
    let s = graph.add(a, b)?;
    Ok(graph.scale(s, 1.0 / k as f64))
}

/// Pyramids of the three views on both networks; index 0, 1, 2 is V1, V2, V3.
#[derive(Debug, Clone)]
pub struct ViewPyramids {
    pub online: Vec<FeaturePyramid>,
    pub target: Vec<FeaturePyramid>,
}

/// Deepest pyramid the backbone can build on a square `size` input.
pub fn levels_for(size: usize, cfg: &ModelConfig) -> Result<usize> {
    (1..=cfg.num_stages())
        .rev()
        .find(|&l| size.is_multiple_of(1 << (l + 1)))
        .ok_or_else(|| Error::InvalidShape { op: "extract", detail: format!("view size {size} is not divisible by 4") })
}

/// Runs both backbones over all three views.
pub fn view_pyramids(graph: &mut Graph, b: &Binding, cfg: &ModelConfig, views: &ViewTriple) -> Result<ViewPyramids> {
    let mut out = ViewPyramids { online: Vec::new(), target: Vec::new() };
    for img in [&views.v1, &views.v2, &views.v3] {
        let x = image_input(graph, img)?;
        let levels = levels_for(img.height.min(img.width), cfg)?;
        out.online.push(extract(graph, b, Side::Online, cfg, x, levels)?);
        out.target.push(extract(graph, b, Side::Target, cfg, x, levels)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct DetLoss {
    pub total: Var,
    pub sim: Var,
    pub sim_bar: Var,
    pub k_effective: usize,
}

/// `L_sim + L̄_sim`: V1 online against V2, V3 target, plus V2, V3 online
/// against V1 target. Proposals without a box in every view are skipped.
pub fn det_loss(graph: &mut Graph, b: &Binding, cfg: &ModelConfig, views: &ViewPyramids, boxes: &[ViewBoxes]) -> Result<DetLoss> {
    let valid: Vec<[BBox; 3]> = boxes
        .iter()
        .filter_map(|vb| Some([vb.v1, vb.v2?, vb.v3?]))
        .collect();
    if valid.is_empty() {
        warn!("no proposal is visible in all three views");
        let z = zero(graph);
        return Ok(DetLoss { total: z, sim: z, sim_bar: z, k_effective: 0 });
    }
    let embed = |graph: &mut Graph, side: Side, view: usize| -> Result<Var> {
        let fp = match side {
            Side::Online => &views.online[view],
            Side::Target => &views.target[view],
        };
        let pooled = valid.iter().map(|bx| roi_align_pyramid(graph, fp, &bx[view], cfg)).collect::<Result<Vec<_>>>()?;
        head_embed(graph, b, side, cfg, &pooled, side == Side::Online)
    };
    let on1 = embed(graph, Side::Online, 0)?;
    let tg2 = embed(graph, Side::Target, 1)?;
    let tg3 = embed(graph, Side::Target, 2)?;
    let sim = sim_loss(graph, on1, tg2, tg3)?;

    let tg1 = embed(graph, Side::Target, 0)?;
    let on2 = embed(graph, Side::Online, 1)?;
    let on3 = embed(graph, Side::Online, 2)?;
    let a = neg_cos_sum(graph, on2, tg1)?;
    let c = neg_cos_sum(graph, on3, tg1)?;
    let s = graph.add(a, c)?;
    let sim_bar = graph.scale(s, 1.0 / valid.len() as f64);

    let total = graph.add(sim, sim_bar)?;
    Ok(DetLoss { total, sim, sim_bar, k_effective: valid.len() })
}

/// `L = L_RPN + L_det`.
pub fn total_loss(graph: &mut Graph, rpn: Var, det: Var) -> Result<Var> {
    graph.add(rpn, det)
}

#[cfg(test)]
mod tests;
