use super::{FeaturePyramid, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{assign_fpn_level, BBox};
use crate::numerics::{Graph, Var};

/// Pools `b` (input pixels) from a `(D, H, W)` map at `stride` into
/// `(D, out, out)`: each bin averages `samples x samples` bilinear samples.
///
/// Sample positions use the half-pixel convention: pixel `i` of the map
/// covers `[i, i + 1)` in map units, so a map-unit coordinate `u` sits at
/// lattice position `u - 0.5`.
pub fn roi_align(graph: &mut Graph, feature: Var, b: &BBox, stride: f64, out: usize, samples: usize) -> Result<Var> {
    if out == 0 || samples == 0 || !(stride > 0.0) {
        return Err(Error::Config(format!("roi_align with out {out}, samples {samples}, stride {stride}")));
    }
    let d = graph.shape(feature).first().copied().unwrap_or(0);
    let (x1, y1) = (b.x1 / stride, b.y1 / stride);
    let bin_w = b.width() / stride / out as f64;
    let bin_h = b.height() / stride / out as f64;
    let mut points = Vec::with_capacity(out * out * samples * samples);
    for by in 0..out {
        for bx in 0..out {
            for sy in 0..samples {
                for sx in 0..samples {
                    let y = y1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h - 0.5;
                    let x = x1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w - 0.5;
                    points.push((y, x));
                }
            }
        }
    }
    let sampled = graph.bilinear_sample(feature, &points)?;
    let pooled = graph.mean_groups(sampled, samples * samples)?;
    graph.reshape(pooled, &[d, out, out])
}

/// Index into `levels` of the pyramid level serving `b`, with the
/// scale-based level clamped to the levels present.
pub fn roi_level(b: &BBox, num_levels: usize) -> usize {
    assign_fpn_level(b).min(num_levels + 1).max(2) - 2
}

/// [`roi_align`] on the level chosen by [`roi_level`].
pub fn roi_align_pyramid(graph: &mut Graph, fp: &FeaturePyramid, b: &BBox, cfg: &ModelConfig) -> Result<Var> {
    let l = roi_level(b, fp.num_levels());
    roi_align(graph, fp.levels[l], b, fp.strides[l] as f64, cfg.roi_size, cfg.roi_samples)
}
