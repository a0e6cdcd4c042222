//! Axis-aligned box algebra shared by proposals, anchors, ground truth and
//! detections.
//!
//! Boxes are stored in corner form `[x1, y1, x2, y2]` in pixel units. Pixel
//! `(i, j)` covers `[j, j+1) x [i, i+1)`, so a box tightly containing pixels
//! `x0..=x1` has `x2 = x1 + 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Canonical reference scale (pixels) for pyramid level assignment.
pub const LEVEL_REFERENCE_SCALE: f64 = 224.0;
/// Level a box of the reference scale is assigned to.
pub const LEVEL_REFERENCE: i32 = 4;
pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 5;

/// Axis-aligned rectangle with optional score and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: Option<f64>,
    pub class_id: Option<u32>,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates [{x1}, {y1}, {x2}, {y2}]")));
        }
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::InvalidBox(format!("empty extent [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2, score: None, class_id: None })
    }

    /// Builds a box from centre and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Square root of the area.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    /// Coordinates only, with score and class dropped.
    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
            score: None,
            class_id: None,
        }
    }

    /// Area of the overlap with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` when the clipped
    /// box is narrower or shorter than `min_side`.
    pub fn clip(&self, width: f64, height: f64, min_side: f64) -> Option<BBox> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        if x2 - x1 < min_side || y2 - y1 < min_side || !(x2 > x1 && y2 > y1) {
            return None;
        }
        Some(BBox { x1, y1, x2, y2, ..*self })
    }

    /// Applies `p -> (p - offset) * factor` to both axes.
    pub fn affine(&self, offset_x: f64, offset_y: f64, factor_x: f64, factor_y: f64) -> BBox {
        BBox {
            x1: (self.x1 - offset_x) * factor_x,
            y1: (self.y1 - offset_y) * factor_y,
            x2: (self.x2 - offset_x) * factor_x,
            y2: (self.y2 - offset_y) * factor_y,
            ..*self
        }
    }

    pub fn same_coords(&self, other: &BBox) -> bool {
        self.coords() == other.coords()
    }
}

impl fmt::Display for BBox {
    /// One-line form `x1 y1 x2 y2 [score] [class_id]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x1, self.y1, self.x2, self.y2)?;
        if let Some(s) = self.score {
            write!(f, " {s}")?;
        }
        if let Some(c) = self.class_id {
            if self.score.is_none() {
                // keep the class column position unambiguous
                write!(f, " 1")?;
            }
            write!(f, " {c}")?;
        }
        Ok(())
    }
}

impl FromStr for BBox {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=6).contains(&fields.len()) {
            return Err(Error::Parse(format!("expected 4 to 6 fields, got {}: {line:?}", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
        };
        let mut b = BBox::new(num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?)?;
        if let Some(s) = fields.get(4) {
            b.score = Some(num(s)?);
        }
        if let Some(c) = fields.get(5) {
            b.class_id = Some(c.parse::<u32>().map_err(|e| Error::Parse(format!("bad class id {c:?}: {e}")))?);
        }
        Ok(b)
    }
}

/// Parses the line-oriented box format, skipping blank lines and `#` comments.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.to_string());
        out.push('\n');
    }
    out
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target `(tx, ty, tw, th)` of `target` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = target.center();
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`], without clipping.
pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> Result<BBox> {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].exp();
    let h = ah * deltas[3].exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes and clips to `[0, width] x [0, height]`; `None` marks a rejected
/// box (non-finite, or a side shorter than one pixel after clipping).
pub fn decode_deltas_clipped(anchor: &BBox, deltas: [f64; 4], width: f64, height: f64) -> Option<BBox> {
    decode_deltas(anchor, deltas).ok()?.clip(width, height, 1.0)
}

/// Greedy non-maximum suppression. Boxes without a score rank as 0.
/// Output is in descending score order; equal scores keep input order.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i]).collect()
}

/// Indices (into `boxes`) kept by [`nms`], in output order.
pub fn nms_indices(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let order = descending_score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Stable ordering by descending score.
pub fn descending_score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = boxes[a].score.unwrap_or(0.0);
        let sb = boxes[b].score.unwrap_or(0.0);
        sb.total_cmp(&sa)
    });
    order
}

/// Aspect and relative-size filter for unsupervised proposals:
/// `1/3 <= w/h <= 3` and `0.3 <= sqrt(wh)/sqrt(WH) <= 0.8`, inclusive.
pub fn passes_proposal_filter(b: &BBox, image_w: f64, image_h: f64) -> bool {
    let aspect = b.width() / b.height();
    let rel = b.scale() / (image_w * image_h).sqrt();
    (1.0 / 3.0..=3.0).contains(&aspect) && (0.3..=0.8).contains(&rel)
}

pub fn filter_proposals(boxes: &[BBox], image_w: f64, image_h: f64) -> Vec<BBox> {
    boxes.iter().copied().filter(|b| passes_proposal_filter(b, image_w, image_h)).collect()
}

/// Pyramid level for a box: `clamp(floor(4 + log2(sqrt(wh) / 224)), 2, 5)`.
pub fn assign_fpn_level(b: &BBox) -> usize {
    let raw = (LEVEL_REFERENCE as f64 + (b.scale() / LEVEL_REFERENCE_SCALE).log2()).floor();
    raw.clamp(MIN_LEVEL as f64, MAX_LEVEL as f64) as usize
}

/// Anchor layout for a multi-level pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    /// Square root of the anchor area at each level.
    pub sizes: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            strides: vec![4, 8, 16, 32],
            sizes: vec![24.0, 48.0, 96.0, 192.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_position(&self) -> usize {
        self.ratios.len()
    }
}

/// Anchors tiled over every level of an `height x width` input.
///
/// Within a level, anchors are ordered by row, then column, then ratio, which
/// matches the `(ratio, row, col)` channel layout read back by the RPN.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub stride: usize,
    pub size: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    /// Generates anchors for the first `num_levels` levels of `config`.
    pub fn generate(config: &AnchorConfig, height: usize, width: usize, num_levels: usize) -> Result<Self> {
        if num_levels > config.strides.len() || config.sizes.len() < num_levels {
            return Err(Error::Config(format!(
                "{num_levels} levels requested but anchor config has {} strides and {} sizes",
                config.strides.len(),
                config.sizes.len()
            )));
        }
        let mut levels = Vec::with_capacity(num_levels);
        for l in 0..num_levels {
            let stride = config.strides[l];
            let size = config.sizes[l];
            if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
                return Err(Error::Config(format!("input {height}x{width} not divisible by stride {stride}")));
            }
            let (gh, gw) = (height / stride, width / stride);
            let mut boxes = Vec::with_capacity(gh * gw * config.ratios.len());
            for i in 0..gh {
                for j in 0..gw {
                    let cx = (j as f64 + 0.5) * stride as f64;
                    let cy = (i as f64 + 0.5) * stride as f64;
                    for &r in &config.ratios {
                        let w = size / r.sqrt();
                        let h = size * r.sqrt();
                        boxes.push(BBox::from_center(cx, cy, w, h)?);
                    }
                }
            }
            levels.push(LevelAnchors { stride, size, grid_h: gh, grid_w: gw, boxes });
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level by level.
    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter())
    }
}
