//! Unsupervised region proposals: graph-based segmentation followed by
//! hierarchical grouping of adjacent regions by colour and texture similarity.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::geometry::{filter_proposals, BBox};
use crate::image::Image;

pub const COLOUR_BINS: usize = 25;
pub const TEXTURE_BINS: usize = 8;

/// Parameters of the graph-based segmentation.
///
/// `scale` is expressed in 8-bit intensity units, so the merge threshold on
/// [0, 1] colour distances is `scale / 255 / |C|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationParams {
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self { scale: 500.0, sigma: 0.9, min_size: 10 }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.min_size < 1 {
            return Err(Error::Config("min_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-region statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub pixel_count: usize,
    pub bbox: BBox,
    pub mean_colour: Vec<f64>,
    /// `COLOUR_BINS` bins per channel, L1-normalized over all channels.
    pub colour_hist: Vec<f64>,
    /// `TEXTURE_BINS` gradient-orientation bins per channel, L1-normalized
    /// (all zeros for a perfectly flat region).
    pub texture_hist: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    /// Row-major label per pixel, contiguous in `0..regions.len()`.
    pub labels: Vec<usize>,
    pub regions: Vec<Region>,
}

impl Segmentation {
    /// Builds the region table from a label map whose labels are contiguous
    /// in `0..num_labels`.
    pub fn from_labels(image: &Image, labels: Vec<usize>) -> Result<Self> {
        let (h, w, ch) = (image.height, image.width, image.channels);
        if labels.len() != h * w {
            return Err(Error::InvalidShape { op: "segmentation", detail: format!("{} labels for {h}x{w} image", labels.len()) });
        }
        let num = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; num];
        let mut extents = vec![(usize::MAX, usize::MAX, 0usize, 0usize); num];
        let mut sums = vec![vec![0.0; ch]; num];
        let mut colour = vec![vec![0.0; COLOUR_BINS * ch]; num];
        let mut texture = vec![vec![0.0; TEXTURE_BINS * ch]; num];
        for y in 0..h {
            for x in 0..w {
                let r = labels[y * w + x];
                counts[r] += 1;
                let e = &mut extents[r];
                e.0 = e.0.min(x);
                e.1 = e.1.min(y);
                e.2 = e.2.max(x);
                e.3 = e.3.max(y);
                for c in 0..ch {
                    let v = image.get(y, x, c);
                    sums[r][c] += v;
                    let bin = ((v.clamp(0.0, 1.0) * COLOUR_BINS as f64) as usize).min(COLOUR_BINS - 1);
                    colour[r][c * COLOUR_BINS + bin] += 1.0;
                    let (gx, gy) = gradient(image, y, x, c);
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                        let bin = ((angle / std::f64::consts::TAU * TEXTURE_BINS as f64) as usize).min(TEXTURE_BINS - 1);
                        texture[r][c * TEXTURE_BINS + bin] += mag;
                    }
                }
            }
        }
        if counts.contains(&0) {
            return Err(Error::InvalidShape { op: "segmentation", detail: "labels are not contiguous".into() });
        }
        let regions = (0..num)
            .map(|r| {
                let (x0, y0, x1, y1) = extents[r];
                Ok(Region {
                    pixel_count: counts[r],
                    bbox: BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)?,
                    mean_colour: sums[r].iter().map(|s| s / counts[r] as f64).collect(),
                    colour_hist: l1_normalize(std::mem::take(&mut colour[r])),
                    texture_hist: l1_normalize(std::mem::take(&mut texture[r])),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height: h, width: w, labels, regions })
    }

    /// Pairs of labels sharing a 4-neighbour pixel edge, as `(lo, hi)`.
    pub fn adjacency(&self) -> BTreeSet<(usize, usize)> {
        let mut pairs = BTreeSet::new();
        let w = self.width;
        for y in 0..self.height {
            for x in 0..w {
                let a = self.labels[y * w + x];
                if x + 1 < w {
                    let b = self.labels[y * w + x + 1];
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if y + 1 < self.height {
                    let b = self.labels[(y + 1) * w + x];
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs
    }
}

fn gradient(image: &Image, y: usize, x: usize, c: usize) -> (f64, f64) {
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(image.width - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(image.height - 1);
    let gx = (image.get(y, xr, c) - image.get(y, xl, c)) / (xr - xl).max(1) as f64;
    let gy = (image.get(yd, x, c) - image.get(yu, x, c)) / (yd - yu).max(1) as f64;
    (gx, gy)
}

fn l1_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

/// Disjoint-set forest carrying the internal difference of each component.
struct Components {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl Components {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn join(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight.max(self.internal[big]).max(self.internal[small]);
    }
}

/// Graph-based segmentation on the 4-connected pixel grid with Euclidean
/// colour distance as edge weight.
pub fn felzenszwalb_segment(image: &Image, params: &SegmentationParams) -> Result<Segmentation> {
    params.validate()?;
    let (h, w) = (image.height, image.width);
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape { op: "felzenszwalb_segment", detail: format!("image {h}x{w} smaller than 2x2") });
    }
    let smooth = image.gaussian_blur(params.sigma);
    let dist = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (&smooth.data[a * image.channels..(a + 1) * image.channels], &smooth.data[b * image.channels..(b + 1) * image.channels]);
        pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut edges = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((dist(p, p + 1), p, p + 1));
            }
            if y + 1 < h {
                edges.push((dist(p, p + w), p, p + w));
            }
        }
    }
    // stable: equal weights keep scan order
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let k = params.scale / 255.0;
    let mut comps = Components::new(h * w);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (comps.find(a), comps.find(b));
        if ra == rb {
            continue;
        }
        let ta = comps.internal[ra] + k / comps.size[ra] as f64;
        let tb = comps.internal[rb] + k / comps.size[rb] as f64;
        if weight <= ta.min(tb) {
            comps.join(ra, rb, weight);
        }
    }
    // absorb undersized components into their cheapest neighbour
    for &(weight, a, b) in &edges {
        let (ra, rb) = (comps.find(a), comps.find(b));
        if ra != rb && (comps.size[ra] < params.min_size || comps.size[rb] < params.min_size) {
            comps.join(ra, rb, weight);
        }
    }

    let mut relabel = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut labels = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let root = comps.find(p);
        if relabel[root] == usize::MAX {
            relabel[root] = next;
            next += 1;
        }
        labels.push(relabel[root]);
    }
    Segmentation::from_labels(image, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Similarity(f64);

impl Eq for Similarity {}

impl PartialOrd for Similarity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Similarity {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Colour plus texture histogram intersection, each in [0, 1].
pub fn region_similarity(a: &Region, b: &Region) -> f64 {
    histogram_intersection(&a.colour_hist, &b.colour_hist) + histogram_intersection(&a.texture_hist, &b.texture_hist)
}

/// Region produced by merging two children.
pub fn merge_pair(a: &Region, b: &Region) -> Region {
    let (na, nb) = (a.pixel_count as f64, b.pixel_count as f64);
    let total = na + nb;
    let blend = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| (u * na + v * nb) / total).collect() };
    Region {
        pixel_count: a.pixel_count + b.pixel_count,
        bbox: a.bbox.union(&b.bbox),
        mean_colour: blend(&a.mean_colour, &b.mean_colour),
        colour_hist: blend(&a.colour_hist, &b.colour_hist),
        texture_hist: blend(&a.texture_hist, &b.texture_hist),
    }
}

/// Every region box created while greedily merging the most similar
/// adjacent pair until one region remains: the initial regions followed by
/// each merge result (`2R - 1` boxes for `R` regions).
pub fn merge_hierarchy(seg: &Segmentation) -> Vec<BBox> {
    let mut nodes: Vec<Region> = seg.regions.clone();
    let mut alive = vec![true; nodes.len()];
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    let mut heap = BinaryHeap::new();
    for (a, b) in seg.adjacency() {
        neighbours[a].insert(b);
        neighbours[b].insert(a);
        heap.push((Similarity(region_similarity(&nodes[a], &nodes[b])), Reverse(a), Reverse(b)));
    }
    let mut boxes: Vec<BBox> = nodes.iter().map(|r| r.bbox).collect();
    let mut remaining = nodes.len();
    while remaining > 1 {
        let Some((_, Reverse(a), Reverse(b))) = heap.pop() else { break };
        if !alive[a] || !alive[b] {
            continue;
        }
        let merged = merge_pair(&nodes[a], &nodes[b]);
        let id = nodes.len();
        alive[a] = false;
        alive[b] = false;
        let mut adj: BTreeSet<usize> = neighbours[a].union(&neighbours[b]).copied().collect();
        adj.remove(&a);
        adj.remove(&b);
        for &n in &adj {
            neighbours[n].remove(&a);
            neighbours[n].remove(&b);
            neighbours[n].insert(id);
            heap.push((Similarity(region_similarity(&nodes[n], &merged)), Reverse(n), Reverse(id)));
        }
        boxes.push(merged.bbox);
        nodes.push(merged);
        alive.push(true);
        neighbours.push(adj);
        remaining -= 1;
    }
    boxes
}

/// [`merge_hierarchy`] with exact-duplicate boxes removed (first occurrence kept).
pub fn merge_regions(seg: &Segmentation) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for b in merge_hierarchy(seg) {
        if !out.iter().any(|o| o.same_coords(&b)) {
            out.push(b);
        }
    }
    out
}

/// Full proposal pipeline: segment, merge, then keep boxes passing the
/// aspect and relative-size filter.
pub fn propose(image: &Image, params: &SegmentationParams) -> Result<Vec<BBox>> {
    let seg = felzenszwalb_segment(image, params)?;
    let boxes = merge_regions(&seg);
    Ok(filter_proposals(&boxes, image.width as f64, image.height as f64))
}
