//! Three-view augmentation with exact box bookkeeping.
//!
//! `V1` is the input resized to `size x size`; `V2` is a random square crop
//! of `V1` resized back to `size x size`; `V3` is `V2` downsampled by two.
//! Each view then gets independent colour jitter and blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricConfig {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub p_saturation: f64,
    pub p_blur: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
            blur_sigma: (0.1, 2.0),
            p_brightness: 0.5,
            p_contrast: 0.5,
            p_saturation: 0.5,
            p_blur: 0.5,
        }
    }
}

impl PhotometricConfig {
    /// Every branch disabled.
    pub fn identity() -> Self {
        Self { p_brightness: 0.0, p_contrast: 0.0, p_saturation: 0.0, p_blur: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    /// Side of `V1` and `V2`; `V3` is half of it.
    pub size: usize,
    /// Range of the crop area as a fraction of `V1`.
    pub crop_area: (f64, f64),
    /// Minimum fraction of a box's `V1` area that must survive the crop.
    pub min_visible: f64,
    pub photometric: PhotometricConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { size: 224, crop_area: (0.5, 1.0), min_visible: 0.5, photometric: PhotometricConfig::default() }
    }
}

/// Square crop of `V1`, in `V1` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub x1: f64,
    pub y1: f64,
    pub side: f64,
}

impl Crop {
    pub fn full(size: usize) -> Self {
        Self { x1: 0.0, y1: 0.0, side: size as f64 }
    }

    pub fn as_box(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x1 + self.side, self.y1 + self.side]
    }
}

/// One proposal seen from each view. `v2`/`v3` are `None` when the crop
/// keeps less than the visibility threshold of the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewBoxes {
    pub v1: BBox,
    pub v2: Option<BBox>,
    pub v3: Option<BBox>,
}

impl ViewBoxes {
    pub fn is_valid(&self) -> bool {
        self.v2.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ViewTriple {
    pub v1: Image,
    pub v2: Image,
    pub v3: Image,
    pub boxes: Vec<ViewBoxes>,
    pub crop: Crop,
    pub size: usize,
    pub min_visible: f64,
    /// Scale from input-image to `V1` coordinates, `(x, y)`.
    pub input_scale: (f64, f64),
    pub seed: u64,
}

impl ViewTriple {
    pub fn valid_count(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_valid()).count()
    }

    /// Maps a `V1` box into all views.
    pub fn map_v1_box(&self, b: &BBox) -> ViewBoxes {
        let v2 = v1_to_v2(b, &self.crop, self.size, self.min_visible);
        ViewBoxes { v1: *b, v2, v3: v2.map(|v| v2_to_v3(&v)) }
    }

    /// Maps a `V1` box back to input-image coordinates.
    pub fn v1_to_input(&self, b: &BBox) -> BBox {
        b.affine(0.0, 0.0, 1.0 / self.input_scale.0, 1.0 / self.input_scale.1)
    }
}

/// Input-image box to `V1` coordinates.
pub fn input_to_v1(b: &BBox, image_w: usize, image_h: usize, size: usize) -> BBox {
    b.affine(0.0, 0.0, size as f64 / image_w as f64, size as f64 / image_h as f64)
}

fn crop_box(b: &BBox, crop: &Crop, factor: f64, extent: f64, min_visible: f64) -> Option<BBox> {
    let [cx1, cy1, cx2, cy2] = crop.as_box();
    let window = BBox { x1: cx1, y1: cy1, x2: cx2, y2: cy2, score: None, class_id: None };
    if b.intersection_area(&window) < min_visible * b.area() {
        return None;
    }
    b.affine(cx1, cy1, factor, factor).clip(extent, extent, 0.0)
}

/// `V1` box to `V2` coordinates, or `None` when too little survives the crop.
pub fn v1_to_v2(b: &BBox, crop: &Crop, size: usize, min_visible: f64) -> Option<BBox> {
    crop_box(b, crop, size as f64 / crop.side, size as f64, min_visible)
}

pub fn v2_to_v3(b: &BBox) -> BBox {
    b.affine(0.0, 0.0, 0.5, 0.5)
}

/// Direct `V1` to `V3` mapping; agrees exactly with `v2_to_v3(v1_to_v2(..))`.
pub fn v1_to_v3(b: &BBox, crop: &Crop, size: usize, min_visible: f64) -> Option<BBox> {
    crop_box(b, crop, (size as f64 / 2.0) / crop.side, size as f64 / 2.0, min_visible)
}

/// Draws a square crop whose area fraction is uniform in `cfg.crop_area`,
/// placed uniformly inside `V1`.
pub fn random_crop(rng: &mut impl Rng, cfg: &ViewConfig) -> Crop {
    let (lo, hi) = cfg.crop_area;
    let area = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let size = cfg.size as f64;
    let side = size * area.sqrt();
    let slack = size - side;
    let x1 = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
    let y1 = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
    Crop { x1, y1, side }
}

/// Builds the three views of `image` for `proposals` (input coordinates).
pub fn make_views(image: &Image, proposals: &[BBox], seed: u64, cfg: &ViewConfig) -> Result<ViewTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = random_crop(&mut rng, cfg);
    let jitter_seeds: [u64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    make_views_with_crop(image, proposals, crop, jitter_seeds, seed, cfg)
}

/// [`make_views`] with the crop and per-view jitter seeds given explicitly.
pub fn make_views_with_crop(
    image: &Image,
    proposals: &[BBox],
    crop: Crop,
    jitter_seeds: [u64; 3],
    seed: u64,
    cfg: &ViewConfig,
) -> Result<ViewTriple> {
    if proposals.is_empty() {
        return Err(Error::Config("make_views needs at least one proposal".into()));
    }
    if !cfg.size.is_multiple_of(2) {
        return Err(Error::Config(format!("view size {} must be even", cfg.size)));
    }
    let size = cfg.size;
    let v1_clean = image.resize(size, size);
    let v2_clean = v1_clean.crop_resize(crop.x1, crop.y1, crop.x1 + crop.side, crop.y1 + crop.side, size, size);
    let v3_clean = v2_clean.resize(size / 2, size / 2);
    let input_scale = (size as f64 / image.width as f64, size as f64 / image.height as f64);
    let boxes = proposals
        .iter()
        .map(|p| {
            let v1 = input_to_v1(p, image.width, image.height, size);
            let v2 = v1_to_v2(&v1, &crop, size, cfg.min_visible);
            ViewBoxes { v1, v2, v3: v2.map(|b| v2_to_v3(&b)) }
        })
        .collect();
    Ok(ViewTriple {
        v1: photometric(&v1_clean, jitter_seeds[0], &cfg.photometric),
        v2: photometric(&v2_clean, jitter_seeds[1], &cfg.photometric),
        v3: photometric(&v3_clean, jitter_seeds[2], &cfg.photometric),
        boxes,
        crop,
        size,
        min_visible: cfg.min_visible,
        input_scale,
        seed,
    })
}

fn luma(p: &[f64]) -> f64 {
    match p.len() {
        3 => 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2],
        _ => p.iter().sum::<f64>() / p.len() as f64,
    }
}

/// Colour jitter (brightness, contrast, saturation) and Gaussian blur, each
/// applied with its own probability. Output is clamped to [0, 1].
pub fn photometric(image: &Image, seed: u64, cfg: &PhotometricConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |p: f64, range: (f64, f64)| -> Option<f64> {
        let apply = rng.gen::<f64>() < p;
        let value = range.0 + (range.1 - range.0) * rng.gen::<f64>();
        apply.then_some(value)
    };
    let brightness = draw(cfg.p_brightness, cfg.brightness);
    let contrast = draw(cfg.p_contrast, cfg.contrast);
    let saturation = draw(cfg.p_saturation, cfg.saturation);
    let blur = draw(cfg.p_blur, cfg.blur_sigma);

    let mut out = image.clone();
    if let Some(f) = brightness {
        out.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if let Some(f) = contrast {
        let n = (out.height * out.width) as f64;
        let mean = out.data.chunks(out.channels).map(luma).sum::<f64>() / n;
        out.data.iter_mut().for_each(|v| *v = (mean + f * (*v - mean)).clamp(0.0, 1.0));
    }
    if let Some(f) = saturation {
        for px in out.data.chunks_mut(out.channels) {
            let grey = luma(px);
            px.iter_mut().for_each(|v| *v = (grey + f * (*v - grey)).clamp(0.0, 1.0));
        }
    }
    if let Some(sigma) = blur {
        out = out.gaussian_blur(sigma);
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}
