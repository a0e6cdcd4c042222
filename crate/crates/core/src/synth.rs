//! Synthetic corpus: flat-coloured rectangles and ellipses on textured
//! backgrounds, with exact box annotations.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_boxes, ANNOTATION_EXT, IMAGE_EXT};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the square root of an object's area, in pixels.
    pub object_scale: (f64, f64),
    /// Range of height over width.
    pub aspect: (f64, f64),
    /// Minimum empty margin between object boxes.
    pub gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 224, min_objects: 1, max_objects: 5, object_scale: (76.0, 140.0), aspect: (0.5, 2.0), gap: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle = 0,
    Ellipse = 1,
}

/// One generated image with its annotations (class 0 rectangle, 1 ellipse).
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

fn colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Generates one image from `seed`.
pub fn synth_image(seed: u64, cfg: &SynthConfig) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;
    let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = Image::from_fn(size, size, 3, |y, x, c| {
        let wave = 0.06 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
        base[c] + wave + (c as f64 - 1.0) * 0.02 * (x as f64 * fy).sin()
    });
    for v in image.data.iter_mut() {
        *v = (*v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }

    let wanted = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < wanted && attempts < 200 {
        attempts += 1;
        let scale = rng.gen_range(cfg.object_scale.0..=cfg.object_scale.1);
        let aspect = rng.gen_range(cfg.aspect.0.ln()..=cfg.aspect.1.ln()).exp();
        let w = (scale / aspect.sqrt()).round().min(size as f64 - 2.0).max(4.0) as usize;
        let h = (scale * aspect.sqrt()).round().min(size as f64 - 2.0).max(4.0) as usize;
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let shape = if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let mut fill = colour(&mut rng);
        while distance(&fill, &base) < 0.45 {
            fill = colour(&mut rng);
        }
        let candidate = BBox { x1: x0 as f64, y1: y0 as f64, x2: (x0 + w) as f64, y2: (y0 + h) as f64, score: None, class_id: None };
        let clear = boxes.iter().all(|b| {
            candidate.x1 >= b.x2 + cfg.gap || b.x1 >= candidate.x2 + cfg.gap || candidate.y1 >= b.y2 + cfg.gap || b.y1 >= candidate.y2 + cfg.gap
        });
        if !clear {
            continue;
        }
        let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
        let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let inside = match shape {
                    Shape::Rectangle => true,
                    Shape::Ellipse => ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2) <= 1.0,
                };
                if inside {
                    for (c, &f) in fill.iter().enumerate() {
                        image.set(y, x, c, f);
                    }
                    (min_x, min_y, max_x, max_y) = (min_x.min(x), min_y.min(y), max_x.max(x), max_y.max(y));
                }
            }
        }
        let b = BBox { x1: min_x as f64, y1: min_y as f64, x2: (max_x + 1) as f64, y2: (max_y + 1) as f64, score: None, class_id: Some(shape as u32) };
        boxes.push(b);
    }
    SynthImage { image, boxes }
}

/// Writes `n` images and annotation files to `out_dir`, named `0000.ppm`,
/// `0000.gt`, and so on. Image `i` depends only on `seed` and `i`.
pub fn write_corpus(n: usize, out_dir: &Path, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus needs n >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_image(master.gen(), cfg);
        s.image.write_ppm(&out_dir.join(format!("{i:04}.{IMAGE_EXT}")))?;
        write_boxes(&out_dir.join(format!("{i:04}.{ANNOTATION_EXT}")), &s.boxes)?;
        out.push(s);
    }
    Ok(out)
}
