//! Minimal float image type with bilinear resampling and PPM I/O.
//!
//! Resampling uses the half-pixel-centre convention throughout: the centre of
//! pixel `i` sits at continuous coordinate `i + 0.5`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width x channels` image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at continuous pixel-index coordinates, clamped to the
    /// border.
    pub fn sample(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resamples the window `[x1, x2) x [y1, y2)` (pixel-edge coordinates) to
    /// an `out_h x out_w` image.
    pub fn crop_resize(&self, x1: f64, y1: f64, x2: f64, y2: f64, out_h: usize, out_w: usize) -> Image {
        let sy = (y2 - y1) / out_h as f64;
        let sx = (x2 - x1) / out_w as f64;
        Image::from_fn(out_h, out_w, self.channels, |i, j, c| {
            let y = y1 + (i as f64 + 0.5) * sy - 0.5;
            let x = x1 + (j as f64 + 0.5) * sx - 0.5;
            self.sample(y, x, c)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.width as f64, self.height as f64, out_h, out_w)
    }

    /// Separable Gaussian blur with a truncated kernel of radius `ceil(3 sigma)`
    /// and clamp-to-edge borders. `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let (h, w, ch) = (self.height as isize, self.width as isize, self.channels);
        let mut tmp = self.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let xx = (x + k as isize - radius).clamp(0, w - 1);
                        acc += wk * self.get(y as usize, xx as usize, c);
                    }
                    tmp.set(y as usize, x as usize, c, acc);
                }
            }
        }
        let mut out = tmp.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let yy = (y + k as isize - radius).clamp(0, h - 1);
                        acc += wk * tmp.get(yy as usize, x as usize, c);
                    }
                    out.set(y as usize, x as usize, c, acc);
                }
            }
        }
        out
    }

    /// Channel-major copy (`C x H x W`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let plane = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[c * plane + y * self.width + x] = self.get(y, x, c);
                }
            }
        }
        out
    }

    /// Reads a binary (P6) or ASCII (P3) portable pixmap with 8-bit samples.
    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_ppm(&bytes).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes a binary P6 pixmap; values are clamped to [0, 1] and rounded.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(y, x, c.min(self.channels - 1));
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// Normalized Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PPM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let magic = tokens[0].as_str();
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PPM header field {s:?}")));
    let (width, height, maxval) = (dim(&tokens[1])?, dim(&tokens[2])?, dim(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PPM maxval {maxval}")));
    }
    let n = width * height * 3;
    let samples: Vec<u8> = match magic {
        "P6" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            if body.len() < n {
                return Err(Error::Parse(format!("PPM body has {} bytes, need {n}", body.len())));
            }
            body[..n].to_vec()
        }
        "P3" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<u8>, _> = text.split_whitespace().take(n).map(str::parse::<u8>).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("bad P3 sample: {e}")))?;
            if vals.len() < n {
                return Err(Error::Parse("truncated P3 body".into()));
            }
            vals
        }
        other => return Err(Error::Parse(format!("unsupported PPM magic {other:?}"))),
    };
    let scale = maxval as f64;
    Ok(Image { height, width, channels: 3, data: samples.iter().map(|&v| v as f64 / scale).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_values() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let back = decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ascii_ppm() {
        let img = decode_ppm(b"P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn identity_resize_and_exact_halving() {
        let img = Image::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        assert_eq!(img.resize(4, 4), img);
        let half = img.resize(2, 2);
        // each output pixel is the mean of a 2x2 block
        assert_eq!(half.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(half.get(1, 1, 0), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(9, 9, 3, 0.5);
        let out = img.gaussian_blur(1.7);
        assert!(out.data.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert_eq!(img.gaussian_blur(0.0), img);
    }

    #[test]
    fn chw_layout() {
        let img = Image::from_fn(2, 2, 2, |y, x, c| (c * 100 + y * 10 + x) as f64);
        assert_eq!(img.to_chw(), vec![0.0, 1.0, 10.0, 11.0, 100.0, 101.0, 110.0, 111.0]);
    }
}
