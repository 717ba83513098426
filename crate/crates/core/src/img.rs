//! Image type and pixel IO. Pixels are H×W×3 f64 in [0,1]; disk round-trips
//! go through 8-bit PNG, so any image whose values are multiples of 1/255
//! reloads bit-exactly.

use std::path::Path;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageMeta {
    pub episode_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Array3<f64>,
    pub meta: Option<ImageMeta>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(CoreError::shape(
                "image",
                format!("expected nonempty HxWx3, got {h}x{w}x{c}"),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::invalid(
                "image",
                format!("pixel value {v} outside [0,1]"),
            ));
        }
        Ok(Image { pixels, meta: None })
    }

    pub fn with_meta(mut self, episode_id: &str, frame_index: usize) -> Self {
        self.meta = Some(ImageMeta {
            episode_id: episode_id.to_string(),
            frame_index,
        });
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn from_u8(data: &[u8], h: usize, w: usize) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(CoreError::shape(
                "image",
                format!("buffer {} != {h}x{w}x3", data.len()),
            ));
        }
        let pixels = Array3::from_shape_vec(
            (h, w, 3),
            data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .unwrap();
        Image::new(pixels)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| CoreError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Image::from_u8(img.as_raw(), h as usize, w as usize)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let buf =
            image::RgbImage::from_raw(w as u32, h as u32, self.to_u8()).expect("sized buffer");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| CoreError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// Area-average resize to `th`×`tw`. Exact block averaging when the ratio
    /// is an integer; fractional source coverage is weighted by overlap, so
    /// the global mean is preserved either way.
    pub fn resize_area(&self, th: usize, tw: usize) -> Result<Image> {
        let (sh, sw, _) = self.pixels.dim();
        if th == 0 || tw == 0 {
            return Err(CoreError::invalid("resize", "target must be positive"));
        }
        if th > sh || tw > sw {
            return Err(CoreError::invalid(
                "resize",
                format!("upsampling {sh}x{sw} -> {th}x{tw} not supported"),
            ));
        }
        if th == sh && tw == sw {
            return Ok(self.clone());
        }
        let mut out = Array3::<f64>::zeros((th, tw, 3));
        let ry = sh as f64 / th as f64;
        let rx = sw as f64 / tw as f64;
        for ty in 0..th {
            let y0 = ty as f64 * ry;
            let y1 = (ty + 1) as f64 * ry;
            for tx in 0..tw {
                let x0 = tx as f64 * rx;
                let x1 = (tx + 1) as f64 * rx;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0;
                let mut sy = y0.floor() as usize;
                while (sy as f64) < y1 && sy < sh {
                    let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    let mut sx = x0.floor() as usize;
                    while (sx as f64) < x1 && sx < sw {
                        let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                        let w = wy * wx;
                        for c in 0..3 {
                            acc[c] += w * self.pixels[[sy, sx, c]];
                        }
                        area += w;
                        sx += 1;
                    }
                    sy += 1;
                }
                for c in 0..3 {
                    out[[ty, tx, c]] = (acc[c] / area).clamp(0.0, 1.0);
                }
            }
        }
        let mut img = Image::new(out)?;
        img.meta = self.meta.clone();
        Ok(img)
    }
}
