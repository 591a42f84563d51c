//! Raster primitives shared across the pipeline: RGB image tensors,
//! binary masks, bilinear resampling, and PNG input/output.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// H×W×3 real-valued raster, stored channel-major as `(3, H, W)`.
///
/// Unnormalized images hold values in `[0, 1]`. `normalized` records the
/// per-channel (mean, std) applied, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub normalized: Option<([f64; 3], [f64; 3])>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "ImageTensor expects (3, H>0, W>0), got ({c}, {h}, {w})"
            )));
        }
        Ok(ImageTensor { data, normalized: None })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((3, height, width)),
            normalized: None,
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Decode an 8-bit RGB PNG to values in `[0, 1]`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.into(), source: e })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
            }
        }
        ImageTensor::new(data)
    }

    /// Encode to 8-bit RGB PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height(), self.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    let v = self.data[(c, y, x)].clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                });
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path)
            .map_err(|e| Error::Image { path: path.into(), source: e })
    }
}

/// Per-pixel boolean segmentation raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch("mask union dims differ".into()));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    }

    /// Write as a 1-bit grayscale PNG (set pixels white).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    packed[r * row_bytes + c / 8] |= 0x80 >> (c % 8);
                }
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(file, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let write = |e: png::EncodingError| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
        };
        let mut writer = encoder.write_header().map_err(write)?;
        writer.write_image_data(&packed).map_err(write)?;
        writer.finish().map_err(write)
    }

    /// Load from a grayscale PNG; any pixel above half intensity is set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.into(), source: e })?
            .to_luma8();
        let mut mask = BinaryMask::new(img.height() as usize, img.width() as usize);
        for (x, y, px) in img.enumerate_pixels() {
            mask.set(y as usize, x as usize, px.0[0] > 127);
        }
        Ok(mask)
    }
}

/// Sample a 2D plane at a continuous point with half-pixel centers and
/// border clamping. `(x, y)` are in pixel units; the center of cell
/// `(row i, col j)` is `(j + 0.5, i + 0.5)`.
pub fn bilinear_sample(plane: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let top = plane[(y0, x0)] * (1.0 - fx) + plane[(y0, x1)] * fx;
    let bot = plane[(y1, x0)] * (1.0 - fx) + plane[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of a single plane with half-pixel center sampling.
pub fn bilinear_resize_plane(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let x = (j as f64 + 0.5) * sx;
        let y = (i as f64 + 0.5) * sy;
        bilinear_sample(src, x, y)
    })
}

/// Bilinear resize of a channel-major `(C, H, W)` tensor.
pub fn bilinear_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let c = src.dim().0;
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&bilinear_resize_plane(&plane, out_h, out_w));
    }
    out
}
