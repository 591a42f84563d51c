//! Mask-guided merging of stylized output into the original image, plus
//! the tile-and-paste texture baseline.

use ndarray::Array2;

use crate::annotations::bbox_from_mask;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor};

/// One compositing request. With `feather_radius = 0` the mask is applied
/// hard (pixels outside it stay bit-identical to the original); with
/// `r > 0` the mask is box-blurred `r` times into an alpha matte.
#[derive(Debug, Clone)]
pub struct CompositeJob {
    pub original: ImageTensor,
    pub stylized: ImageTensor,
    pub mask: BinaryMask,
    pub feather_radius: usize,
}

impl CompositeJob {
    fn check_shapes(&self) -> Result<()> {
        let (h, w) = (self.original.height(), self.original.width());
        if self.stylized.height() != h
            || self.stylized.width() != w
            || self.mask.height != h
            || self.mask.width != w
        {
            return Err(Error::ShapeMismatch(
                "composite inputs must share the same H×W".into(),
            ));
        }
        Ok(())
    }
}

/// One pass of a 3×3 mean filter with border clamping.
fn box_blur_pass(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                acc += src[(y, x)];
            }
        }
        acc / 9.0
    })
}

pub fn composite(job: &CompositeJob) -> Result<ImageTensor> {
    job.check_shapes()?;
    let (h, w) = (job.original.height(), job.original.width());
    let mut out = job.original.clone();
    if job.feather_radius == 0 {
        for r in 0..h {
            for c in 0..w {
                if job.mask.get(r, c) {
                    for ch in 0..3 {
                        out.data[(ch, r, c)] = job.stylized.data[(ch, r, c)];
                    }
                }
            }
        }
        return Ok(out);
    }
    let mut alpha =
        Array2::from_shape_fn((h, w), |(r, c)| if job.mask.get(r, c) { 1.0 } else { 0.0 });
    for _ in 0..job.feather_radius {
        alpha = box_blur_pass(&alpha);
    }
    for r in 0..h {
        for c in 0..w {
            let a = alpha[(r, c)];
            if a == 0.0 {
                continue; // untouched region stays bit-identical
            }
            for ch in 0..3 {
                out.data[(ch, r, c)] =
                    a * job.stylized.data[(ch, r, c)] + (1.0 - a) * job.original.data[(ch, r, c)];
            }
        }
    }
    Ok(out)
}

/// Replace the masked region with the texture tiled from the mask's
/// bounding-box top-left corner. An empty mask returns the original
/// unchanged (the caller decides whether to warn).
pub fn copy_paste(
    original: &ImageTensor,
    texture: &ImageTensor,
    mask: &BinaryMask,
) -> Result<ImageTensor> {
    if mask.height != original.height() || mask.width != original.width() {
        return Err(Error::ShapeMismatch("mask dims differ from image".into()));
    }
    let anchor = match bbox_from_mask(mask) {
        Ok(b) => (b.y as usize, b.x as usize),
        Err(Error::EmptyMask) => return Ok(original.clone()),
        Err(e) => return Err(e),
    };
    let (th, tw) = (texture.height(), texture.width());
    let mut out = original.clone();
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                let ty = (r + th - anchor.0 % th) % th;
                let tx = (c + tw - anchor.1 % tw) % tw;
                for ch in 0..3 {
                    out.data[(ch, r, c)] = texture.data[(ch, ty, tx)];
                }
            }
        }
    }
    Ok(out)
}
