//! Samples, preprocessing, label encoding, a synthetic generator and
//! on-disk formats.

mod io;
mod labels;
mod synth;

pub use io::{
    load_dataset, read_binary_mask, read_image, read_index, read_label_mask, read_raw_tensor,
    write_binary_mask, write_dataset, write_image, write_index, write_label_mask,
    write_raw_tensor, IndexEntry, MaskFormat, INDEX_FILE,
};
pub use labels::{
    components, default_size_threshold, encode_labels, raw, Component, RawMask,
};
pub use synth::{generate_synthetic, SynthSpec};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Shape, Tensor};

/// Below this variance an image is treated as constant.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// One image with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, c, h, w)` intensities.
    pub image: Tensor<f64>,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f64>, mask: LabelMask) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || (s.h, s.w) != mask.dims() {
            return Err(Error::invalid(
                "sample",
                format!(
                    "image {s} does not match a {}x{} mask",
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Mirror image and mask together.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Sample {
        let s = self.image.shape();
        let image = Tensor::from_fn(s, |n, c, y, x| {
            let sy = if vertical { s.h - 1 - y } else { y };
            let sx = if horizontal { s.w - 1 - x } else { x };
            self.image.at(n, c, sy, sx)
        });
        let mut mask = self.mask.clone();
        if horizontal {
            mask = mask.flip_horizontal();
        }
        if vertical {
            mask = mask.flip_vertical();
        }
        Sample {
            id: self.id.clone(),
            image,
            mask,
        }
    }

    /// Resize to `(h, w)`: bilinear for the image, nearest for the mask.
    pub fn resized(&self, h: usize, w: usize) -> Result<Sample> {
        Ok(Sample {
            id: self.id.clone(),
            image: resize_bilinear(&self.image, h, w)?,
            mask: resize_nearest(&self.mask, h, w)?,
        })
    }
}

/// Standardize each image in the batch to zero mean and unit variance
/// over all of its channels. Constant images become all zeros.
pub fn normalize(image: &Tensor<f64>) -> Tensor<f64> {
    let s = image.shape();
    let len = s.c * s.plane();
    let mut out = image.clone();
    if len == 0 {
        return out;
    }
    for item in out.data_mut().chunks_mut(len) {
        let mean = item.iter().sum::<f64>() / len as f64;
        let var = item.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        if var < VARIANCE_FLOOR {
            item.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            for v in item.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    }
    out
}

fn check_target(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(op, format!("target size {h}x{w} is empty")));
    }
    Ok(())
}

/// Source coordinate of output index `i` under half-pixel alignment.
fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
    check_target("resize_bilinear", h, w)?;
    let s = image.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(image.clone());
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::invalid("resize_bilinear", "source image is empty"));
    }
    let (sy, sx) = (s.h as f64 / h as f64, s.w as f64 / w as f64);
    let axis = |i: usize, scale: f64, len: usize| {
        let p = source_coord(i, scale).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        let (y0, y1, ty) = axis(y, sy, s.h);
        let (x0, x1, tx) = axis(x, sx, s.w);
        let p = image.plane(n, c);
        let top = p[y0 * s.w + x0] * (1.0 - tx) + p[y0 * s.w + x1] * tx;
        let bottom = p[y1 * s.w + x0] * (1.0 - tx) + p[y1 * s.w + x1] * tx;
        top * (1.0 - ty) + bottom * ty
    }))
}

/// Nearest-neighbour resize; never invents labels.
pub fn resize_nearest(mask: &LabelMask, h: usize, w: usize) -> Result<LabelMask> {
    check_target("resize_nearest", h, w)?;
    let (mh, mw) = mask.dims();
    if (mh, mw) == (h, w) {
        return Ok(mask.clone());
    }
    let pick = |i: usize, src: usize, dst: usize| ((i * src + src / 2) / dst).min(src - 1);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let yy = pick(y, mh, h);
        for x in 0..w {
            data.push(mask.get(yy, pick(x, mw, w)));
        }
    }
    LabelMask::new(h, w, data)
}
