//! Per-pixel class maps.

use crate::error::{Error, Result};

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 4;

/// Class indices of a [`LabelMask`].
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const CYTOPLASM: u8 = 1;
    pub const NORMAL_NUCLEUS: u8 = 2;
    pub const ABNORMAL_NUCLEUS: u8 = 3;
}

/// `(h, w)` map of class labels in `0..4`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(
                "label_mask",
                format!("{} labels for a {h}x{w} mask", data.len()),
            ));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel { value: v as u32, index });
        }
        Ok(LabelMask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Result<Self> {
        Self::new(h, w, vec![label; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Set one pixel; rejects labels outside `0..4`.
    pub fn set(&mut self, y: usize, x: usize, label: u8) -> Result<()> {
        if label as usize >= NUM_CLASSES {
            return Err(Error::InvalidLabel {
                value: label as u32,
                index: y * self.w + x,
            });
        }
        self.data[y * self.w + x] = label;
        Ok(())
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.w) {
            row.reverse();
        }
        LabelMask { data, ..*self }
    }

    pub fn flip_vertical(&self) -> Self {
        let data = self.data.chunks(self.w).rev().flatten().copied().collect();
        LabelMask { data, ..*self }
    }
}

/// `(h, w)` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(
                "binary_mask",
                format!("{} pixels for a {h}x{w} mask", data.len()),
            ));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn not(&self) -> Self {
        BinaryMask {
            data: self.data.iter().map(|v| !v).collect(),
            ..*self
        }
    }
}
