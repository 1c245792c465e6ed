//! Raw annotation palettes and the nucleus size split.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::{class, LabelMask};

/// Gray levels of the 8-bit raw annotation palette.
pub mod raw {
    pub const BACKGROUND: u8 = 0;
    pub const CYTOPLASM: u8 = 85;
    pub const NUCLEUS: u8 = 170;
    pub const UNKNOWN: u8 = 255;
}

/// An annotation mask in the raw palette, before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RawMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(
                "raw_mask",
                format!("{} values for a {h}x{w} mask", data.len()),
            ));
        }
        Ok(RawMask { h, w, data })
    }
}

/// Nucleus area separating small (abnormal) from large (normal) nuclei:
/// 64 pixels at 64x64, scaled with image area.
pub fn default_size_threshold(h: usize, w: usize) -> usize {
    ((64 * h * w) as f64 / 4096.0).round().max(1.0) as usize
}

/// A 4-connected region; pixel indices are row-major and sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// 4-connected components of the pixels where `member` holds, in
/// row-major order of their first pixel.
pub fn components(h: usize, w: usize, member: impl Fn(usize) -> bool) -> Vec<Component> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && member(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// Map raw palette values to class labels. Unknown becomes background;
/// each nucleus component smaller than `size_threshold` pixels becomes
/// an abnormal nucleus, the rest normal.
pub fn encode_labels(raw: &RawMask, size_threshold: usize) -> Result<LabelMask> {
    let mut out = vec![class::BACKGROUND; raw.data.len()];
    for (i, &v) in raw.data.iter().enumerate() {
        out[i] = match v {
            raw::BACKGROUND | raw::UNKNOWN | raw::NUCLEUS => class::BACKGROUND,
            raw::CYTOPLASM => class::CYTOPLASM,
            other => {
                return Err(Error::InvalidLabel {
                    value: other as u32,
                    index: i,
                })
            }
        };
    }
    for comp in components(raw.h, raw.w, |i| raw.data[i] == raw::NUCLEUS) {
        let label = if comp.area() < size_threshold {
            class::ABNORMAL_NUCLEUS
        } else {
            class::NORMAL_NUCLEUS
        };
        for i in comp.pixels {
            out[i] = label;
        }
    }
    LabelMask::new(raw.h, raw.w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_is_background() {
        let m = RawMask::new(2, 2, vec![raw::UNKNOWN; 4]).unwrap();
        assert_eq!(encode_labels(&m, 10).unwrap().data(), &[0; 4]);
    }

    #[test]
    fn large_nucleus_is_normal() {
        let (h, w) = (30, 30);
        let data = (0..h * w)
            .map(|i| if i / w < 20 && i % w < 25 { raw::NUCLEUS } else { raw::CYTOPLASM })
            .collect();
        let enc = encode_labels(&RawMask::new(h, w, data).unwrap(), 300).unwrap();
        assert_eq!(enc.histogram(), [0, 400, 500, 0]);
    }

    #[test]
    fn split_by_area() {
        #[rustfmt::skip]
        let data = vec![
            170, 170,   0,   0,
            170,   0,   0, 170,
              0,   0,  85, 170,
            170,  85, 255, 170,
        ];
        let enc = encode_labels(&RawMask::new(4, 4, data).unwrap(), 3).unwrap();
        #[rustfmt::skip]
        assert_eq!(enc.data(), &[
            2, 2, 0, 0,
            2, 0, 0, 2,
            0, 0, 1, 2,
            3, 1, 0, 2,
        ]);
    }

    #[test]
    fn diagonal_neighbours_are_separate() {
        let comps = components(2, 2, |i| i == 0 || i == 3);
        assert_eq!(comps.len(), 2);
    }

    #[test]
    fn unrecognized_value_reported() {
        let m = RawMask::new(1, 3, vec![0, 42, 0]).unwrap();
        match encode_labels(&m, 1) {
            Err(Error::InvalidLabel { value: 42, index: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_scales_with_area() {
        assert_eq!(default_size_threshold(64, 64), 64);
        assert_eq!(default_size_threshold(256, 256), 1024);
        assert_eq!(default_size_threshold(1, 1), 1);
    }
}
