//! Per-pixel majority vote over three class-probability maps.

use crate::error::{Error, Result};
use crate::mask::{class, BinaryMask, LabelMask, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Number of voting paths.
pub const PATHS: usize = 3;

/// Allowed deviation of a pixel's probabilities from summing to one.
const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Outcome of a vote: winning labels plus the number of votes each class
/// received at every pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub labels: LabelMask,
    pub counts: Vec<[u8; NUM_CLASSES]>,
}

/// Index of the largest value, the lowest index on ties.
fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decide one pixel from each path's class probabilities.
///
/// Each path votes its argmax; two or more votes win. When all three
/// disagree, the class with the highest probability averaged over the
/// paths wins. Sums within a few ulps of the maximum count as tied, so
/// rounding noise cannot break a tie; ties go to the lowest index.
pub fn vote_pixel<T: Scalar>(probs: &[[T; NUM_CLASSES]; PATHS]) -> (u8, [u8; NUM_CLASSES]) {
    let mut counts = [0u8; NUM_CLASSES];
    for p in probs {
        counts[argmax(p)] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n >= 2) {
        return (c as u8, counts);
    }
    let mut mean = [T::zero(); NUM_CLASSES];
    for p in probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = mean[argmax(&mean)];
    let slack = T::epsilon() * T::from_f64_lossy(16.0);
    let winner = mean.iter().position(|&m| m >= top - slack).unwrap_or(0);
    (winner as u8, counts)
}

fn check_map<T: Scalar>(t: &Tensor<T>, shape: Shape, path: usize) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "majority_vote",
            left: shape,
            right: t.shape(),
        });
    }
    let plane = shape.plane();
    for i in 0..plane {
        let mut sum = 0.0;
        for c in 0..NUM_CLASSES {
            let v = t.data()[c * plane + i].as_f64();
            if !(0.0..=1.0 + NORMALIZATION_TOLERANCE).contains(&v) {
                return Err(Error::invalid(
                    "majority_vote",
                    format!("path {path}: probability {v} at pixel {i} is outside [0, 1]"),
                ));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::invalid(
                "majority_vote",
                format!("path {path}: probabilities at pixel {i} sum to {sum}"),
            ));
        }
    }
    Ok(())
}

/// Vote over three `(1, 4, h, w)` probability maps.
pub fn majority_vote_counts<T: Scalar>(probs: [&Tensor<T>; PATHS]) -> Result<Vote> {
    let shape = probs[0].shape();
    if shape.n != 1 || shape.c != NUM_CLASSES {
        return Err(Error::invalid(
            "majority_vote",
            format!("expected (1, {NUM_CLASSES}, h, w) maps, got {shape}"),
        ));
    }
    for (i, p) in probs.iter().enumerate() {
        check_map(p, shape, i)?;
    }
    let plane = shape.plane();
    let mut labels = Vec::with_capacity(plane);
    let mut counts = Vec::with_capacity(plane);
    for i in 0..plane {
        let px = probs.map(|t| std::array::from_fn(|c| t.data()[c * plane + i]));
        let (label, n) = vote_pixel(&px);
        labels.push(label);
        counts.push(n);
    }
    Ok(Vote {
        labels: LabelMask::new(shape.h, shape.w, labels)?,
        counts,
    })
}

/// Vote over three `(1, 4, h, w)` probability maps.
pub fn majority_vote<T: Scalar>(probs: [&Tensor<T>; PATHS]) -> Result<LabelMask> {
    Ok(majority_vote_counts(probs)?.labels)
}

/// Per-pixel argmax of a `(1, c, h, w)` map.
pub fn argmax_labels<T: Scalar>(map: &Tensor<T>) -> Result<LabelMask> {
    let s = map.shape();
    if s.n != 1 || s.c != NUM_CLASSES {
        return Err(Error::invalid(
            "argmax_labels",
            format!("expected (1, {NUM_CLASSES}, h, w), got {s}"),
        ));
    }
    let plane = s.plane();
    let labels = (0..plane)
        .map(|i| {
            let px: [T; NUM_CLASSES] = std::array::from_fn(|c| map.data()[c * plane + i]);
            argmax(&px) as u8
        })
        .collect();
    LabelMask::new(s.h, s.w, labels)
}

/// Nucleus pixels: normal or abnormal.
pub fn fuse_nuclei(mask: &LabelMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let data = mask
        .data()
        .iter()
        .map(|&v| v == class::NORMAL_NUCLEUS || v == class::ABNORMAL_NUCLEUS)
        .collect();
    BinaryMask::new(h, w, data).expect("same dims")
}
