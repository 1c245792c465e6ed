//! Brute-force reference implementations shared by the integration
//! tests. Deliberately naive: direct loops over the defining sums.
#![allow(dead_code, clippy::needless_range_loop)]

use dmem::{Shape, Tensor};
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// `y[n,o,i,j] = b[o] + sum_{c,ki,kj} w[o,c,ki,kj] * x[n,c,i*s+ki-p, j*s+kj-p]`
/// with zeros outside the image.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..xs.c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, ki, kj) * x.at(n, c, yy as usize, xx as usize);
                            }
                        }
                    }
                    *y.at_mut(n, o, i, j) = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution by scattering every input pixel through the
/// kernel; `w` is `(cin, cout, k, k)`.
pub fn conv_transpose2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h - 1) * stride + k + output_pad - 2 * pad;
    let ow = (xs.w - 1) * stride + k + output_pad - 2 * pad;
    let mut y = Tensor::from_fn(Shape::new(xs.n, ws.c, oh, ow), |_, o, _, _| {
        b.map_or(0.0, |b| b.data()[o])
    });
    for n in 0..xs.n {
        for c in 0..xs.c {
            for i in 0..xs.h {
                for j in 0..xs.w {
                    for o in 0..ws.c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                *y.at_mut(n, o, yy as usize, xx as usize) +=
                                    x.at(n, c, i, j) * w.at(c, o, ki, kj);
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Bilinear interpolation as a sum of tent kernels over every pixel;
/// pixels outside the image contribute nothing.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let ky = (1.0 - (y - i as f64).abs()).max(0.0);
            let kx = (1.0 - (x - j as f64).abs()).max(0.0);
            acc += ky * kx * plane[i * w + j];
        }
    }
    acc
}

/// Stride-1 deformable convolution: tap `t = ki*k + kj` of output pixel
/// `(i, j)` reads `x` at `(i - pad + ki + dy, j - pad + kj + dx)` with
/// `dy = offsets[2t]`, `dx = offsets[2t + 1]`.
pub fn deform_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    offsets: &Tensor<f64>,
    pad: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = xs.h + 2 * pad - k + 1;
    let ow = xs.w + 2 * pad - k + 1;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ki in 0..k {
                        for kj in 0..k {
                            let t = ki * k + kj;
                            let py = i as f64 - pad as f64 + ki as f64 + offsets.at(n, 2 * t, i, j);
                            let px = j as f64 - pad as f64 + kj as f64 + offsets.at(n, 2 * t + 1, i, j);
                            for c in 0..xs.c {
                                acc += w.at(o, c, ki, kj) * bilinear(x.plane(n, c), xs.h, xs.w, py, px);
                            }
                        }
                    }
                    *y.at_mut(n, o, i, j) = acc;
                }
            }
        }
    }
    y
}

/// Winner for each of the 4^3 vote patterns, `None` for a three-way split.
pub fn vote_table() -> [[[Option<u8>; 4]; 4]; 4] {
    let mut table = [[[None; 4]; 4]; 4];
    for a in 0..4u8 {
        for b in 0..4u8 {
            for c in 0..4u8 {
                table[a as usize][b as usize][c as usize] = if a == b || a == c {
                    Some(a)
                } else if b == c {
                    Some(b)
                } else {
                    None
                };
            }
        }
    }
    table
}

fn first_max(v: &[f64]) -> u8 {
    let best = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x == best).unwrap() as u8
}

/// Reference decision for one pixel of three probability vectors.
pub fn vote(table: &[[[Option<u8>; 4]; 4]; 4], p: &[[f64; 4]; 3]) -> u8 {
    let (a, b, c) = (first_max(&p[0]), first_max(&p[1]), first_max(&p[2]));
    table[a as usize][b as usize][c as usize].unwrap_or_else(|| {
        let mean: Vec<f64> = (0..4).map(|k| (p[0][k] + p[1][k] + p[2][k]) / 3.0).collect();
        let best = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mean.iter().position(|&m| best - m < 1e-12).unwrap() as u8
    })
}

/// `(tp, fp, fn)` by direct counting.
pub fn tally(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let fp = pred.iter().zip(gt).filter(|(p, g)| **p && !**g).count();
    let fn_ = pred.iter().zip(gt).filter(|(p, g)| !**p && **g).count();
    (tp, fp, fn_)
}

/// Sorted areas of 4-connected components, by union-find.
pub fn component_areas(h: usize, w: usize, member: &[bool]) -> Vec<usize> {
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !member[i] {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if member[j] {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut counts = std::collections::HashMap::new();
    for i in 0..h * w {
        if member[i] {
            *counts.entry(find(&mut parent, i)).or_insert(0) += 1;
        }
    }
    let mut areas: Vec<usize> = counts.into_values().collect();
    areas.sort_unstable();
    areas
}

/// Mean and population standard deviation in two passes.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
