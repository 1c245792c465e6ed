//! im2col / col2im kernels behind regular and transposed convolution.

use crate::scalar::{matmul, Scalar};

/// Geometry of a strided, zero-padded sliding window over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    /// Output extent of a window along one axis, `None` if the kernel
    /// does not fit.
    pub fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        Some(Window {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: Self::out_len(h, k, stride, pad)?,
            ow: Self::out_len(w, k, stride, pad)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, unpadded windows use the image itself as columns.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output index `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }
}

/// Unfold one image `(c, h, w)` into a `(c*k*k, oh*ow)` column matrix.
pub(crate) fn im2col<T: Scalar>(g: &Window, image: &[T], cols: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for c in 0..g.c {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kj, g.w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back onto an image, adding overlapping taps.
pub(crate) fn col2im_add<T: Scalar>(g: &Window, cols: &[T], image: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for c in 0..g.c {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else {
                        continue;
                    };
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            drow[ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (co, b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += *b;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(dy: &[T], db: &mut [T], plane: usize) {
    for (co, g) in db.iter_mut().enumerate() {
        *g += dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Regular convolution of a batch, `w` laid out `(cout, cin, k, k)`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &Window,
    batch: usize,
    cout: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = cout * ncols;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncols]
    };
    for n in 0..batch {
        let xi = &x[n * in_len..(n + 1) * in_len];
        let yi = &mut out[n * out_len..(n + 1) * out_len];
        let colm: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        matmul(false, false, cout, ncols, rows, w, colm, T::zero(), yi);
        if let Some(b) = bias {
            add_bias(yi, b, ncols);
        }
    }
    out
}

/// Gradients of [`conv_forward`]; each `d*` buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &Window,
    batch: usize,
    cout: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = cout * ncols;
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    for n in 0..batch {
        let xi = &x[n * in_len..(n + 1) * in_len];
        let dyi = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            accumulate_bias_grad(dyi, db, ncols);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let colm: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(g, xi, &mut cols);
                &cols
            };
            matmul(false, true, cout, rows, ncols, dyi, colm, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                matmul(true, false, rows, ncols, cout, w, dyi, T::one(), dxi);
            } else {
                matmul(true, false, rows, ncols, cout, w, dyi, T::zero(), &mut dcols);
                col2im_add(g, &dcols, dxi);
            }
        }
    }
}

/// Transposed convolution of a batch, `w` laid out `(cin, cout, k, k)`.
///
/// `g` describes the *output* image as seen by the adjoint regular
/// convolution: `g.c = cout`, `(g.h, g.w)` the output extent and
/// `(g.oh, g.ow)` the input extent.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    g: &Window,
    batch: usize,
    cin: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = cin * ncols;
    let out_plane = g.h * g.w;
    let out_len = g.c * out_plane;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let xi = &x[n * in_len..(n + 1) * in_len];
        let yi = &mut out[n * out_len..(n + 1) * out_len];
        matmul(true, false, rows, ncols, cin, w, xi, T::zero(), &mut cols);
        col2im_add(g, &cols, yi);
        if let Some(b) = bias {
            add_bias(yi, b, out_plane);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    g: &Window,
    batch: usize,
    cin: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = cin * ncols;
    let out_plane = g.h * g.w;
    let out_len = g.c * out_plane;
    let mut dcols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let dyi = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            accumulate_bias_grad(dyi, db, out_plane);
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(g, dyi, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx[n * in_len..(n + 1) * in_len];
            matmul(false, false, cin, ncols, rows, w, &dcols, T::one(), dxi);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xi = &x[n * in_len..(n + 1) * in_len];
            matmul(false, true, cin, rows, ncols, xi, &dcols, T::one(), dw);
        }
    }
}
