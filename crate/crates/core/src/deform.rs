//! Deformable convolution: kernel taps sample the input at learned
//! fractional displacements, read back by bilinear interpolation.
//!
//! Samples that fall outside the image read zero. The derivative of a
//! sample with respect to its position is taken on the cell
//! `(ceil(p) - 1, ceil(p)]`, i.e. the left limit of the hat kernel at
//! integer crossings.

use crate::autograd::conv::Window;
use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamStore};
use crate::scalar::{matmul, Scalar};
use crate::tensor::{Shape, Tensor};

/// Relative positions of the taps of a `k x k` kernel, row-major,
/// centered on the origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelGrid {
    k: usize,
}

impl KernelGrid {
    pub fn new(k: usize) -> Self {
        KernelGrid { k }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    /// `(dy, dx)` of every tap, e.g. `(-1, -1), (-1, 0), ..., (1, 1)` for k = 3.
    pub fn positions(&self) -> Vec<(isize, isize)> {
        let r = (self.k / 2) as isize;
        (0..self.k * self.k)
            .map(|t| ((t / self.k) as isize - r, (t % self.k) as isize - r))
            .collect()
    }
}

/// Per-pixel, per-tap displacement field of shape `(n, 2*k*k, h, w)`.
///
/// Channel `2t` holds the vertical and `2t + 1` the horizontal offset of
/// tap `t`, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T> {
    k: usize,
    tensor: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(tensor: Tensor<T>, k: usize) -> Result<Self> {
        let c = tensor.shape().c;
        if c != 2 * k * k {
            return Err(Error::invalid(
                "offset_field",
                format!("expected {} offset channels for k={k}, got {c}", 2 * k * k),
            ));
        }
        Ok(OffsetField { k, tensor })
    }

    pub fn zeros(n: usize, k: usize, h: usize, w: usize) -> Self {
        OffsetField {
            k,
            tensor: Tensor::zeros(Shape::new(n, 2 * k * k, h, w)),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// `(dy, dx)` of tap `t` at output pixel `(y, x)` of item `n`.
    pub fn get(&self, n: usize, t: usize, y: usize, x: usize) -> (T, T) {
        (self.tensor.at(n, 2 * t, y, x), self.tensor.at(n, 2 * t + 1, y, x))
    }

    pub fn set(&mut self, n: usize, t: usize, y: usize, x: usize, dy: T, dx: T) {
        *self.tensor.at_mut(n, 2 * t, y, x) = dy;
        *self.tensor.at_mut(n, 2 * t + 1, y, x) = dx;
    }

    pub fn is_zero(&self) -> bool {
        self.tensor.data().iter().all(|v| *v == T::zero())
    }
}

/// The four integer neighbours of a fractional position and their
/// interpolation weights. Neighbours outside the image get weight zero
/// and a dummy in-bounds index.
#[derive(Clone, Copy, Debug)]
struct Corners<T> {
    idx: [u32; 4],
    w: [T; 4],
}

/// Derivatives of the [`Corners`] weights along y and x.
#[derive(Clone, Copy, Debug)]
struct CornerSlopes<T> {
    dwy: [T; 4],
    dwx: [T; 4],
}

#[inline]
fn corners<T: Scalar>(h: usize, w: usize, py: T, px: T) -> (Corners<T>, CornerSlopes<T>) {
    let zero = T::zero();
    let one = T::one();
    let (fy, fx) = (py.ceil() - one, px.ceil() - one);
    let (ty, tx) = (py - fy, px - fx);
    let far = isize::MIN / 2;
    let (y0, x0) = (fy.to_isize().unwrap_or(far), fx.to_isize().unwrap_or(far));
    let mut c = Corners {
        idx: [0; 4],
        w: [zero; 4],
    };
    let mut s = CornerSlopes {
        dwy: [zero; 4],
        dwx: [zero; 4],
    };
    // (row, col, wy, wx, dwy/dpy, dwx/dpx)
    let taps = [
        (y0, x0, one - ty, one - tx, -one, -one),
        (y0, x0 + 1, one - ty, tx, -one, one),
        (y0 + 1, x0, ty, one - tx, one, -one),
        (y0 + 1, x0 + 1, ty, tx, one, one),
    ];
    for (i, (r, col, wy, wx, sy, sx)) in taps.into_iter().enumerate() {
        if r < 0 || col < 0 || r as usize >= h || col as usize >= w {
            continue;
        }
        c.idx[i] = (r as usize * w + col as usize) as u32;
        c.w[i] = wy * wx;
        s.dwy[i] = sy * wx;
        s.dwx[i] = wy * sx;
    }
    (c, s)
}

impl<T: Scalar> Corners<T> {
    #[inline]
    fn sample(&self, plane: &[T]) -> T {
        self.w[0] * plane[self.idx[0] as usize]
            + self.w[1] * plane[self.idx[1] as usize]
            + self.w[2] * plane[self.idx[2] as usize]
            + self.w[3] * plane[self.idx[3] as usize]
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            plane[self.idx[i] as usize] += g * self.w[i];
        }
    }
}

impl<T: Scalar> CornerSlopes<T> {
    /// `(d/dy, d/dx)` of the sample at these corners.
    #[inline]
    fn slopes(&self, c: &Corners<T>, plane: &[T]) -> (T, T) {
        let v = [
            plane[c.idx[0] as usize],
            plane[c.idx[1] as usize],
            plane[c.idx[2] as usize],
            plane[c.idx[3] as usize],
        ];
        (
            self.dwy[0] * v[0] + self.dwy[1] * v[1] + self.dwy[2] * v[2] + self.dwy[3] * v[3],
            self.dwx[0] * v[0] + self.dwx[1] * v[1] + self.dwx[2] * v[2] + self.dwx[3] * v[3],
        )
    }
}

fn check_position<T: Scalar>(y: T, x: T) -> Result<()> {
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite(format!("bilinear sample position ({y}, {x})")));
    }
    Ok(())
}

/// Bilinearly interpolated value of a `h x w` plane at `(y, x)`.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> Result<T> {
    check_position(y, x)?;
    Ok(corners(h, w, y, x).0.sample(plane))
}

/// Value and position derivatives `(v, dv/dy, dv/dx)` of [`bilinear_sample`].
pub fn bilinear_sample_grad<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> Result<(T, T, T)> {
    check_position(y, x)?;
    let (c, s) = corners(h, w, y, x);
    let (gy, gx) = s.slopes(&c, plane);
    Ok((c.sample(plane), gy, gx))
}

fn ensure_finite<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Sample every channel of `x` at absolute positions.
    ///
    /// `positions` has shape `(n, 2, oh, ow)`: channel 0 holds y and
    /// channel 1 holds x coordinates in pixels. Output is `(n, c, oh, ow)`.
    pub fn bilinear_sample(&mut self, x: Var, positions: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x), self.shape(positions));
        if ps.n != xs.n || ps.c != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                left: xs,
                right: ps,
            });
        }
        ensure_finite("sample positions", self.value(positions))?;
        let out_shape = Shape::new(xs.n, xs.c, ps.h, ps.w);
        let (xv, pv) = (self.value(x), self.value(positions));
        let mut out = Tensor::zeros(out_shape);
        let plane = ps.plane();
        for n in 0..xs.n {
            let (ys, xs_) = (pv.plane(n, 0), pv.plane(n, 1));
            for p in 0..plane {
                let (corners, _) = corners(xs.h, xs.w, ys[p], xs_[p]);
                for c in 0..xs.c {
                    let v = corners.sample(xv.plane(n, c));
                    out.data_mut()[(n * xs.c + c) * plane + p] = v;
                }
            }
        }
        Ok(self.push(out, Op::BilinearSample { x, positions }, &[x, positions]))
    }

    /// Deformable convolution with stride 1.
    ///
    /// `w` is `(cout, cin, k, k)`, `offsets` is `(n, 2*k*k, oh, ow)` with
    /// `oh = h + 2*pad - k + 1`.
    pub fn deformable_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, offsets: Var, pad: usize) -> Result<Var> {
        let (xs, ws, os) = (self.shape(x), self.shape(w), self.shape(offsets));
        if xs.c != ws.c || ws.h != ws.w {
            return Err(Error::ShapeMismatch {
                op: "deformable_conv2d",
                left: xs,
                right: ws,
            });
        }
        let k = ws.h;
        let g = Window::new(xs.c, xs.h, xs.w, k, 1, pad).ok_or_else(|| {
            Error::invalid("deformable_conv2d", format!("kernel {ws} does not fit input {xs}"))
        })?;
        if os.c != 2 * k * k {
            return Err(Error::invalid(
                "deformable_conv2d",
                format!("expected {} offset channels, got {}", 2 * k * k, os.c),
            ));
        }
        if (os.n, os.h, os.w) != (xs.n, g.oh, g.ow) {
            return Err(Error::ShapeMismatch {
                op: "deformable_conv2d",
                left: Shape::new(xs.n, 2 * k * k, g.oh, g.ow),
                right: os,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != Shape::bias(ws.n) {
                return Err(Error::ShapeMismatch {
                    op: "deformable_conv2d",
                    left: Shape::bias(ws.n),
                    right: self.shape(b),
                });
            }
        }
        ensure_finite("offset field", self.value(offsets))?;
        let out = deform_conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            self.value(offsets),
            pad,
        );
        let mut inputs = vec![x, w, offsets];
        inputs.extend(b);
        Ok(self.push(out, Op::DeformConv2d { x, w, b, offsets, pad }, &inputs))
    }
}

/// Output pixels processed together so a block of tap geometry stays in L1.
const PIXEL_BLOCK: usize = 256;

/// Sample geometry of every tap at every output pixel of one item,
/// tap-major: entry `t * oh * ow + p`.
fn tap_corners<T: Scalar>(
    g: &Window,
    offsets: &Tensor<T>,
    n: usize,
    with_slopes: bool,
) -> (Vec<Corners<T>>, Vec<CornerSlopes<T>>) {
    let kk = g.k * g.k;
    let mut out = Vec::with_capacity(kk * g.cols());
    let mut slopes = Vec::with_capacity(if with_slopes { kk * g.cols() } else { 0 });
    for t in 0..kk {
        let (ti, tj) = (t / g.k, t % g.k);
        let (oy_plane, ox_plane) = (offsets.plane(n, 2 * t), offsets.plane(n, 2 * t + 1));
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let p = oy * g.ow + ox;
                let base_y = (oy + ti) as f64 - g.pad as f64;
                let base_x = (ox + tj) as f64 - g.pad as f64;
                let py = T::from_f64_lossy(base_y) + oy_plane[p];
                let px = T::from_f64_lossy(base_x) + ox_plane[p];
                let (c, s) = corners(g.h, g.w, py, px);
                out.push(c);
                if with_slopes {
                    slopes.push(s);
                }
            }
        }
    }
    (out, slopes)
}

fn deform_columns<T: Scalar>(g: &Window, image: &[T], taps: &[Corners<T>], cols: &mut [T]) {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let ncols = g.cols();
    for t in 0..kk {
        for p0 in (0..ncols).step_by(PIXEL_BLOCK) {
            let p1 = (p0 + PIXEL_BLOCK).min(ncols);
            let tt = &taps[t * ncols + p0..t * ncols + p1];
            for c in 0..g.c {
                let src = &image[c * plane..(c + 1) * plane];
                let row = (c * kk + t) * ncols;
                for (v, corners) in cols[row + p0..row + p1].iter_mut().zip(tt) {
                    *v = corners.sample(src);
                }
            }
        }
    }
}

fn deform_window<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Window {
    let (xs, ws) = (x.shape(), w.shape());
    Window::new(xs.c, xs.h, xs.w, ws.h, 1, pad).expect("validated in forward")
}

pub(crate) fn deform_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    offsets: &Tensor<T>,
    pad: usize,
) -> Tensor<T> {
    let g = deform_window(x, w, pad);
    let (batch, cout) = (x.shape().n, w.shape().n);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(Shape::new(batch, cout, g.oh, g.ow));
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let (taps, _) = tap_corners(&g, offsets, n, false);
        deform_columns(&g, x.item(n), &taps, &mut cols);
        let yi = &mut out.data_mut()[n * cout * ncols..(n + 1) * cout * ncols];
        matmul(false, false, cout, ncols, rows, w.data(), &cols, T::zero(), yi);
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                for v in &mut yi[co * ncols..(co + 1) * ncols] {
                    *v += *bv;
                }
            }
        }
    }
    out
}

/// Gradient buffers filled by [`deform_conv_backward`]; `None` entries are skipped.
pub(crate) struct DeformGrads<'a, T> {
    pub x: Option<&'a mut [T]>,
    pub w: Option<&'a mut [T]>,
    pub b: Option<&'a mut [T]>,
    pub offsets: Option<&'a mut [T]>,
}

pub(crate) fn deform_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    pad: usize,
    dy: &[T],
    mut grads: DeformGrads<'_, T>,
) {
    let g = deform_window(x, w, pad);
    let (batch, cout) = (x.shape().n, w.shape().n);
    let (rows, ncols) = (g.rows(), g.cols());
    let kk = g.k * g.k;
    let plane = g.h * g.w;
    let in_len = g.c * plane;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let dyi = &dy[n * cout * ncols..(n + 1) * cout * ncols];
        if let Some(db) = grads.b.as_deref_mut() {
            for (co, gb) in db.iter_mut().enumerate() {
                *gb += dyi[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        let (taps, slopes) = tap_corners(&g, offsets, n, grads.offsets.is_some());
        let image = x.item(n);
        if let Some(dw) = grads.w.as_deref_mut() {
            deform_columns(&g, image, &taps, &mut cols);
            matmul(false, true, cout, rows, ncols, dyi, &cols, T::one(), dw);
        }
        if grads.x.is_none() && grads.offsets.is_none() {
            continue;
        }
        matmul(true, false, rows, ncols, cout, w.data(), dyi, T::zero(), &mut dcols);
        let mut dx = grads.x.as_deref_mut().map(|d| &mut d[n * in_len..(n + 1) * in_len]);
        let mut doff = grads
            .offsets
            .as_deref_mut()
            .map(|d| &mut d[n * 2 * kk * ncols..(n + 1) * 2 * kk * ncols]);
        for t in 0..kk {
            for p0 in (0..ncols).step_by(PIXEL_BLOCK) {
                let p1 = (p0 + PIXEL_BLOCK).min(ncols);
                let tt = &taps[t * ncols + p0..t * ncols + p1];
                let mut sy = [T::zero(); PIXEL_BLOCK];
                let mut sx = [T::zero(); PIXEL_BLOCK];
                for c in 0..g.c {
                    let row = (c * kk + t) * ncols;
                    let gcol = &dcols[row + p0..row + p1];
                    if let Some(dx) = dx.as_deref_mut() {
                        let dplane = &mut dx[c * plane..(c + 1) * plane];
                        for (gv, corners) in gcol.iter().zip(tt) {
                            corners.scatter(dplane, *gv);
                        }
                    }
                    if doff.is_some() {
                        let src = &image[c * plane..(c + 1) * plane];
                        let ss = &slopes[t * ncols + p0..t * ncols + p1];
                        for (j, ((gv, corners), sl)) in gcol.iter().zip(tt).zip(ss).enumerate() {
                            let (ay, ax) = sl.slopes(corners, src);
                            sy[j] += *gv * ay;
                            sx[j] += *gv * ax;
                        }
                    }
                }
                if let Some(doff) = doff.as_deref_mut() {
                    let (ylo, xlo) = (2 * t * ncols, (2 * t + 1) * ncols);
                    for j in 0..p1 - p0 {
                        doff[ylo + p0 + j] += sy[j];
                        doff[xlo + p0 + j] += sx[j];
                    }
                }
            }
        }
    }
}

pub(crate) fn sample_backward<T: Scalar>(
    x: &Tensor<T>,
    positions: &Tensor<T>,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dpos: Option<&mut [T]>,
) {
    let (xs, ps) = (x.shape(), positions.shape());
    let plane_out = ps.plane();
    let plane_in = xs.plane();
    for n in 0..xs.n {
        let (ys, xs_) = (positions.plane(n, 0), positions.plane(n, 1));
        for p in 0..plane_out {
            let (corners, slopes) = corners(xs.h, xs.w, ys[p], xs_[p]);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for c in 0..xs.c {
                let gv = dy[(n * xs.c + c) * plane_out + p];
                if let Some(dx) = dx.as_deref_mut() {
                    let base = (n * xs.c + c) * plane_in;
                    corners.scatter(&mut dx[base..base + plane_in], gv);
                }
                let (sy, sx) = slopes.slopes(&corners, x.plane(n, c));
                gy += gv * sy;
                gx += gv * sx;
            }
            if let Some(dp) = dpos.as_deref_mut() {
                dp[n * 2 * plane_out + p] += gy;
                dp[n * 2 * plane_out + plane_out + p] += gx;
            }
        }
    }
}

/// Companion 3x3 convolution producing the offset field of a `k x k`
/// deformable convolution. Parameters start at exactly zero, so a fresh
/// predictor yields regular-convolution behaviour.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    pub conv: Conv,
    pub k: usize,
}

impl OffsetPredictor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, k: usize) -> Self {
        OffsetPredictor {
            conv: Conv::with_kind(store, name, cin, 2 * k * k, 3, 1, 1, true),
            k,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }
}

/// Deformable convolution layer: kernel, bias and its offset predictor.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub conv: Conv,
    pub offsets: OffsetPredictor,
}

impl DeformConv {
    /// Stride-1 `k x k` layer; `pad = k / 2` keeps the spatial dims.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        DeformConv {
            conv: Conv::new(store, name, cin, cout, k, 1, k / 2),
            offsets: OffsetPredictor::new(store, &format!("{name}.offset"), cin, k),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let off = self.offsets.forward(g, p, x)?;
        g.deformable_conv2d(
            x,
            p.var(self.conv.weight),
            Some(p.var(self.conv.bias)),
            off,
            self.conv.pad,
        )
    }
}
