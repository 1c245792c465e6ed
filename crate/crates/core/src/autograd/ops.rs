use super::conv::{self, Window};
use super::{put_slot, take_slot, Graph, Node, Op, Var};
use crate::deform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(Tensor::from_vec(s, data)?, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        Ok(self.push(Tensor::from_vec(s, data)?, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), &[a]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            let s = self.shape(b);
            if s != Shape::bias(cout) {
                return Err(Error::ShapeMismatch {
                    op,
                    left: Shape::bias(cout),
                    right: s,
                });
            }
        }
        Ok(())
    }

    /// 2D convolution, kernel `(cout, cin, k, k)`, optional bias `(1, cout, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.c != ws.c || ws.h != ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        self.check_bias("conv2d", b, ws.n)?;
        let g = Window::new(xs.c, xs.h, xs.w, ws.h, stride, pad).ok_or_else(|| {
            Error::invalid("conv2d", format!("kernel {ws} does not fit input {xs} with pad {pad}"))
        })?;
        let data = conv::conv_forward(
            &g,
            xs.n,
            ws.n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(Shape::new(xs.n, ws.n, g.oh, g.ow), data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution, kernel `(cin, cout, k, k)`.
    ///
    /// Output extent is `(h - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.c != ws.n || ws.h != ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 || output_pad >= stride {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("need stride >= 1 and output_pad < stride, got {stride}, {output_pad}"),
            ));
        }
        self.check_bias("conv_transpose2d", b, ws.c)?;
        let k = ws.h;
        let extent = |len: usize| ((len - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (extent(xs.h.max(1)), extent(xs.w.max(1))) else {
            return Err(Error::invalid("conv_transpose2d", "padding exceeds output extent"));
        };
        let g = Window {
            c: ws.c,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: xs.h,
            ow: xs.w,
        };
        let data = conv::conv_transpose_forward(
            &g,
            xs.n,
            xs.c,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(Shape::new(xs.n, ws.c, oh, ow), data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs))
    }

    /// Max pooling with a `k x k` window; the window must tile the input exactly.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "window and stride must be positive"));
        }
        let tiles = |len: usize| len >= k && (len - k).is_multiple_of(stride);
        if !tiles(s.h) || !tiles(s.w) {
            return Err(Error::invalid(
                "max_pool2d",
                format!("spatial dims {}x{} not tiled by window {k} stride {stride}", s.h, s.w),
            ));
        }
        let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
        let os = Shape::new(s.n, s.c, oh, ow);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = s.index(n, c, oy * stride, ox * stride);
                        for i in 0..k {
                            for j in 0..k {
                                let idx = s.index(n, c, oy * stride + i, ox * stride + j);
                                if xv[idx] > xv[best] {
                                    best = idx;
                                }
                            }
                        }
                        data.push(xv[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_vec(os, data)?, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: s0,
                    right: s,
                });
            }
            c += s.c;
        }
        let os = Shape::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(n));
            }
        }
        Ok(self.push(Tensor::from_vec(os, data)?, Op::Concat(xs.to_vec()), xs))
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x));
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Mean over pixels of the class-weighted negative log softmax
    /// probability of the target class.
    ///
    /// `target` holds one label per pixel in `(n, h, w)` order.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits);
        let pixels = s.n * s.plane();
        if target.len() != pixels {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} target labels for logits of shape {s}", target.len()),
            ));
        }
        if weights.len() != s.c {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} class weights for {} channels", weights.len(), s.c),
            ));
        }
        if let Some((index, &value)) = target.iter().enumerate().find(|(_, &t)| t as usize >= s.c) {
            return Err(Error::InvalidLabel {
                value: value as u32,
                index,
            });
        }
        let probs = softmax_channels(self.value(logits));
        let z = self.value(logits).data();
        let plane = s.plane();
        let mut total = T::zero();
        for (i, &t) in target.iter().enumerate() {
            let (n, p) = (i / plane, i % plane);
            let base = n * s.c * plane + p;
            let m = (0..s.c).map(|c| z[base + c * plane]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..s.c).map(|c| (z[base + c * plane] - m).exp()).sum::<T>().ln();
            total += weights[t as usize] * (lse - z[base + t as usize * plane]);
        }
        let loss = total / T::from_f64_lossy(pixels as f64);
        let op = Op::CrossEntropy {
            logits,
            target: target.to_vec(),
            weights: weights.to_vec(),
            probs: probs.into_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }
}

/// Channel-wise softmax of a plain tensor.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let xv = x.data();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let m = (0..s.c)
                .map(|c| xv[base + c * plane + p])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in 0..s.c {
                let e = (xv[base + c * plane + p] - m).exp();
                out[base + c * plane + p] = e;
                denom += e;
            }
            for c in 0..s.c {
                out[base + c * plane + p] /= denom;
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Propagate the output gradient `g` of node `id` into its inputs.
pub(super) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                let mut slot = take_slot(nodes, grads, v);
                if let Some(d) = slot.as_mut() {
                    add_into(d, g);
                }
                put_slot(grads, v, slot);
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                let mut slot = take_slot(nodes, grads, v);
                if let Some(d) = slot.as_mut() {
                    for ((d, gi), o) in d.iter_mut().zip(g).zip(val(other).data()) {
                        *d += *gi * *o;
                    }
                }
                put_slot(grads, v, slot);
            }
        }
        Op::Sum(a) => {
            let mut slot = take_slot(nodes, grads, *a);
            if let Some(d) = slot.as_mut() {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }
            put_slot(grads, *a, slot);
        }
        Op::Relu(x) => {
            let mut slot = take_slot(nodes, grads, *x);
            if let Some(d) = slot.as_mut() {
                for ((d, gi), xv) in d.iter_mut().zip(g).zip(val(*x).data()) {
                    if *xv > T::zero() {
                        *d += *gi;
                    }
                }
            }
            put_slot(grads, *x, slot);
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let geom = Window::new(xs.c, xs.h, xs.w, ws.h, *stride, *pad).expect("validated in forward");
            let mut dx = take_slot(nodes, grads, *x);
            let mut dw = take_slot(nodes, grads, *w);
            let mut db = b.and_then(|b| take_slot(nodes, grads, b));
            conv::conv_backward(
                &geom,
                xs.n,
                ws.n,
                val(*x).data(),
                val(*w).data(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            put_slot(grads, *x, dx);
            put_slot(grads, *w, dw);
            if let Some(b) = b {
                put_slot(grads, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, stride, pad } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let os = nodes[id].value.shape();
            let geom = Window {
                c: ws.c,
                h: os.h,
                w: os.w,
                k: ws.h,
                stride: *stride,
                pad: *pad,
                oh: xs.h,
                ow: xs.w,
            };
            let mut dx = take_slot(nodes, grads, *x);
            let mut dw = take_slot(nodes, grads, *w);
            let mut db = b.and_then(|b| take_slot(nodes, grads, b));
            conv::conv_transpose_backward(
                &geom,
                xs.n,
                xs.c,
                val(*x).data(),
                val(*w).data(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            put_slot(grads, *x, dx);
            put_slot(grads, *w, dw);
            if let Some(b) = b {
                put_slot(grads, *b, db);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut slot = take_slot(nodes, grads, *x);
            if let Some(d) = slot.as_mut() {
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += *gi;
                }
            }
            put_slot(grads, *x, slot);
        }
        Op::Concat(xs) => {
            let os = nodes[id].value.shape();
            let plane = os.plane();
            let mut offset = 0;
            for &v in xs {
                let c = val(v).shape().c;
                let mut slot = take_slot(nodes, grads, v);
                if let Some(d) = slot.as_mut() {
                    let len = c * plane;
                    for n in 0..os.n {
                        let src = n * os.c * plane + offset * plane;
                        add_into(&mut d[n * len..(n + 1) * len], &g[src..src + len]);
                    }
                }
                put_slot(grads, v, slot);
                offset += c;
            }
        }
        Op::Softmax(x) => {
            let y = nodes[id].value.data();
            let s = nodes[id].value.shape();
            let plane = s.plane();
            let mut slot = take_slot(nodes, grads, *x);
            if let Some(d) = slot.as_mut() {
                for n in 0..s.n {
                    let base = n * s.c * plane;
                    for p in 0..plane {
                        let dot: T = (0..s.c)
                            .map(|c| g[base + c * plane + p] * y[base + c * plane + p])
                            .sum();
                        for c in 0..s.c {
                            let i = base + c * plane + p;
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            put_slot(grads, *x, slot);
        }
        Op::CrossEntropy {
            logits,
            target,
            weights,
            probs,
        } => {
            let s = val(*logits).shape();
            let plane = s.plane();
            let scale = g[0] / T::from_f64_lossy(target.len() as f64);
            let mut slot = take_slot(nodes, grads, *logits);
            if let Some(d) = slot.as_mut() {
                for (i, &t) in target.iter().enumerate() {
                    let (n, p) = (i / plane, i % plane);
                    let base = n * s.c * plane + p;
                    let wt = weights[t as usize] * scale;
                    for c in 0..s.c {
                        let hot = if c == t as usize { T::one() } else { T::zero() };
                        d[base + c * plane] += wt * (probs[base + c * plane] - hot);
                    }
                }
            }
            put_slot(grads, *logits, slot);
        }
        Op::BilinearSample { x, positions } => {
            let mut dx = take_slot(nodes, grads, *x);
            let mut dp = take_slot(nodes, grads, *positions);
            deform::sample_backward(val(*x), val(*positions), g, dx.as_deref_mut(), dp.as_deref_mut());
            put_slot(grads, *x, dx);
            put_slot(grads, *positions, dp);
        }
        Op::DeformConv2d { x, w, b, offsets, pad } => {
            let mut dx = take_slot(nodes, grads, *x);
            let mut dw = take_slot(nodes, grads, *w);
            let mut db = b.and_then(|b| take_slot(nodes, grads, b));
            let mut doff = take_slot(nodes, grads, *offsets);
            deform::deform_conv_backward(
                val(*x),
                val(*w),
                val(*offsets),
                *pad,
                g,
                deform::DeformGrads {
                    x: dx.as_deref_mut(),
                    w: dw.as_deref_mut(),
                    b: db.as_deref_mut(),
                    offsets: doff.as_deref_mut(),
                },
            );
            put_slot(grads, *x, dx);
            put_slot(grads, *w, dw);
            if let Some(b) = b {
                put_slot(grads, *b, db);
            }
            put_slot(grads, *offsets, doff);
        }
    }
}
