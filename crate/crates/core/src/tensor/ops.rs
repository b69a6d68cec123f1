//! Differentiable operations recorded on the [`Tape`].
//!
//! Shape checks here are `assert!`s: public module entry points validate
//! user-facing contracts and return typed errors before building graphs.

use super::data::{lit, Scalar, Tensor};
use super::tape::{Tape, Var};

/// Padding scheme for 1-D convolutions (stride is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// Left-pad by (K-1)*dilation: output at t sees inputs <= t only.
    Causal,
    /// Split (K-1)*dilation between the two ends (extra on the right).
    Same,
}

impl Pad {
    fn left(self, kernel: usize, dilation: usize) -> usize {
        let total = (kernel - 1) * dilation;
        match self {
            Pad::Causal => total,
            Pad::Same => total / 2,
        }
    }
}

#[inline]
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || g.clone());
                sink.add_with(b, || g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || g.clone());
                sink.add_with(b, || g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ca, cb) = (va, vb);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || g.zip_map(&cb, |x, y| x * y));
                sink.add_with(b, || g.zip_map(&ca, |x, y| x * y));
            })),
        )
    }

    pub fn scale_const(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let cc: T = lit(c);
        let out = va.map(|x| x * cc);
        self.push(
            out,
            self.needs_grad(a),
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || g.map(|x| x * cc));
            })),
        )
    }

    /// c - a, elementwise.
    pub fn sub_from_const(&self, c: f64, a: Var) -> Var {
        let va = self.value(a);
        let cc: T = lit(c);
        let out = va.map(|x| cc - x);
        self.push(
            out,
            self.needs_grad(a),
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || g.map(|x| -x));
            })),
        )
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&self, s: Var, x: Var) -> Var {
        let vs = self.value(s);
        assert_eq!(vs.numel(), 1, "scale_by expects a scalar var");
        let vx = self.value(x);
        let sv = vs.data()[0];
        let out = vx.map(|v| v * sv);
        let needs = self.needs_grad(s) || self.needs_grad(x);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(s, || {
                    let mut acc = T::zero();
                    for (gv, xv) in g.data().iter().zip(vx.data().iter()) {
                        acc = acc + *gv * *xv;
                    }
                    Tensor::scalar(acc)
                });
                sink.add_with(x, || g.map(|v| v * sv));
            })),
        )
    }

    // ---- activations ------------------------------------------------------

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let c: T = lit(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k: T = lit(0.044_715);
        let half: T = lit(0.5);
        let three: T = lit(3.0);
        let out = va.map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(
            out,
            self.needs_grad(a),
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || {
                    let mut dx = va.clone();
                    for (d, gv) in dx.data_mut().iter_mut().zip(g.data().iter()) {
                        let x = *d;
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *d = deriv * *gv;
                    }
                    dx
                });
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| T::one() / (T::one() + (-x).exp()));
        let y = out.clone();
        self.push(
            out,
            self.needs_grad(a),
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || {
                    g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv))
                });
            })),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(&va, &vb, m, k, n);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || {
                    // dA = g @ B^T
                    let mut da = Tensor::zeros(&[m, k]);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            for kk in 0..k {
                                da.data_mut()[i * k + kk] =
                                    da.data()[i * k + kk] + gv * vb.data()[kk * n + j];
                            }
                        }
                    }
                    da
                });
                sink.add_with(b, || {
                    // dB = A^T @ g
                    let mut db = Tensor::zeros(&[k, n]);
                    for i in 0..m {
                        for kk in 0..k {
                            let av = va.data()[i * k + kk];
                            for j in 0..n {
                                db.data_mut()[kk * n + j] =
                                    db.data()[kk * n + j] + av * g.data()[i * n + j];
                            }
                        }
                    }
                    db
                });
            })),
        )
    }

    /// Batched matmul: (N,m,k) x (N,k,n) -> (N,m,n).
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 3, "bmm lhs must be rank 3");
        assert_eq!(vb.shape().len(), 3, "bmm rhs must be rank 3");
        let (nb, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (nb2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(nb, nb2, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = Tensor::zeros(&[nb, m, n]);
        for bi in 0..nb {
            mm_accum(
                &va.data()[bi * m * k..(bi + 1) * m * k],
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || {
                    let mut da = Tensor::zeros(&[nb, m, k]);
                    for bi in 0..nb {
                        let go = bi * m * n;
                        let bo = bi * k * n;
                        let ao = bi * m * k;
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g.data()[go + i * n + j];
                                for kk in 0..k {
                                    da.data_mut()[ao + i * k + kk] = da.data()[ao + i * k + kk]
                                        + gv * vb.data()[bo + kk * n + j];
                                }
                            }
                        }
                    }
                    da
                });
                sink.add_with(b, || {
                    let mut db = Tensor::zeros(&[nb, k, n]);
                    for bi in 0..nb {
                        let go = bi * m * n;
                        let bo = bi * k * n;
                        let ao = bi * m * k;
                        for i in 0..m {
                            for kk in 0..k {
                                let av = va.data()[ao + i * k + kk];
                                for j in 0..n {
                                    db.data_mut()[bo + kk * n + j] =
                                        db.data()[bo + kk * n + j] + av * g.data()[go + i * n + j];
                                }
                            }
                        }
                    }
                    db
                });
            })),
        )
    }

    /// x (..., F) + b (F), b broadcast over all leading dims.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let f = *vx.shape().last().expect("add_bias needs rank >= 1");
        assert_eq!(vb.shape(), &[f], "bias shape");
        let rows = vx.numel() / f;
        let mut out = vx.clone();
        for r in 0..rows {
            for j in 0..f {
                out.data_mut()[r * f + j] = out.data()[r * f + j] + vb.data()[j];
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(b);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || g.clone());
                sink.add_with(b, || {
                    let mut db = Tensor::zeros(&[f]);
                    for r in 0..rows {
                        for j in 0..f {
                            db.data_mut()[j] = db.data()[j] + g.data()[r * f + j];
                        }
                    }
                    db
                });
            })),
        )
    }

    /// Affine map on the last axis: reshape to rows, matmul, bias.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let fin = *xs.last().expect("linear needs rank >= 1");
        let ws = self.shape(w);
        assert_eq!(ws[0], fin, "linear weight rows");
        let fout = ws[1];
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, fin]);
        let mut y = self.matmul(flat, w);
        if let Some(bv) = b {
            y = self.add_bias(y, bv);
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(fout);
        self.reshape(y, &out_shape)
    }

    // ---- convolutions -----------------------------------------------------

    /// 1-D convolution, stride 1: x (N,Cin,L), w (Cout,Cin,K), bias (Cout).
    /// Output length equals input length under either padding mode.
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, dilation: usize, pad: Pad) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.shape().len(), 3, "conv1d input rank");
        assert_eq!(vw.shape().len(), 3, "conv1d weight rank");
        let (n, cin, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, cin2, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(cin, cin2, "conv1d channel mismatch");
        let vb = b.map(|bv| {
            let t = self.value(bv);
            assert_eq!(t.shape(), &[cout], "conv1d bias shape");
            t
        });
        let left = pad.left(k, dilation);

        let mut out = Tensor::zeros(&[n, cout, len]);
        for ni in 0..n {
            for co in 0..cout {
                let bias = vb.as_ref().map_or(T::zero(), |t| t.data()[co]);
                for t in 0..len {
                    let mut acc = bias;
                    for ci in 0..cin {
                        for kk in 0..k {
                            let xi = (t + kk * dilation) as isize - left as isize;
                            if xi >= 0 && (xi as usize) < len {
                                acc = acc
                                    + vx.data()[(ni * cin + ci) * len + xi as usize]
                                        * vw.data()[(co * cin + ci) * k + kk];
                            }
                        }
                    }
                    out.data_mut()[(ni * cout + co) * len + t] = acc;
                }
            }
        }

        let needs =
            self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|bv| self.needs_grad(bv));
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&[n, cin, len]);
                    for ni in 0..n {
                        for co in 0..cout {
                            for t in 0..len {
                                let gv = g.data()[(ni * cout + co) * len + t];
                                for ci in 0..cin {
                                    for kk in 0..k {
                                        let xi = (t + kk * dilation) as isize - left as isize;
                                        if xi >= 0 && (xi as usize) < len {
                                            let o = (ni * cin + ci) * len + xi as usize;
                                            dx.data_mut()[o] = dx.data()[o]
                                                + gv * vw.data()[(co * cin + ci) * k + kk];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                sink.add_with(w, || {
                    let mut dw = Tensor::zeros(&[cout, cin, k]);
                    for ni in 0..n {
                        for co in 0..cout {
                            for t in 0..len {
                                let gv = g.data()[(ni * cout + co) * len + t];
                                for ci in 0..cin {
                                    for kk in 0..k {
                                        let xi = (t + kk * dilation) as isize - left as isize;
                                        if xi >= 0 && (xi as usize) < len {
                                            let o = (co * cin + ci) * k + kk;
                                            dw.data_mut()[o] = dw.data()[o]
                                                + gv * vx.data()[(ni * cin + ci) * len + xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dw
                });
                if let Some(bv) = b {
                    sink.add_with(bv, || {
                        let mut db = Tensor::zeros(&[cout]);
                        for ni in 0..n {
                            for co in 0..cout {
                                for t in 0..len {
                                    db.data_mut()[co] =
                                        db.data()[co] + g.data()[(ni * cout + co) * len + t];
                                }
                            }
                        }
                        db
                    });
                }
            })),
        )
    }

    /// Depth-wise 1-D convolution: x (N,C,L), w (C,K), bias (C). Each channel
    /// is filtered independently.
    pub fn conv1d_depthwise(&self, x: Var, w: Var, b: Option<Var>, dilation: usize, pad: Pad) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.shape().len(), 3, "depthwise input rank");
        assert_eq!(vw.shape().len(), 2, "depthwise weight rank");
        let (n, c, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c2, k) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(c, c2, "depthwise channel mismatch");
        let vb = b.map(|bv| {
            let t = self.value(bv);
            assert_eq!(t.shape(), &[c], "depthwise bias shape");
            t
        });
        let left = pad.left(k, dilation);

        let mut out = Tensor::zeros(&[n, c, len]);
        for ni in 0..n {
            for ci in 0..c {
                let bias = vb.as_ref().map_or(T::zero(), |t| t.data()[ci]);
                for t in 0..len {
                    let mut acc = bias;
                    for kk in 0..k {
                        let xi = (t + kk * dilation) as isize - left as isize;
                        if xi >= 0 && (xi as usize) < len {
                            acc = acc
                                + vx.data()[(ni * c + ci) * len + xi as usize] * vw.data()[ci * k + kk];
                        }
                    }
                    out.data_mut()[(ni * c + ci) * len + t] = acc;
                }
            }
        }

        let needs =
            self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|bv| self.needs_grad(bv));
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&[n, c, len]);
                    for ni in 0..n {
                        for ci in 0..c {
                            for t in 0..len {
                                let gv = g.data()[(ni * c + ci) * len + t];
                                for kk in 0..k {
                                    let xi = (t + kk * dilation) as isize - left as isize;
                                    if xi >= 0 && (xi as usize) < len {
                                        let o = (ni * c + ci) * len + xi as usize;
                                        dx.data_mut()[o] = dx.data()[o] + gv * vw.data()[ci * k + kk];
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                sink.add_with(w, || {
                    let mut dw = Tensor::zeros(&[c, k]);
                    for ni in 0..n {
                        for ci in 0..c {
                            for t in 0..len {
                                let gv = g.data()[(ni * c + ci) * len + t];
                                for kk in 0..k {
                                    let xi = (t + kk * dilation) as isize - left as isize;
                                    if xi >= 0 && (xi as usize) < len {
                                        dw.data_mut()[ci * k + kk] = dw.data()[ci * k + kk]
                                            + gv * vx.data()[(ni * c + ci) * len + xi as usize];
                                    }
                                }
                            }
                        }
                    }
                    dw
                });
                if let Some(bv) = b {
                    sink.add_with(bv, || {
                        let mut db = Tensor::zeros(&[c]);
                        for ni in 0..n {
                            for ci in 0..c {
                                for t in 0..len {
                                    db.data_mut()[ci] =
                                        db.data()[ci] + g.data()[(ni * c + ci) * len + t];
                                }
                            }
                        }
                        db
                    });
                }
            })),
        )
    }

    // ---- normalization and softmax -----------------------------------------

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let f = *vx.shape().last().expect("layer_norm rank");
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert_eq!(vg.shape(), &[f], "layer_norm gain shape");
        assert_eq!(vb.shape(), &[f], "layer_norm bias shape");
        let rows = vx.numel() / f;
        let epst: T = lit(eps);
        let fl: T = lit(f as f64);

        let mut out = Tensor::zeros(vx.shape());
        let mut xhat = Tensor::zeros(vx.shape());
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * f..(r + 1) * f];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / fl;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / fl;
            let inv = T::one() / (var + epst).sqrt();
            inv_std[r] = inv;
            for j in 0..f {
                let xh = (row[j] - mean) * inv;
                xhat.data_mut()[r * f + j] = xh;
                out.data_mut()[r * f + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }

        let needs = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for r in 0..rows {
                        // dxhat = g * gain; dx = inv/F * (F*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..f {
                            let dxh = g.data()[r * f + j] * vg.data()[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xhat.data()[r * f + j];
                        }
                        for j in 0..f {
                            let dxh = g.data()[r * f + j] * vg.data()[j];
                            let xh = xhat.data()[r * f + j];
                            dx.data_mut()[r * f + j] =
                                inv_std[r] / fl * (fl * dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                    dx
                });
                sink.add_with(gain, || {
                    let mut dg = Tensor::zeros(&[f]);
                    for r in 0..rows {
                        for j in 0..f {
                            dg.data_mut()[j] =
                                dg.data()[j] + g.data()[r * f + j] * xhat.data()[r * f + j];
                        }
                    }
                    dg
                });
                sink.add_with(bias, || {
                    let mut db = Tensor::zeros(&[f]);
                    for r in 0..rows {
                        for j in 0..f {
                            db.data_mut()[j] = db.data()[j] + g.data()[r * f + j];
                        }
                    }
                    db
                });
            })),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut out = Tensor::zeros(vx.shape());
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = vx.data()[at(0)];
                for j in 1..len {
                    let v = vx.data()[at(j)];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for j in 0..len {
                    let e = (vx.data()[at(j)] - mx).exp();
                    out.data_mut()[at(j)] = e;
                    denom = denom + e;
                }
                for j in 0..len {
                    out.data_mut()[at(j)] = out.data()[at(j)] / denom;
                }
            }
        }
        let y = out.clone();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(y.shape());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot = dot + g.data()[at(j)] * y.data()[at(j)];
                            }
                            for j in 0..len {
                                dx.data_mut()[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                            }
                        }
                    }
                    dx
                });
            })),
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Mean over the given axes (sorted, unique); reduced axes are removed.
    pub fn reduce_mean(&self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        let rank = vx.shape().len();
        let mut keep = vec![true; rank];
        for &a in axes {
            assert!(a < rank, "reduce axis out of range");
            keep[a] = false;
        }
        let out_shape: Vec<usize> = vx
            .shape()
            .iter()
            .zip(&keep)
            .filter_map(|(&d, &k)| k.then_some(d))
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = vx
            .shape()
            .iter()
            .zip(&keep)
            .filter_map(|(&d, &k)| (!k).then_some(d))
            .product();
        let countt: T = lit(count as f64);

        // Flat-index mapping input -> output.
        let in_shape = vx.shape().to_vec();
        let map_index = move |flat: usize, in_shape: &[usize], keep: &[bool], out_shape: &[usize]| {
            let mut rem = flat;
            let mut idx = vec![0usize; in_shape.len()];
            for ax in (0..in_shape.len()).rev() {
                idx[ax] = rem % in_shape[ax];
                rem /= in_shape[ax];
            }
            let mut o = 0usize;
            let mut oi = 0usize;
            for ax in 0..in_shape.len() {
                if keep[ax] {
                    o = o * out_shape[oi] + idx[ax];
                    oi += 1;
                }
            }
            o
        };

        let mut out = Tensor::zeros(&out_shape);
        for flat in 0..vx.numel() {
            let o = map_index(flat, &in_shape, &keep, &out_shape);
            out.data_mut()[o] = out.data()[o] + vx.data()[flat];
        }
        for v in out.data_mut() {
            *v = *v / countt;
        }

        let keep2 = keep.clone();
        let in_shape2 = in_shape.clone();
        let out_shape2 = out_shape.clone();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&in_shape2);
                    for flat in 0..dx.numel() {
                        let o = map_index(flat, &in_shape2, &keep2, &out_shape2);
                        dx.data_mut()[flat] = g.data()[o] / countt;
                    }
                    dx
                });
            })),
        )
    }

    /// Max over one axis; ties resolve to the first occurrence.
    pub fn reduce_max(&self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut out_shape: Vec<usize> = vx.shape().to_vec();
        out_shape.remove(axis);
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };

        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut best = vx.data()[at(0)];
                let mut bj = 0usize;
                for j in 1..len {
                    let v = vx.data()[at(j)];
                    if v > best {
                        best = v;
                        bj = j;
                    }
                }
                out.data_mut()[o * inner + i] = best;
                argmax[o * inner + i] = bj;
            }
        }

        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&in_shape);
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            dx.data_mut()[(o * len + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                    dx
                });
            })),
        )
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let out = Tensor::scalar(vx.sum());
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || Tensor::full(&shape, g.data()[0]));
            })),
        )
    }

    /// Mean squared error between same-shape tensors -> scalar.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n: T = lit(va.numel() as f64);
        let mut acc = T::zero();
        for (&x, &y) in va.data().iter().zip(vb.data().iter()) {
            let d = x - y;
            acc = acc + d * d;
        }
        let out = Tensor::scalar(acc / n);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let two: T = lit(2.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let g0 = g.data()[0];
                sink.add_with(a, || {
                    va.zip_map(&vb, |x, y| two * (x - y) / n * g0)
                });
                sink.add_with(b, || {
                    va.zip_map(&vb, |x, y| -(two * (x - y) / n * g0))
                });
            })),
        )
    }

    // ---- structure ----------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = vx.reshaped(shape);
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || g.clone().reshaped(&old));
            })),
        )
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        let rank = vx.shape().len();
        assert_eq!(perm.len(), rank, "permute rank");
        let in_shape = vx.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let perm_v = perm.to_vec();

        let out = permute_raw(&vx, &perm_v, &out_shape);
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm_v.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let in_shape_g: Vec<usize> = inv.iter().map(|&p| g.shape()[p]).collect();
                    permute_raw(g, &inv, &in_shape_g)
                });
            })),
        )
    }

    /// Select index `i` along `axis`, removing the axis.
    pub fn index_axis(&self, x: Var, axis: usize, i: usize) -> Var {
        let vx = self.value(x);
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        assert!(i < len, "index_axis out of range");
        let mut out_shape: Vec<usize> = vx.shape().to_vec();
        out_shape.remove(axis);
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            for j in 0..inner {
                out.data_mut()[o * inner + j] = vx.data()[(o * len + i) * inner + j];
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&in_shape);
                    for o in 0..outer {
                        for j in 0..inner {
                            dx.data_mut()[(o * len + i) * inner + j] = g.data()[o * inner + j];
                        }
                    }
                    dx
                });
            })),
        )
    }

    /// Contiguous slice [start, start+len) of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let f = *vx.shape().last().expect("slice_last rank");
        assert!(start + len <= f, "slice_last out of range");
        let rows = vx.numel() / f;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = len;
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            for j in 0..len {
                out.data_mut()[r * len + j] = vx.data()[r * f + start + j];
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&in_shape);
                    for r in 0..rows {
                        for j in 0..len {
                            dx.data_mut()[r * f + start + j] = g.data()[r * len + j];
                        }
                    }
                    dx
                });
            })),
        )
    }

    /// Concatenate along the last axis; all parts share the leading shape.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last of nothing");
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = vals[0].shape()[..vals[0].shape().len() - 1].to_vec();
        for v in &vals {
            assert_eq!(&v.shape()[..v.shape().len() - 1], lead.as_slice(), "concat leading dims");
        }
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            let mut off = 0usize;
            for (v, &w) in vals.iter().zip(&widths) {
                for j in 0..w {
                    out.data_mut()[r * total + off + j] = v.data()[r * w + j];
                }
                off += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let parts_v = parts.to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let mut off = 0usize;
                for (pi, &p) in parts_v.iter().enumerate() {
                    let w = widths[pi];
                    let start = off;
                    sink.add_with(p, || {
                        let mut lead_shape = lead.clone();
                        lead_shape.push(w);
                        let mut dp = Tensor::zeros(&lead_shape);
                        for r in 0..rows {
                            for j in 0..w {
                                dp.data_mut()[r * w + j] = g.data()[r * total + start + j];
                            }
                        }
                        dp
                    });
                    off += w;
                }
            })),
        )
    }

    /// Repeat x (S...) across a new trailing axis of size `d` -> (S..., d).
    pub fn broadcast_last(&self, x: Var, d: usize) -> Var {
        let vx = self.value(x);
        let rows = vx.numel();
        let mut out_shape = vx.shape().to_vec();
        out_shape.push(d);
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            for j in 0..d {
                out.data_mut()[r * d + j] = vx.data()[r];
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&in_shape);
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..d {
                            acc = acc + g.data()[r * d + j];
                        }
                        dx.data_mut()[r] = acc;
                    }
                    dx
                });
            })),
        )
    }

    /// out[s, f] = a[s] * x[s, f] where a's shape equals x's leading dims.
    pub fn mul_bcast_last(&self, a: Var, x: Var) -> Var {
        let (va, vx) = (self.value(a), self.value(x));
        let lead = &vx.shape()[..vx.shape().len() - 1];
        assert_eq!(va.shape(), lead, "mul_bcast_last leading dims");
        let f = *vx.shape().last().unwrap();
        let rows = va.numel();
        let mut out = vx.clone();
        for r in 0..rows {
            let av = va.data()[r];
            for j in 0..f {
                out.data_mut()[r * f + j] = out.data()[r * f + j] * av;
            }
        }
        let needs = self.needs_grad(a) || self.needs_grad(x);
        let a_shape = va.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(a, || {
                    let mut da = Tensor::zeros(&a_shape);
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..f {
                            acc = acc + g.data()[r * f + j] * vx.data()[r * f + j];
                        }
                        da.data_mut()[r] = acc;
                    }
                    da
                });
                sink.add_with(x, || {
                    let mut dx = g.clone();
                    for r in 0..rows {
                        let av = va.data()[r];
                        for j in 0..f {
                            dx.data_mut()[r * f + j] = dx.data()[r * f + j] * av;
                        }
                    }
                    dx
                });
            })),
        )
    }

    // ---- resampling ----------------------------------------------------------

    /// Linear interpolation along axis 1 of x (B, l_in, F) up to l_out tokens.
    /// Endpoint positions use exact integer arithmetic so identity and
    /// endpoints are bit-exact.
    pub fn upsample_linear_axis1(&self, x: Var, l_out: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "upsample input rank");
        let (b, l_in, f) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(l_in <= l_out, "upsample only enlarges ({l_in} > {l_out})");

        // (i0, i1, frac) per output token.
        let plan: Vec<(usize, usize, T)> = (0..l_out)
            .map(|t| {
                if l_in == 1 || l_out == 1 {
                    return (0usize, 0usize, T::zero());
                }
                let num = t * (l_in - 1);
                let den = l_out - 1;
                let i0 = num / den;
                let rem = num % den;
                if rem == 0 {
                    (i0, i0, T::zero())
                } else {
                    let frac: T = lit(rem as f64 / den as f64);
                    (i0, i0 + 1, frac)
                }
            })
            .collect();

        let mut out = Tensor::zeros(&[b, l_out, f]);
        for bi in 0..b {
            for (t, &(i0, i1, frac)) in plan.iter().enumerate() {
                for j in 0..f {
                    let v0 = vx.data()[(bi * l_in + i0) * f + j];
                    let v = if i0 == i1 {
                        v0
                    } else {
                        let v1 = vx.data()[(bi * l_in + i1) * f + j];
                        (T::one() - frac) * v0 + frac * v1
                    };
                    out.data_mut()[(bi * l_out + t) * f + j] = v;
                }
            }
        }
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&[b, l_in, f]);
                    for bi in 0..b {
                        for (t, &(i0, i1, frac)) in plan.iter().enumerate() {
                            for j in 0..f {
                                let gv = g.data()[(bi * l_out + t) * f + j];
                                if i0 == i1 {
                                    let o = (bi * l_in + i0) * f + j;
                                    dx.data_mut()[o] = dx.data()[o] + gv;
                                } else {
                                    let o0 = (bi * l_in + i0) * f + j;
                                    let o1 = (bi * l_in + i1) * f + j;
                                    dx.data_mut()[o0] = dx.data()[o0] + (T::one() - frac) * gv;
                                    dx.data_mut()[o1] = dx.data()[o1] + frac * gv;
                                }
                            }
                        }
                    }
                    dx
                });
            })),
        )
    }

    /// Adaptive max pooling along axis 1 of x (B, L, F) into `bins` bins.
    /// Bin i covers [floor(i*L/bins), ceil((i+1)*L/bins)); bins tile the axis
    /// with every index in at least one bin.
    pub fn adaptive_max_pool_axis1(&self, x: Var, bins: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "pool input rank");
        let (b, l, f) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(bins >= 1 && bins <= l, "pool bins {bins} vs length {l}");

        let bounds: Vec<(usize, usize)> = (0..bins)
            .map(|i| {
                let lo = i * l / bins;
                let hi = ((i + 1) * l).div_ceil(bins);
                (lo, hi)
            })
            .collect();

        let mut out = Tensor::zeros(&[b, bins, f]);
        let mut argmax = vec![0usize; b * bins * f];
        for bi in 0..b {
            for (i, &(lo, hi)) in bounds.iter().enumerate() {
                for j in 0..f {
                    let mut best = vx.data()[(bi * l + lo) * f + j];
                    let mut bt = lo;
                    for t in lo + 1..hi {
                        let v = vx.data()[(bi * l + t) * f + j];
                        if v > best {
                            best = v;
                            bt = t;
                        }
                    }
                    out.data_mut()[(bi * bins + i) * f + j] = best;
                    argmax[(bi * bins + i) * f + j] = bt;
                }
            }
        }
        self.push(
            out,
            self.needs_grad(x),
            Some(Box::new(move |g, sink| {
                sink.add_with(x, || {
                    let mut dx = Tensor::zeros(&[b, l, f]);
                    for bi in 0..b {
                        for i in 0..bins {
                            for j in 0..f {
                                let t = argmax[(bi * bins + i) * f + j];
                                let o = (bi * l + t) * f + j;
                                dx.data_mut()[o] = dx.data()[o] + g.data()[(bi * bins + i) * f + j];
                            }
                        }
                    }
                    dx
                });
            })),
        )
    }
}

/// Bin boundaries used by adaptive max pooling; exposed for coverage tests.
pub fn adaptive_pool_bounds(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| (i * len / bins, ((i + 1) * len).div_ceil(bins)))
        .collect()
}

fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[m, n]);
    mm_accum(a.data(), b.data(), out.data_mut(), m, k, n);
    out
}

#[inline]
fn mm_accum<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
}

fn permute_raw<T: Scalar>(x: &Tensor<T>, perm: &[usize], out_shape: &[usize]) -> Tensor<T> {
    let rank = perm.len();
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_shape[ax + 1];
    }
    let mut out = Tensor::zeros(out_shape);
    let numel = out.numel();
    let mut out_idx = vec![0usize; rank];
    for flat in 0..numel {
        let mut rem = flat;
        for ax in (0..rank).rev() {
            out_idx[ax] = rem % out_shape[ax];
            rem /= out_shape[ax];
        }
        let mut src = 0usize;
        for ax in 0..rank {
            src += out_idx[ax] * in_strides[perm[ax]];
        }
        out.data_mut()[flat] = x.data()[src];
    }
    out
}
