use super::{Tape, Var};
use crate::linalg::{col2im, gemm, im2col, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

fn matmul_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) -> (usize, usize, usize) {
    assert_eq!(a.len(), 2, "matmul lhs must be rank 2");
    assert_eq!(b.len(), 2, "matmul rhs must be rank 2");
    let (m, k) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (k2, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {a:?} x {b:?}");
    (m, k, n)
}

/// Plain `op(a) * op(b)`.
pub(crate) fn matmul_values<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (m, k, n) = matmul_dims(a.shape(), ta, b.shape(), tb);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, T::one(), a.data(), ta, b.data(), tb, T::zero(), out.data_mut());
    out
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_values<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(d[base + l * inner]);
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (d[base + l * inner] - mx).exp();
                d[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                d[base + l * inner] /= sum;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// `op(a) * op(b)` for rank-2 values, transposes applied per flag.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul_values(self.value(a), ta, self.value(b), tb);
        self.push(out, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let ga = ctx.needs[0].then(|| {
                if ta {
                    matmul_values(bv, tb, g, true)
                } else {
                    matmul_values(g, false, bv, !tb)
                }
            });
            let gb = ctx.needs[1].then(|| {
                if tb {
                    matmul_values(g, true, av, ta)
                } else {
                    matmul_values(av, !ta, g, false)
                }
            });
            vec![ga, gb]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let out = softmax_values(self.value(x), axis);
        self.push(out, &[x], move |ctx| {
            let (outer, len, inner) = axis_split(ctx.output.shape(), axis);
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut dx = Tensor::zeros(ctx.output.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for l in 0..len {
                        dot += g[base + l * inner] * y[base + l * inner];
                    }
                    for l in 0..len {
                        let at = base + l * inner;
                        d[at] = y[at] * (g[at] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Square-kernel 2-D convolution. `w` is `[Cout, Cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(ws[1], cin, "conv2d input channels {cin} vs weight {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d expects square kernels");
        let cout = ws[0];
        let geom = ConvGeom::new(cin, h, wd, ws[2], stride, pad);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let col = im2col(self.value(x).data(), &geom);
        let mut out = Tensor::zeros(&[cout, geom.oh, geom.ow]);
        gemm(cout, rows, cols, T::one(), self.value(w).data(), false, &col, false, T::zero(), out.data_mut());
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.len(), cout, "conv2d bias length");
            for (co, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push(out, &parents, move |ctx| {
            let g = ctx.grad.data();
            let wv = ctx.inputs[1];
            let gx = ctx.needs[0].then(|| {
                let mut dcol = vec![T::zero(); rows * cols];
                gemm(rows, cout, cols, T::one(), wv.data(), true, g, false, T::zero(), &mut dcol);
                Tensor::from_vec(&[cin, h, wd], col2im(&dcol, &geom)).expect("conv dx")
            });
            let gw = ctx.needs[1].then(|| {
                let col = im2col(ctx.inputs[0].data(), &geom);
                let mut dw = Tensor::zeros(wv.shape());
                gemm(cout, cols, rows, T::one(), g, false, &col, true, T::zero(), dw.data_mut());
                dw
            });
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| channel_sums(g, cout, cols)));
            }
            res
        })
    }

    /// Transposed convolution; `w` is `[Cin, Cout, k, k]`.
    /// Output size is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be rank 4");
        assert_eq!(ws[0], cin, "conv_transpose2d input channels");
        let (cout, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad);
        assert_eq!((geom.oh, geom.ow), (h, wd), "conv_transpose2d geometry");
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        gemm(rows, cin, cols, T::one(), self.value(w).data(), true, self.value(x).data(), false, T::zero(), &mut col);
        let mut out = Tensor::from_vec(&[cout, oh, ow], col2im(&col, &geom)).expect("deconv shape");
        if let Some(b) = b {
            let bias = self.value(b);
            for (co, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push(out, &parents, move |ctx| {
            let dcol = im2col(ctx.grad.data(), &geom);
            let gx = ctx.needs[0].then(|| {
                let mut dx = Tensor::zeros(&[cin, h, wd]);
                gemm(cin, rows, cols, T::one(), ctx.inputs[1].data(), false, &dcol, false, T::zero(), dx.data_mut());
                dx
            });
            let gw = ctx.needs[1].then(|| {
                let mut dw = Tensor::zeros(ctx.inputs[1].shape());
                gemm(cin, cols, rows, T::one(), ctx.inputs[0].data(), false, &dcol, true, T::zero(), dw.data_mut());
                dw
            });
            let mut res = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| channel_sums(ctx.grad.data(), cout, oh * ow)));
            }
            res
        })
    }

    /// Layer normalization over every element of `x`, with element-wise affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = T::lit(xv.len() as f64);
        let mean = xv.sum() / n;
        let var = xv.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
        let xhat = xv.map(|v| (v - mean) * inv);
        let out = xhat
            .zip_map(self.value(gamma), |a, g| a * g)
            .zip_map(self.value(beta), |a, b| a + b);
        self.push(out, &[x, gamma, beta], move |ctx| {
            let g = ctx.grad;
            let dxhat = g.zip_map(ctx.inputs[1], |a, b| a * b);
            let m1 = dxhat.sum() / n;
            let m2 = dxhat.zip_map(&xhat, |a, b| a * b).sum() / n;
            let dx = dxhat.zip_map(&xhat, |d, xh| inv * (d - m1 - xh * m2));
            vec![
                ctx.needs[0].then_some(dx),
                ctx.needs[1].then(|| g.zip_map(&xhat, |a, b| a * b)),
                ctx.needs[2].then(|| g.clone()),
            ]
        })
    }

    /// 2x2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                            let v = xv.data()[idx];
                            if v > best {
                                best = v;
                                at = idx;
                            }
                        }
                    }
                    let o = (ch * oh + y) * ow + xx;
                    out.data_mut()[o] = best;
                    argmax[o] = at;
                }
            }
        }
        self.push(out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (o, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src] += ctx.grad.data()[o];
            }
            vec![Some(dx)]
        })
    }

    /// Cost volume over a `(2n+1)^2` displacement grid, normalized by channel count.
    ///
    /// Channel `d` holds offset `(dx, dy) = (d mod (2n+1) - n, d div (2n+1) - n)`;
    /// reads of `f2` outside the frame count as zero.
    pub fn correlation(&mut self, f1: Var, f2: Var, n: usize) -> Var {
        let out = correlation_values(self.value(f1), self.value(f2), n);
        self.push(out, &[f1, f2], move |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let (c, h, w) = a.dims3();
            let g = ctx.grad.data();
            let inv_c = T::one() / T::lit(c as f64);
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for_each_offset(n, h, w, |d, dy, dx, y0, y1, x0, x1| {
                for ch in 0..c {
                    let pa = a.channel(ch);
                    let pb = b.channel(ch);
                    for y in y0..y1 {
                        let yb = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let xb = (x as isize + dx) as usize;
                            let gv = g[(d * h + y) * w + x] * inv_c;
                            ga.data_mut()[(ch * h + y) * w + x] += gv * pb[yb * w + xb];
                            gb.data_mut()[(ch * h + yb) * w + xb] += gv * pa[y * w + x];
                        }
                    }
                }
            });
            vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
        })
    }
}

fn channel_sums<T: Scalar>(g: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let sums = (0..channels)
        .map(|c| g[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect();
    Tensor::from_vec(&[channels], sums).expect("bias adjoint")
}

/// Visits each displacement channel with the in-bounds target range for `f1` positions.
fn for_each_offset(
    n: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, isize, isize, usize, usize, usize, usize),
) {
    let side = 2 * n + 1;
    let ni = n as isize;
    for d in 0..side * side {
        let dx = (d % side) as isize - ni;
        let dy = (d / side) as isize - ni;
        let y0 = (-dy).max(0) as usize;
        let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
        let x0 = (-dx).max(0) as usize;
        let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
        if y0 >= y1 || x0 >= x1 {
            continue;
        }
        f(d, dy, dx, y0, y1, x0, x1);
    }
}

pub(crate) fn correlation_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n: usize) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "correlation shape mismatch");
    let (c, h, w) = a.dims3();
    let side = 2 * n + 1;
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = Tensor::zeros(&[side * side, h, w]);
    for_each_offset(n, h, w, |d, dy, dx, y0, y1, x0, x1| {
        let od = &mut out.data_mut()[d * h * w..(d + 1) * h * w];
        for ch in 0..c {
            let pa = a.channel(ch);
            let pb = b.channel(ch);
            for y in y0..y1 {
                let yb = (y as isize + dy) as usize;
                let row_a = &pa[y * w..(y + 1) * w];
                let row_b = &pb[yb * w..(yb + 1) * w];
                let row_o = &mut od[y * w..(y + 1) * w];
                for x in x0..x1 {
                    let xb = (x as isize + dx) as usize;
                    row_o[x] += row_a[x] * row_b[xb];
                }
            }
        }
        od.iter_mut().for_each(|v| *v *= inv_c);
    });
    out
}
