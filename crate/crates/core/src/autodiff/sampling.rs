use super::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps for resizing one axis from `src` to `dst` samples, half-pixel
/// centres, edge clamped: `(lo, hi, frac)` per destination index.
pub(crate) fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { s - lo as f64 };
            (lo, hi, T::lit(frac))
        })
        .collect()
}

pub(crate) fn resize_values<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    for ch in 0..c {
        let p = x.channel(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                od[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear corner weights for sampling at `(sx, sy)`; corners outside a
/// `h x w` frame get `None`.
pub(crate) fn bilinear_corners<T: Scalar>(sx: T, sy: T, h: usize, w: usize) -> [(Option<usize>, T, T, T); 4] {
    let x0f = sx.floor();
    let y0f = sy.floor();
    let fx = sx - x0f;
    let fy = sy - y0f;
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let at = |xi: i64, yi: i64| {
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h)
            .then(|| yi as usize * w + xi as usize)
    };
    let one = T::one();
    // (index, weight, d weight / d sx, d weight / d sy)
    [
        (at(x0, y0), (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (at(x0 + 1, y0), fx * (one - fy), one - fy, -fx),
        (at(x0, y0 + 1), (one - fx) * fy, -fy, one - fx),
        (at(x0 + 1, y0 + 1), fx * fy, fy, fx),
    ]
}

pub(crate) fn warp_values<T: Scalar>(f: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = f.dims3();
    let plane = h * w;
    let fl = flow.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = T::lit(x as f64) + fl[i];
            let sy = T::lit(y as f64) + fl[plane + i];
            let corners = bilinear_corners(sx, sy, h, w);
            for ch in 0..c {
                let p = f.channel(ch);
                let mut acc = T::zero();
                for &(idx, wt, _, _) in &corners {
                    if let Some(j) = idx {
                        acc += wt * p[j];
                    }
                }
                out.data_mut()[ch * plane + i] = acc;
            }
        }
    }
    out
}

pub(crate) fn pixel_shuffle_values<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (cr, h, w) = x.dims3();
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[c, h * r, w * r]);
    let (oh, ow) = (h * r, w * r);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src = x.channel(ch * r * r + dy * r + dx);
                for y in 0..h {
                    for xx in 0..w {
                        out.data_mut()[(ch * oh + r * y + dy) * ow + r * xx + dx] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

fn pixel_unshuffle_values<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, oh, ow) = x.dims3();
    let (h, w) = (oh / r, ow / r);
    let mut out = Tensor::zeros(&[c * r * r, h, w]);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst = ((ch * r * r + dy * r + dx) * h) * w;
                for y in 0..h {
                    for xx in 0..w {
                        out.data_mut()[dst + y * w + xx] = x.at3(ch, r * y + dy, r * xx + dx);
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn clamp_offset(p: usize, k: usize, half: usize, len: usize) -> usize {
    (p as isize + k as isize - half as isize).clamp(0, len as isize - 1) as usize
}

impl<T: Scalar> Tape<T> {
    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = resize_values(self.value(x), oh, ow);
        self.push(out, &[x], move |ctx| {
            let (c, h, w) = ctx.inputs[0].dims3();
            let ty = resize_taps::<T>(h, oh);
            let tx = resize_taps::<T>(w, ow);
            let g = ctx.grad.data();
            let mut dx = Tensor::zeros(&[c, h, w]);
            let d = dx.data_mut();
            for ch in 0..c {
                let base = ch * h * w;
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[(ch * oh + oy) * ow + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        d[base + y0 * w + x0] += gt * (T::one() - fx);
                        d[base + y0 * w + x1] += gt * fx;
                        d[base + y1 * w + x0] += gb * (T::one() - fx);
                        d[base + y1 * w + x1] += gb * fx;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Backward warp: `out(c, p) = F(c, p + flow(p))`, bilinear, zero outside the frame.
    pub fn warp(&mut self, f: Var, flow: Var) -> Var {
        let (fv, flv) = (self.value(f), self.value(flow));
        let (_, h, w) = fv.dims3();
        assert_eq!(flv.shape(), &[2, h, w], "warp flow shape");
        let out = warp_values(fv, flv);
        self.push(out, &[f, flow], move |ctx| {
            let (fv, flv) = (ctx.inputs[0], ctx.inputs[1]);
            let (c, h, w) = fv.dims3();
            let plane = h * w;
            let g = ctx.grad.data();
            let fl = flv.data();
            let mut df = Tensor::zeros(fv.shape());
            let mut dflow = Tensor::zeros(flv.shape());
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let sx = T::lit(x as f64) + fl[i];
                    let sy = T::lit(y as f64) + fl[plane + i];
                    let corners = bilinear_corners(sx, sy, h, w);
                    let (mut gu, mut gv) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let go = g[ch * plane + i];
                        let p = fv.channel(ch);
                        for &(idx, wt, dwx, dwy) in &corners {
                            if let Some(j) = idx {
                                df.data_mut()[ch * plane + j] += go * wt;
                                gu += go * dwx * p[j];
                                gv += go * dwy * p[j];
                            }
                        }
                    }
                    dflow.data_mut()[i] = gu;
                    dflow.data_mut()[plane + i] = gv;
                }
            }
            vec![ctx.needs[0].then_some(df), ctx.needs[1].then_some(dflow)]
        })
    }

    /// Sub-pixel rearrangement `[r^2 C, H, W] -> [C, rH, rW]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let out = pixel_shuffle_values(self.value(x), r);
        self.push(out, &[x], move |ctx| {
            vec![Some(pixel_unshuffle_values(ctx.grad, r))]
        })
    }

    /// Content-aware reassembly: `out(c,p) = sum_k K(k,p) V(c, p + offset_k)` over a
    /// `kernel x kernel` neighbourhood, edge clamped.
    pub fn reassemble(&mut self, kernels: Var, values: Var, kernel: usize) -> Var {
        let (kv, vv) = (self.value(kernels), self.value(values));
        let (kk, h, w) = kv.dims3();
        let (c, vh, vw) = vv.dims3();
        assert_eq!(kk, kernel * kernel, "reassemble kernel channels");
        assert_eq!((vh, vw), (h, w), "reassemble spatial mismatch");
        let half = kernel / 2;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let src = vv.channel(ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        let sy = clamp_offset(y, ky, half, h);
                        for kx in 0..kernel {
                            let sx = clamp_offset(x, kx, half, w);
                            acc += kv.at3(ky * kernel + kx, y, x) * src[sy * w + sx];
                        }
                    }
                    out.set3(ch, y, x, acc);
                }
            }
        }
        self.push(out, &[kernels, values], move |ctx| {
            let (kv, vv) = (ctx.inputs[0], ctx.inputs[1]);
            let mut dk = Tensor::zeros(kv.shape());
            let mut dv = Tensor::zeros(vv.shape());
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let go = ctx.grad.at3(ch, y, x);
                        for ky in 0..kernel {
                            let sy = clamp_offset(y, ky, half, h);
                            for kx in 0..kernel {
                                let sx = clamp_offset(x, kx, half, w);
                                let k = ky * kernel + kx;
                                dk.data_mut()[(k * h + y) * w + x] += go * vv.at3(ch, sy, sx);
                                dv.data_mut()[(ch * h + sy) * w + sx] += go * kv.at3(k, y, x);
                            }
                        }
                    }
                }
            }
            vec![ctx.needs[0].then_some(dk), ctx.needs[1].then_some(dv)]
        })
    }
}
