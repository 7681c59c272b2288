//! Straightforward loop implementations used as references for the tape ops
//! and the composed blocks. Everything is f64 and index arithmetic only.

use stcflow::autodiff::ParamStore;
use stcflow::Tensor64;

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor64 {
    store.get(name).unwrap_or_else(|_| panic!("missing parameter {name}"))
}

fn at(t: &Tensor64, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(c * s[1] + y) * s[2] + x]
}

/// Zero-padded convolution with square kernel, stride 1.
pub fn conv(x: &Tensor64, w: &Tensor64, b: Option<&Tensor64>, pad: usize) -> Tensor64 {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], cin);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    Tensor64::from_fn(&[cout, oh, ow], |i| {
        let (co, oy, ox) = (i[0], i[1], i[2]);
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let (sy, sx) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx] * at(x, ci, sy as usize, sx as usize);
                }
            }
        }
        acc
    })
}

pub fn conv_named(store: &ParamStore<f64>, name: &str, x: &Tensor64, pad: usize) -> Tensor64 {
    let b = store.get(&format!("{name}.bias")).ok();
    conv(x, param(store, &format!("{name}.weight")), b, pad)
}

/// Stride-2 transposed convolution, 4x4 kernel `[cin, cout, 4, 4]`, padding 1.
pub fn deconv_x2(x: &Tensor64, w: &Tensor64, b: Option<&Tensor64>) -> Tensor64 {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let mut out = Tensor64::zeros(&[cout, 2 * h, 2 * wd]);
    for co in 0..cout {
        for oy in 0..2 * h {
            for ox in 0..2 * wd {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let ky = oy as isize + 1 - 2 * iy as isize;
                            let kx = ox as isize + 1 - 2 * ix as isize;
                            if (0..k as isize).contains(&ky) && (0..k as isize).contains(&kx) {
                                let wv = w.data()[((ci * cout + co) * k + ky as usize) * k + kx as usize];
                                acc += wv * at(x, ci, iy, ix);
                            }
                        }
                    }
                }
                out.data_mut()[(co * 2 * h + oy) * 2 * wd + ox] = acc;
            }
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `(1/C) sum_c f1(c,y,x) f2(c,y+dy,x+dx)`, channel `(dy+n)(2n+1) + dx+n`.
pub fn correlate(f1: &Tensor64, f2: &Tensor64, n: usize) -> Tensor64 {
    let (c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let side = 2 * n + 1;
    Tensor64::from_fn(&[side * side, h, w], |i| {
        let dy = (i[0] / side) as isize - n as isize;
        let dx = (i[0] % side) as isize - n as isize;
        let (y2, x2) = (i[1] as isize + dy, i[2] as isize + dx);
        if y2 < 0 || x2 < 0 || y2 >= h as isize || x2 >= w as isize {
            return 0.0;
        }
        (0..c).map(|ch| at(f1, ch, i[1], i[2]) * at(f2, ch, y2 as usize, x2 as usize)).sum::<f64>() / c as f64
    })
}

/// Backward bilinear warp; each of the four taps outside the frame reads zero.
pub fn warp(f: &Tensor64, flow: &Tensor64) -> Tensor64 {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    Tensor64::from_fn(f.shape(), |i| {
        let sx = i[2] as f64 + at(flow, 0, i[1], i[2]);
        let sy = i[1] as f64 + at(flow, 1, i[1], i[2]);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (ax, ay) = (sx - x0, sy - y0);
        let mut acc = 0.0;
        for (yy, wy) in [(y0, 1.0 - ay), (y0 + 1.0, ay)] {
            for (xx, wx) in [(x0, 1.0 - ax), (x0 + 1.0, ax)] {
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                    acc += wy * wx * at(f, i[0], yy as usize, xx as usize);
                }
            }
        }
        acc
    })
}

/// `[r^2 C, H, W] -> [C, rH, rW]` with sub-position `(dy, dx)` at channel `c r^2 + dy r + dx`.
pub fn pixel_shuffle(x: &Tensor64, r: usize) -> Tensor64 {
    let (cr, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor64::from_fn(&[cr / (r * r), r * h, r * w], |i| {
        at(x, i[0] * r * r + (i[1] % r) * r + i[2] % r, i[1] / r, i[2] / r)
    })
}

/// Half-pixel bilinear resize with clamped borders.
pub fn resize(x: &Tensor64, oh: usize, ow: usize) -> Tensor64 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let coord = |o: usize, src: usize, dst: usize| {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f64)
    };
    Tensor64::from_fn(&[x.shape()[0], oh, ow], |i| {
        let (y0, y1, fy) = coord(i[1], h, oh);
        let (x0, x1, fx) = coord(i[2], w, ow);
        let c = i[0];
        (1.0 - fy) * ((1.0 - fx) * at(x, c, y0, x0) + fx * at(x, c, y0, x1))
            + fy * ((1.0 - fx) * at(x, c, y1, x0) + fx * at(x, c, y1, x1))
    })
}

fn flat(t: &Tensor64) -> (usize, usize, &[f64]) {
    (t.shape()[0], t.shape()[1] * t.shape()[2], t.data())
}

/// Position logits with polyphase factor `s`: query `i` meets the key in its own
/// phase and in `j`'s group, zero when that key lies past the end.
pub fn lite_position_logits(q: &Tensor64, k: &Tensor64, s: usize) -> Vec<Vec<f64>> {
    let (e, m, qd) = flat(q);
    let kd = k.data();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let kj = s * (j / s) + i % s;
                    if kj >= m {
                        return 0.0;
                    }
                    (0..e).map(|c| qd[c * m + i] * kd[c * m + kj]).sum()
                })
                .collect()
        })
        .collect()
}

/// Embedded-Gaussian non-local block with residual output.
pub fn non_local(store: &ParamStore<f64>, prefix: &str, x: &Tensor64) -> Tensor64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let q = conv_named(store, &format!("{prefix}.wq"), x, 0);
    let k = conv_named(store, &format!("{prefix}.wk"), x, 0);
    let v = conv_named(store, &format!("{prefix}.wv"), x, 0);
    let (e, m, vd) = flat(&v);
    let logits = lite_position_logits(&q, &k, 1);
    let mut ctx = Tensor64::zeros(&[e, h, w]);
    for (i, row) in logits.iter().enumerate() {
        let a = softmax(row);
        for ch in 0..e {
            ctx.data_mut()[ch * m + i] = (0..m).map(|j| a[j] * vd[ch * m + j]).sum();
        }
    }
    let z = conv_named(store, &format!("{prefix}.wz"), &ctx, 0);
    assert_eq!(z.shape()[0], c);
    Tensor64::from_fn(x.shape(), |i| at(x, i[0], i[1], i[2]) + at(&z, i[0], i[1], i[2]))
}

/// Global-context block: softmax pooling, 1x1, layer norm, ReLU, 1x1, broadcast add.
pub fn global_context(store: &ParamStore<f64>, prefix: &str, x: &Tensor64) -> Tensor64 {
    let (c, m, xd) = flat(x);
    let wk = param(store, &format!("{prefix}.wk.weight")).data();
    let logits: Vec<f64> = (0..m).map(|j| (0..c).map(|ch| wk[ch] * xd[ch * m + j]).sum()).collect();
    let a = softmax(&logits);
    let pooled = Tensor64::from_fn(&[c, 1, 1], |i| (0..m).map(|j| a[j] * xd[i[0] * m + j]).sum());
    let t = conv_named(store, &format!("{prefix}.w1"), &pooled, 0);
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let gamma = param(store, &format!("{prefix}.ln.gamma")).data();
    let beta = param(store, &format!("{prefix}.ln.beta")).data();
    let t = Tensor64::from_fn(t.shape(), |i| {
        let v = (t.data()[i[0]] - mean) / (var + 1e-5).sqrt() * gamma[i[0]] + beta[i[0]];
        v.max(0.0)
    });
    let z = conv_named(store, &format!("{prefix}.wz"), &t, 0);
    Tensor64::from_fn(x.shape(), |i| at(x, i[0], i[1], i[2]) + z.data()[i[0]])
}

fn max_pool2(x: &Tensor64) -> Tensor64 {
    Tensor64::from_fn(&[x.shape()[0], x.shape()[1] / 2, x.shape()[2] / 2], |i| {
        let (y, xx) = (2 * i[1], 2 * i[2]);
        [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(dy, dx)| at(x, i[0], y + dy, xx + dx))
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

fn concat(a: &Tensor64, b: &Tensor64) -> Tensor64 {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor64::from_vec(&shape, data).unwrap()
}

/// One PSC stage: returns `(output, c_p, c_c)` with `c_c` broadcast to `[C,H,W]`.
pub fn psc(
    store: &ParamStore<f64>,
    stage: usize,
    lite: usize,
    f: &Tensor64,
    prev: Option<(&Tensor64, &Tensor64)>,
) -> (Tensor64, Tensor64, Tensor64) {
    let p = format!("psc.stage{stage}");
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (_, m, fd) = flat(f);
    let q = conv_named(store, &format!("{p}.wq"), f, 0);
    let k = conv_named(store, &format!("{p}.wk"), f, 0);
    let logits = lite_position_logits(&q, &k, lite);
    let mut ctx_p = Tensor64::zeros(&[c, h, w]);
    for (i, row) in logits.iter().enumerate() {
        let a = softmax(row);
        for ch in 0..c {
            ctx_p.data_mut()[ch * m + i] = (0..m).map(|j| a[j] * fd[ch * m + j]).sum();
        }
    }
    let kc = conv_named(store, &format!("{p}.wkc"), f, 0);
    let a_c = softmax(kc.data());
    let mut ctx_c = Tensor64::from_fn(&[c, 1, 1], |i| (0..m).map(|j| a_c[j] * fd[i[0] * m + j]).sum());
    if let Some((cp, cc)) = prev {
        ctx_p = concat(&ctx_p, &max_pool2(cp));
        let (pc, pm, cd) = flat(cc);
        let means = Tensor64::from_fn(&[pc, 1, 1], |i| cd[i[0] * pm..(i[0] + 1) * pm].iter().sum::<f64>() / pm as f64);
        ctx_c = concat(&ctx_c, &means);
    }
    let c_p = conv_named(store, &format!("{p}.wzp"), &ctx_p, 0);
    let zc = conv_named(store, &format!("{p}.wzc"), &ctx_c, 0);
    let c_c = Tensor64::from_fn(&[c, h, w], |i| zc.data()[i[0]]);
    let out = Tensor64::from_fn(&[c, h, w], |i| {
        at(f, i[0], i[1], i[2]) + at(&c_p, i[0], i[1], i[2]) + at(&c_c, i[0], i[1], i[2])
    });
    (out, c_p, c_c)
}

/// One TCC stage: `W_c corr + W_z (A_T V)`.
pub fn tcc(store: &ParamStore<f64>, stage: usize, n: usize, lite: usize, f1: &Tensor64, f2: &Tensor64) -> Tensor64 {
    let p = format!("tcc.stage{stage}");
    let (c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let corr = correlate(f1, f2, n);
    let q = conv_named(store, &format!("{p}.wq"), f1, 0);
    let k = conv_named(store, &format!("{p}.wk"), f2, 0);
    let (e, m, qd) = flat(&q);
    let kd = k.data();
    let stacked = Tensor64::from_fn(&[2 * c, h, w], |i| {
        let src = if i[0] % 2 == 0 { f1 } else { f2 };
        at(src, i[0] / 2, i[1], i[2])
    });
    let v = conv_named(store, &format!("{p}.wv3d"), &stacked, 2);
    let v = conv_named(store, &format!("{p}.wv"), &v, 0);
    let scale = lite as f64 / m as f64;
    let mut ctx = Tensor64::zeros(&[e, h, w]);
    for a in 0..e {
        let logits: Vec<f64> = (0..e)
            .map(|b| (0..m).step_by(lite).map(|pos| qd[a * m + pos] * kd[b * m + pos]).sum::<f64>() * scale)
            .collect();
        let att = softmax(&logits);
        for pos in 0..m {
            ctx.data_mut()[a * m + pos] = (0..e).map(|b| att[b] * v.data()[b * m + pos]).sum();
        }
    }
    let base = conv_named(store, &format!("{p}.wc"), &corr, 0);
    let extra = conv_named(store, &format!("{p}.wz"), &ctx, 0);
    Tensor64::from_fn(base.shape(), |i| at(&base, i[0], i[1], i[2]) + at(&extra, i[0], i[1], i[2]))
}

/// One RRCU stage: `2 deconv(Y) + W_z reassemble(K, resize(R))`.
pub fn rrcu(store: &ParamStore<f64>, stage: usize, y: &Tensor64, y_prev: &Tensor64) -> Tensor64 {
    let p = format!("rrcu.stage{stage}");
    let (h, w) = (y.shape()[1], y.shape()[2]);
    let ey = conv_named(store, &format!("{p}.enc"), y, 0);
    let ep = conv_named(store, &format!("{p}.enc"), y_prev, 0);
    let r = Tensor64::from_fn(ey.shape(), |i| at(&ey, i[0], i[1], i[2]) - at(&ep, i[0], i[1], i[2]));
    let logits = pixel_shuffle(&conv_named(store, &format!("{p}.wr"), &r, 1), 2);
    let (oh, ow) = (2 * h, 2 * w);
    let values = resize(&r, oh, ow);
    let mut refined = Tensor64::zeros(&[r.shape()[0], oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            let kern = softmax(&(0..9).map(|k| at(&logits, k, oy, ox)).collect::<Vec<_>>());
            for ch in 0..r.shape()[0] {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = (oy as isize + ky as isize - 1).clamp(0, oh as isize - 1) as usize;
                        let sx = (ox as isize + kx as isize - 1).clamp(0, ow as isize - 1) as usize;
                        acc += kern[ky * 3 + kx] * at(&values, ch, sy, sx);
                    }
                }
                refined.data_mut()[(ch * oh + oy) * ow + ox] = acc;
            }
        }
    }
    let detail = conv_named(store, &format!("{p}.wz"), &refined, 0);
    let base = deconv_x2(
        y,
        param(store, &format!("{p}.deconv.weight")),
        store.get(&format!("{p}.deconv.bias")).ok(),
    );
    Tensor64::from_fn(base.shape(), |i| 2.0 * at(&base, i[0], i[1], i[2]) + at(&detail, i[0], i[1], i[2]))
}
