//! Endpoint-error metrics and structural similarity.
//!
//! All accumulation happens in `f64` regardless of the input scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outlier rule: endpoint error above this many pixels...
pub const FL_ABS_THRESHOLD: f64 = 3.0;
/// ...and above this fraction of the ground-truth magnitude.
pub const FL_REL_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aee: f64,
    pub fl_all: f64,
    pub count: usize,
}

fn check_pair<T: Scalar>(
    pred: &FlowField<T>,
    gt: &FlowField<T>,
    mask: Option<&[bool]>,
) -> Result<()> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.height() * gt.width() {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {}x{} field",
                m.len(),
                gt.height(),
                gt.width()
            )));
        }
    }
    Ok(())
}

/// Visits `(endpoint error, gt magnitude)` for every valid pixel.
fn for_each_valid<T: Scalar>(
    pred: &FlowField<T>,
    gt: &FlowField<T>,
    mask: Option<&[bool]>,
    mut f: impl FnMut(f64, f64),
) -> Result<usize> {
    check_pair(pred, gt, mask)?;
    let w = gt.width();
    let mut count = 0;
    for y in 0..gt.height() {
        for x in 0..w {
            if mask.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            let gu = gt.u(y, x).to_f64_lossy();
            let gv = gt.v(y, x).to_f64_lossy();
            let du = pred.u(y, x).to_f64_lossy() - gu;
            let dv = pred.v(y, x).to_f64_lossy() - gv;
            f(du.hypot(dv), gu.hypot(gv));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

/// Average endpoint error over valid pixels.
pub fn aee<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, mask: Option<&[bool]>) -> Result<f64> {
    let mut total = 0.0;
    let n = for_each_valid(pred, gt, mask, |e, _| total += e)?;
    Ok(total / n as f64)
}

/// Fraction of valid pixels whose endpoint error exceeds 3 px and 5% of the
/// ground-truth magnitude.
pub fn fl_all<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, mask: Option<&[bool]>) -> Result<f64> {
    let mut bad = 0usize;
    let n = for_each_valid(pred, gt, mask, |e, mag| {
        if e > FL_ABS_THRESHOLD && e > FL_REL_THRESHOLD * mag {
            bad += 1;
        }
    })?;
    Ok(bad as f64 / n as f64)
}

pub fn evaluate<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, mask: Option<&[bool]>) -> Result<EvalReport> {
    let mut total = 0.0;
    let mut bad = 0usize;
    let count = for_each_valid(pred, gt, mask, |e, mag| {
        total += e;
        if e > FL_ABS_THRESHOLD && e > FL_REL_THRESHOLD * mag {
            bad += 1;
        }
    })?;
    Ok(EvalReport {
        aee: total / count as f64,
        fl_all: bad as f64 / count as f64,
        count,
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// SSIM value plus whether the windowed form was used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// `false` when the maps were smaller than the window and one global
    /// window was used instead.
    pub windowed: bool,
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_term(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean structural similarity of two `[C, H, W]` maps.
///
/// Each channel uses an 11x11 Gaussian window (sigma 1.5) over valid positions and
/// stability constants derived from that channel's joint value range. Maps
/// smaller than the window fall back to a single global window.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Ssim> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::Shape(format!(
            "ssim needs equal [C,H,W] shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = a.dims3();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("ssim of an empty map".into()));
    }
    let windowed = h >= SSIM_WINDOW && w >= SSIM_WINDOW;
    let g = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.channel(ch).iter().map(|v| v.to_f64_lossy()).collect();
        let pb: Vec<f64> = b.channel(ch).iter().map(|v| v.to_f64_lossy()).collect();
        let (lo, hi) = pa
            .iter()
            .chain(&pb)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let mut range = hi - lo;
        if range <= 0.0 {
            range = 1.0;
        }
        let c1 = (SSIM_K1 * range).powi(2);
        let c2 = (SSIM_K2 * range).powi(2);
        if !windowed {
            let n = (h * w) as f64;
            let ma = pa.iter().sum::<f64>() / n;
            let mb = pb.iter().sum::<f64>() / n;
            let va = pa.iter().map(|v| v * v).sum::<f64>() / n - ma * ma;
            let vb = pb.iter().map(|v| v * v).sum::<f64>() / n - mb * mb;
            let cov = pa.iter().zip(&pb).map(|(x, y)| x * y).sum::<f64>() / n - ma * mb;
            total += ssim_term(ma, mb, va, vb, cov, c1, c2);
            continue;
        }
        let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = (y + dy) * w + x + dx;
                        let (va, vb) = (pa[i], pb[i]);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                acc += ssim_term(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb, c1, c2);
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(Ssim {
        value: total / c as f64,
        windowed,
    })
}
