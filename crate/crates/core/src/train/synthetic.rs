//! Seeded synthetic frame pairs with exact ground-truth flow.
//!
//! Frame 2 is a crop of a multi-octave value-noise canvas. Frame 1 samples the
//! same canvas at `x + flow(x)`, so every pixel of frame 1 moves by exactly the
//! ground-truth vector to reach its match in frame 2. The canvas is padded
//! beyond the visible crop, which keeps all samples inside textured content.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowField, FramePair};
use crate::layers::ModelRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 64;

fn d_affine() -> f64 {
    3.0
}
fn d_sinusoid() -> f64 {
    1.5
}
fn d_noise() -> f64 {
    0.01
}
fn d_max() -> f64 {
    8.0
}

/// Motion and noise ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Translation drawn from `[-a, a]` px, each linear term from `[-a/2, a/2]` px
    /// of displacement change across half the frame.
    #[serde(default = "d_affine")]
    pub affine_range: f64,
    /// Amplitude bound of the low-frequency sinusoidal perturbation, px.
    #[serde(default = "d_sinusoid")]
    pub sinusoid_range: f64,
    /// Standard deviation of the Gaussian noise added to frame 1.
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Vectors longer than this are shortened to it.
    #[serde(default = "d_max")]
    pub max_flow: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            affine_range: d_affine(),
            sinusoid_range: d_sinusoid(),
            noise_sigma: d_noise(),
            max_flow: d_max(),
        }
    }
}

impl SyntheticSpec {
    /// No motion and no noise: frame 2 equals frame 1.
    pub fn still() -> Self {
        Self {
            affine_range: 0.0,
            sinusoid_range: 0.0,
            noise_sigma: 0.0,
            max_flow: d_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.affine_range, self.sinusoid_range, self.noise_sigma, self.max_flow];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("synthetic ranges must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub pair: FramePair<T>,
    pub gt_flow: FlowField<T>,
    /// Seed that regenerates exactly this sample via [`generate_one`].
    pub seed: u64,
}

/// Per-sample seed derived from a dataset seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated random lattice with the given cell size.
fn value_noise<R: Rng>(h: usize, w: usize, cell: usize, rng: &mut R) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (cy, ty) = (y / cell, fade((y % cell) as f64 / cell as f64));
        for x in 0..w {
            let (cx, tx) = (x / cell, fade((x % cell) as f64 / cell as f64));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(cy, cx) * (1.0 - tx) + at(cy, cx + 1) * tx;
            let bot = at(cy + 1, cx) * (1.0 - tx) + at(cy + 1, cx + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

const OCTAVES: [(usize, f64); 4] = [(16, 1.0), (8, 0.6), (4, 0.4), (2, 0.25)];

/// Three-channel octave texture in `[0, 1]`, sharing most structure across channels.
fn texture<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let octave_sum = |rng: &mut R| {
        let mut acc = vec![0.0; h * w];
        for &(cell, amp) in &OCTAVES {
            for (a, v) in acc.iter_mut().zip(value_noise(h, w, cell, rng)) {
                *a += amp * v;
            }
        }
        acc
    };
    let shared = octave_sum(rng);
    (0..3)
        .map(|_| {
            let own = octave_sum(rng);
            let mut ch: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| 0.65 * s + 0.35 * o).collect();
            let (lo, hi) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let span = (hi - lo).max(1e-12);
            ch.iter_mut().for_each(|v| *v = (*v - lo) / span);
            ch
        })
        .collect()
}

fn bilinear(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x];
    (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy) + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy
}

fn motion<R: Rng>(h: usize, w: usize, spec: &SyntheticSpec, rng: &mut R) -> Tensor<f64> {
    let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let a = spec.affine_range;
    let s = spec.sinusoid_range;
    // per component: translation, d/dx, d/dy, amplitude, x frequency, y frequency, phase
    let comp: Vec<[f64; 7]> = (0..2)
        .map(|_| {
            [
                sym(a),
                sym(a / 2.0),
                sym(a / 2.0),
                sym(s),
                0.5 + sym(0.5).abs(),
                0.5 + sym(0.5).abs(),
                sym(std::f64::consts::PI),
            ]
        })
        .collect();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut flow = Tensor::from_fn(&[2, h, w], |i| {
        let p = &comp[i[0]];
        let (ny, nx) = ((i[1] as f64 - cy) / (h as f64 / 2.0), (i[2] as f64 - cx) / (w as f64 / 2.0));
        let wave = (std::f64::consts::TAU * (p[4] * i[2] as f64 / w as f64 + p[5] * i[1] as f64 / h as f64) + p[6]).sin();
        p[0] + p[1] * nx + p[2] * ny + p[3] * wave
    });
    let plane = h * w;
    let d = flow.data_mut();
    for i in 0..plane {
        let m = d[i].hypot(d[plane + i]);
        if m > spec.max_flow {
            let k = spec.max_flow / m;
            d[i] *= k;
            d[plane + i] *= k;
        }
    }
    flow
}

/// One sample from its own seed.
pub fn generate_one<T: Scalar>(seed: u64, size: (usize, usize), spec: &SyntheticSpec) -> Result<SyntheticSample<T>> {
    let (h, w) = size;
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "synthetic frames must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}"
        )));
    }
    spec.validate()?;
    let mut rng = ModelRng::seed_from_u64(seed);
    let pad = spec.max_flow.ceil() as usize + 2;
    let (ch, cw) = (h + 2 * pad, w + 2 * pad);
    let canvas = texture(ch, cw, &mut rng);
    let flow = motion(h, w, spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let plane = h * w;
    let frame2 = Tensor::from_fn(&[3, h, w], |i| canvas[i[0]][(i[1] + pad) * cw + i[2] + pad]);
    let mut frame1 = Tensor::from_fn(&[3, h, w], |i| {
        let k = i[1] * w + i[2];
        let sy = (i[1] + pad) as f64 + flow.data()[plane + k];
        let sx = (i[2] + pad) as f64 + flow.data()[k];
        bilinear(&canvas[i[0]], ch, cw, sy, sx)
    });
    if spec.noise_sigma > 0.0 {
        frame1
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(SyntheticSample {
        pair: FramePair::new(frame1.cast(), frame2.cast())?,
        gt_flow: FlowField::new(flow.cast())?,
        seed,
    })
}

/// `count` samples; sample `i` uses [`sample_seed`]`(seed, i)`.
pub fn generate_synthetic<T: Scalar>(
    count: usize,
    size: (usize, usize),
    seed: u64,
    spec: &SyntheticSpec,
) -> Result<Vec<SyntheticSample<T>>> {
    (0..count).map(|i| generate_one(sample_seed(seed, i), size, spec)).collect()
}
