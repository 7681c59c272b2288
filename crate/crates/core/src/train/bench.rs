//! Lite (polyphase) attention product benchmark: cost, wall time and fidelity
//! against the exact product on smooth features.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{lite_matmul, AttentionMode, FlopCounter};
use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::tensor::Tensor;

/// One line of the JSON-lines benchmark report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: usize,
    pub flops: u64,
    /// FLOPs relative to the exact product (`s = 1`).
    pub flop_ratio: f64,
    /// Mean wall time per product over the trials.
    pub wall_ms: f64,
    /// SSIM of the lite product against the exact one.
    pub ssim: f64,
}

/// `[M, N]` features that vary slowly along the position axis, like a
/// raster-ordered natural image.
pub fn smooth_feature(m: usize, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[m, n], |i| {
        let t = i[0] as f64 / m.max(1) as f64;
        let c = i[1] as f64;
        let freq = 0.5 + 0.37 * (c % 5.0);
        (std::f64::consts::TAU * freq * t + 0.7 * c).sin() + 0.1 * c / n.max(1) as f64
    })
}

/// Benchmarks the position-mode lite product for every `(M, N)` and factor.
pub fn bench_litemul(sizes: &[(usize, usize)], factors: &[usize], trials: usize) -> Result<Vec<BenchRecord>> {
    if sizes.is_empty() || factors.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one size and one factor".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if sizes.iter().any(|&(m, n)| m == 0 || n == 0) {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    let mut out = Vec::new();
    for &(m, n) in sizes {
        let f = smooth_feature(m, n);
        let mut exact_counter = FlopCounter::new();
        let exact = lite_matmul(&f, 1, AttentionMode::Position, &mut exact_counter)?;
        let exact_map = exact.clone().reshape(&[1, m, m])?;
        for &s in factors {
            let mut counter = FlopCounter::new();
            let mut result = None;
            let start = Instant::now();
            for _ in 0..trials {
                counter.reset();
                result = Some(lite_matmul(&f, s, AttentionMode::Position, &mut counter)?);
            }
            let wall_ms = start.elapsed().as_secs_f64() * 1e3 / trials as f64;
            let lite_map = result.expect("trials >= 1").reshape(&[1, m, m])?;
            out.push(BenchRecord {
                op: "lite_matmul_position".into(),
                m,
                n,
                s,
                flops: counter.flops(),
                flop_ratio: counter.flops() as f64 / exact_counter.flops() as f64,
                wall_ms,
                ssim: ssim(&lite_map, &exact_map)?.value,
            });
        }
    }
    Ok(out)
}
