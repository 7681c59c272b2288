//! Correlation cost volumes, temporal context correlation and the contextual
//! PWC decoder block.
//!
//! TCC adds a cross-frame channel-attention context to the plain cost volume:
//!
//! ```text
//! A_T = softmax_j( (W_q F1)_i . (W_k F2)_j / M )        [C', C']
//! V   = W_v1( conv3d_{2x5x5}(F1, F2) )                   [C', H, W]
//! Z   = W_c Corr(F1, F2) + W_z (A_T V)                   [D, H, W]
//! ```
//!
//! Parameters live under `tcc.stage{k}.*`; the decoder under `dec.stage{k}.*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{embed_width, flatten, lite_channel_logits};
use crate::autodiff::{correlation_values, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Init};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::FeatureMap;

/// Spatial extent of the 3-D value convolution.
pub const VALUE_KERNEL: usize = 5;
/// Leaky-rectifier slope used throughout the decoder.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Matching scores over a `(2n+1)^2` displacement grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub data: Tensor<T>,
    pub max_displacement: usize,
}

impl<T: Scalar> CostVolume<T> {
    pub fn side(&self) -> usize {
        2 * self.max_displacement + 1
    }

    /// Displacement `(dx, dy)` of channel `d`.
    pub fn offset(&self, d: usize) -> (isize, isize) {
        offset(d, self.max_displacement)
    }
}

/// Displacement `(dx, dy)` encoded by cost-volume channel `d`.
pub fn offset(d: usize, n: usize) -> (isize, isize) {
    let side = 2 * n + 1;
    ((d % side) as isize - n as isize, (d / side) as isize - n as isize)
}

pub fn displacement_channels(n: usize) -> usize {
    (2 * n + 1) * (2 * n + 1)
}

/// `out(o, x) = (1/C) sum_c F1(c, x) F2(c, x + o)`, zero outside the frame.
pub fn correlate<T: Scalar>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, n: usize) -> Result<CostVolume<T>> {
    if f1.shape() != f2.shape() || f1.rank() != 3 {
        return Err(Error::Shape(format!(
            "correlation needs equal [C,H,W] inputs, got {:?} and {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    if f1.is_empty() {
        return Err(Error::Shape("correlation of an empty feature".into()));
    }
    Ok(CostVolume {
        data: correlation_values(f1, f2, n),
        max_displacement: n,
    })
}

/// Shape description of one stage's TCC block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TccBlock {
    pub stage: usize,
    pub channels: usize,
    pub max_displacement: usize,
    /// Polyphase factor inside the attention's inner sum over positions.
    pub lite: usize,
}

pub fn prefix(stage: usize) -> String {
    format!("tcc.stage{stage}")
}

impl TccBlock {
    pub fn new(stage: usize, channels: usize, max_displacement: usize, lite: usize) -> Self {
        Self {
            stage,
            channels,
            max_displacement,
            lite,
        }
    }

    pub fn embed(&self) -> usize {
        embed_width(self.channels)
    }

    pub fn out_channels(&self) -> usize {
        displacement_channels(self.max_displacement)
    }

    /// `W_c` starts as the identity and `W_z` at zero, so a fresh block returns the
    /// plain cost volume.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = prefix(self.stage);
        let (c, e, d) = (self.channels, self.embed(), self.out_channels());
        layers::add_conv(store, &format!("{p}.wq"), e, c, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wk"), e, c, 1, false, Init::Kaiming, rng);
        // a [C, C, 2, 5, 5] 3-D kernel over the two-frame stack, stored with the
        // temporal axis folded into the input channels (index 2c + t)
        layers::add_conv(store, &format!("{p}.wv3d"), c, 2 * c, VALUE_KERNEL, true, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wv"), e, c, 1, true, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wc"), d, d, 1, true, Init::Identity, rng);
        layers::add_conv(store, &format!("{p}.wz"), d, e, 1, true, Init::Zeros, rng);
    }

    fn check<T: Scalar>(&self, g: &Graph<'_, T>, f1: Var, f2: Var) -> Result<(usize, usize)> {
        let (a, b) = (g.shape(f1), g.shape(f2));
        if a != b {
            return Err(Error::Shape(format!("tcc inputs differ: {a:?} vs {b:?}")));
        }
        crate::attention::check_feature(g, f1, self.channels, "tcc")
    }

    /// Cross attention `[C', C']`, rows normalized.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<'_, T>, f1: Var, f2: Var) -> Result<Var> {
        self.check(g, f1, f2)?;
        let p = prefix(self.stage);
        let q = layers::linear(g, &format!("{p}.wq"), f1)?;
        let k = layers::linear(g, &format!("{p}.wk"), f2)?;
        let (q, k) = (flatten(g, q), flatten(g, k));
        let logits = lite_channel_logits(g, q, k, self.lite);
        Ok(g.softmax(logits, 1))
    }

    /// Temporal value transform `[C', H, W]`.
    pub fn values<T: Scalar>(&self, g: &mut Graph<'_, T>, f1: Var, f2: Var) -> Result<Var> {
        self.check(g, f1, f2)?;
        let p = prefix(self.stage);
        let stacked = g.stack_time(f1, f2);
        let v = layers::conv(g, &format!("{p}.wv3d"), stacked, 1, VALUE_KERNEL / 2)?;
        layers::linear(g, &format!("{p}.wv"), v)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f1: Var, f2: Var) -> Result<Var> {
        let (h, w) = self.check(g, f1, f2)?;
        let p = prefix(self.stage);
        let corr = g.correlation(f1, f2, self.max_displacement);
        let a_t = self.attention(g, f1, f2)?;
        let v = self.values(g, f1, f2)?;
        let vm = flatten(g, v);
        let ctx = g.matmul(a_t, false, vm, false);
        let ctx = g.reshape(ctx, &[self.embed(), h, w]);
        let base = layers::linear(g, &format!("{p}.wc"), corr)?;
        let extra = layers::linear(g, &format!("{p}.wz"), ctx)?;
        Ok(g.add(base, extra))
    }
}

/// Evaluates a TCC block on plain values; output `[(2n+1)^2, H, W]`.
pub fn tcc_forward<T: Scalar>(
    block: &TccBlock,
    store: &ParamStore<T>,
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new(store, false);
    let (a, b) = (g.constant(f1.clone()), g.constant(f2.clone()));
    let out = block.forward(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

/// A stage's flow decoder: a plain stack of 3x3 convolutions and a 2-channel head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoder {
    pub stage: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Decoder {
    /// Input is `[cost, F1, up_flow(2), up_feat(2)]`, the last two absent at the coarsest stage.
    pub fn new(stage: usize, cost_channels: usize, feature_channels: usize, has_upsampled: bool, widths: &[usize]) -> Self {
        let extra = if has_upsampled { 4 } else { 0 };
        Self {
            stage,
            in_channels: cost_channels + feature_channels + extra,
            widths: widths.to_vec(),
        }
    }

    pub fn prefix(&self) -> String {
        format!("dec.stage{}", self.stage)
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = self.prefix();
        let mut cin = self.in_channels;
        for (i, &wd) in self.widths.iter().enumerate() {
            layers::add_conv(store, &format!("{p}.conv{i}"), wd, cin, 3, true, Init::Kaiming, rng);
            cin = wd;
        }
        layers::add_conv(store, &format!("{p}.flow"), 2, cin, 3, true, Init::ScaledKaiming(0.1), rng);
    }

    /// Returns `(head output, pre-head feature)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, input: Var) -> Result<(Var, Var)> {
        let p = self.prefix();
        let mut x = input;
        for i in 0..self.widths.len() {
            let y = layers::conv(g, &format!("{p}.conv{i}"), x, 1, 1)?;
            x = g.leaky_relu(y, T::lit(LEAKY_SLOPE));
        }
        let flow = layers::conv(g, &format!("{p}.flow"), x, 1, 1)?;
        Ok((flow, x))
    }
}

/// How a stage turns a feature pair into a cost representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    /// Plain correlation.
    Correlation { max_displacement: usize },
    /// Temporal context correlation.
    Contextual(TccBlock),
}

impl CostKind {
    pub fn channels(&self) -> usize {
        match self {
            CostKind::Correlation { max_displacement } => displacement_channels(*max_displacement),
            CostKind::Contextual(b) => b.out_channels(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f1: Var, f2: Var) -> Result<Var> {
        match self {
            CostKind::Correlation { max_displacement } => {
                let (a, b) = (g.shape(f1), g.shape(f2));
                if a != b || a.len() != 3 {
                    return Err(Error::Shape(format!("correlation inputs differ: {a:?} vs {b:?}")));
                }
                Ok(g.correlation(f1, f2, *max_displacement))
            }
            CostKind::Contextual(b) => b.forward(g, f1, f2),
        }
    }
}

/// Upsampled quantities handed down from the coarser stage.
#[derive(Clone, Copy, Debug)]
pub struct Upsampled {
    pub flow: Var,
    pub feat: Var,
}

/// Cost volume (or TCC context), decoder and residual flow head.
///
/// Returns the stage flow `up_flow + head(...)` (just the head at the coarsest
/// stage) and the decoder's last feature.
pub fn contextual_pwc_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    cost: &CostKind,
    decoder: &Decoder,
    f1: Var,
    f2_warped: Var,
    up: Option<Upsampled>,
) -> Result<(Var, Var)> {
    let (c, h, w) = {
        let s = g.shape(f1);
        if s.len() != 3 {
            return Err(Error::Shape(format!("decoder feature must be [C,H,W], got {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    if let Some(u) = up {
        for (what, v) in [("flow", u.flow), ("feature", u.feat)] {
            let s = g.shape(v);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::Shape(format!("upsampled {what} {s:?} does not match stage size {h}x{w}")));
            }
        }
    }
    let cv = cost.forward(g, f1, f2_warped)?;
    let mut parts = vec![cv, f1];
    if let Some(u) = up {
        parts.push(u.flow);
        parts.push(u.feat);
    }
    let input = g.concat0(&parts);
    let got = g.shape(input)[0];
    if got != decoder.in_channels {
        return Err(Error::Shape(format!(
            "decoder stage {} expects {} input channels, got {got} (cost {}, feature {c})",
            decoder.stage,
            decoder.in_channels,
            cost.channels()
        )));
    }
    let (head, feat) = decoder.forward(g, input)?;
    let flow = match up {
        Some(u) => g.add(u.flow, head),
        None => head,
    };
    Ok((flow, feat))
}
