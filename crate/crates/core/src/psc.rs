//! Pyramidal spatial context: dual position/channel attention per pyramid stage,
//! with contexts carried from the finer stage into the next coarser one.
//!
//! At stage `k` with feature `F` (`[C,H,W]`):
//!
//! ```text
//! C_P = W_zp [ sum_j A_P(i,j) F_j , maxpool(C_P^prev) ]
//! C_C = W_zc [ sum_j A_C(j)   F_j , C_C^prev ]            (broadcast over positions)
//! F~  = F + C_P + C_C
//! ```
//!
//! `A_P` is the embedded-Gaussian position softmax (optionally polyphase), `A_C`
//! a single position softmax of `W_kc F`. Parameters live under `psc.stage{k}.*`.

use rand::Rng;

use crate::attention::{check_feature, embed_width, flatten, lite_position_logits};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Init};
use crate::scalar::Scalar;
use crate::FeatureMap;

/// Context carried out of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PscState<T> {
    /// Position context `C_P`, `[C,H,W]`.
    pub c_p: FeatureMap<T>,
    /// Channel context `C_C`, broadcast to `[C,H,W]`.
    pub c_c: FeatureMap<T>,
    pub stage: usize,
}

/// Carried contexts as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PscCarry {
    pub c_p: Var,
    pub c_c: Var,
}

/// Shape description of one stage's PSC block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PscBlock {
    pub stage: usize,
    pub channels: usize,
    /// Width of the carry coming from the finer stage, if any.
    pub prev_channels: Option<usize>,
    /// Polyphase factor of the position product.
    pub lite: usize,
}

pub fn prefix(stage: usize) -> String {
    format!("psc.stage{stage}")
}

impl PscBlock {
    pub fn new(stage: usize, channels: usize, prev_channels: Option<usize>, lite: usize) -> Self {
        Self {
            stage,
            channels,
            prev_channels,
            lite,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = prefix(self.stage);
        let (c, e) = (self.channels, embed_width(self.channels));
        let cat = c + self.prev_channels.unwrap_or(0);
        layers::add_conv(store, &format!("{p}.wq"), e, c, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wk"), e, c, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wkc"), 1, c, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.wzp"), c, cat, 1, true, Init::Zeros, rng);
        layers::add_conv(store, &format!("{p}.wzc"), c, cat, 1, true, Init::Zeros, rng);
    }

    /// Graph-level forward; returns the enhanced feature and the new carry.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var, prev: Option<PscCarry>) -> Result<(Var, PscCarry)> {
        let p = prefix(self.stage);
        let (h, w) = check_feature(g, f, self.channels, "psc")?;
        match (prev, self.prev_channels) {
            (Some(carry), Some(pc)) => {
                for (what, v) in [("position", carry.c_p), ("channel", carry.c_c)] {
                    let s = g.shape(v);
                    if s != [pc, 2 * h, 2 * w] {
                        return Err(Error::Shape(format!(
                            "psc stage {}: {what} carry must be [{pc}, {}, {}], got {s:?}",
                            self.stage,
                            2 * h,
                            2 * w
                        )));
                    }
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::InvalidArgument(format!(
                    "psc stage {} has no carry input but one was given",
                    self.stage
                )))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument(format!("psc stage {} expects a carry", self.stage)))
            }
        }
        let fm = flatten(g, f);

        // position branch
        let q = layers::linear(g, &format!("{p}.wq"), f)?;
        let k = layers::linear(g, &format!("{p}.wk"), f)?;
        let (q, k) = (flatten(g, q), flatten(g, k));
        let logits = lite_position_logits(g, q, k, self.lite);
        let a_p = g.softmax(logits, 1);
        let ctx_p = g.matmul(fm, false, a_p, true);
        let mut ctx_p = g.reshape(ctx_p, &[self.channels, h, w]);
        if let Some(carry) = prev {
            let pooled = g.max_pool2(carry.c_p);
            ctx_p = g.concat0(&[ctx_p, pooled]);
        }
        let c_p = layers::linear(g, &format!("{p}.wzp"), ctx_p)?;

        // channel branch
        let kc = layers::linear(g, &format!("{p}.wkc"), f)?;
        let kc = flatten(g, kc);
        let a_c = g.softmax(kc, 1);
        let ctx_c = g.matmul(fm, false, a_c, true);
        let mut ctx_c = g.reshape(ctx_c, &[self.channels, 1, 1]);
        if let Some(carry) = prev {
            let v = g.mean_spatial(carry.c_c);
            ctx_c = g.concat0(&[ctx_c, v]);
        }
        let c_c = layers::linear(g, &format!("{p}.wzc"), ctx_c)?;
        let c_c = g.broadcast_spatial(c_c, h, w);

        let out = g.add_n(&[f, c_p, c_c]);
        Ok((out, PscCarry { c_p, c_c }))
    }

    /// Position attention map `[HW, HW]` on plain values.
    pub fn position_attention<T: Scalar>(&self, store: &ParamStore<T>, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = prefix(self.stage);
        let mut g = Graph::new(store, false);
        let fv = g.constant(f.clone());
        check_feature(&g, fv, self.channels, "psc")?;
        let q = layers::linear(&mut g, &format!("{p}.wq"), fv)?;
        let k = layers::linear(&mut g, &format!("{p}.wk"), fv)?;
        let (q, k) = (flatten(&mut g, q), flatten(&mut g, k));
        let logits = lite_position_logits(&mut g, q, k, self.lite);
        let a = g.softmax(logits, 1);
        Ok(g.value(a).clone())
    }

    /// Channel-branch position softmax `[1, HW]` on plain values.
    pub fn channel_attention<T: Scalar>(&self, store: &ParamStore<T>, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = prefix(self.stage);
        let mut g = Graph::new(store, false);
        let fv = g.constant(f.clone());
        check_feature(&g, fv, self.channels, "psc")?;
        let kc = layers::linear(&mut g, &format!("{p}.wkc"), fv)?;
        let kc = flatten(&mut g, kc);
        let a = g.softmax(kc, 1);
        Ok(g.value(a).clone())
    }
}

/// Evaluates one stage on plain values.
pub fn psc_forward<T: Scalar>(
    block: &PscBlock,
    store: &ParamStore<T>,
    f: &FeatureMap<T>,
    prev: Option<&PscState<T>>,
) -> Result<(FeatureMap<T>, PscState<T>)> {
    let mut g = Graph::new(store, false);
    let fv = g.constant(f.clone());
    let carry = prev.map(|s| PscCarry {
        c_p: g.constant(s.c_p.clone()),
        c_c: g.constant(s.c_c.clone()),
    });
    let (out, next) = block.forward(&mut g, fv, carry)?;
    Ok((
        g.value(out).clone(),
        PscState {
            c_p: g.value(next.c_p).clone(),
            c_c: g.value(next.c_c).clone(),
            stage: block.stage,
        },
    ))
}

/// Builds the blocks for a fine-to-coarse run of stages.
pub fn pyramid_blocks(stages: &[usize], channels: &[usize], lite: usize) -> Vec<PscBlock> {
    stages
        .iter()
        .zip(channels)
        .enumerate()
        .map(|(i, (&k, &c))| PscBlock::new(k, c, (i > 0).then(|| channels[i - 1]), lite))
        .collect()
}

/// Graph-level pyramid: threads the carry from each stage into the next coarser one.
pub fn psc_pyramid_graph<T: Scalar>(g: &mut Graph<'_, T>, blocks: &[PscBlock], features: &[Var]) -> Result<Vec<Var>> {
    if blocks.len() != features.len() {
        return Err(Error::InvalidArgument(format!(
            "{} psc blocks for {} features",
            blocks.len(),
            features.len()
        )));
    }
    for pair in features.windows(2) {
        let (a, b) = (g.shape(pair[0]), g.shape(pair[1]));
        if a.len() != 3 || b.len() != 3 || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
            return Err(Error::Shape(format!("non-dyadic psc stage sizes {a:?} -> {b:?}")));
        }
    }
    let mut carry = None;
    let mut out = Vec::with_capacity(features.len());
    for (block, &f) in blocks.iter().zip(features) {
        let (y, next) = block.forward(g, f, carry)?;
        out.push(y);
        carry = Some(next);
    }
    Ok(out)
}

/// Enhances features ordered fine to coarse (stages 3..5 in the full network).
pub fn psc_pyramid<T: Scalar>(
    blocks: &[PscBlock],
    store: &ParamStore<T>,
    features: &[FeatureMap<T>],
) -> Result<(Vec<FeatureMap<T>>, Vec<PscState<T>>)> {
    let mut g = Graph::new(store, false);
    let vars: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
    if blocks.len() != vars.len() {
        return Err(Error::InvalidArgument("one psc block per feature is required".into()));
    }
    let mut carry = None;
    let mut outs = Vec::new();
    let mut states = Vec::new();
    for pair in features.windows(2) {
        let (a, b) = (pair[0].shape(), pair[1].shape());
        if a.len() != 3 || b.len() != 3 || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
            return Err(Error::Shape(format!("non-dyadic psc stage sizes {a:?} -> {b:?}")));
        }
    }
    for (block, &f) in blocks.iter().zip(&vars) {
        let (y, next) = block.forward(&mut g, f, carry)?;
        outs.push(g.value(y).clone());
        states.push(PscState {
            c_p: g.value(next.c_p).clone(),
            c_c: g.value(next.c_c).clone(),
            stage: block.stage,
        });
        carry = Some(next);
    }
    Ok((outs, states))
}
