//! Contextual attention: the generic attention/target/fusion framework, the
//! non-local and global-context blocks built on it, the two matrix-product
//! attention modes and the polyphase ("lite") product with FLOP accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_values, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Init};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::FeatureMap;

/// Which product an attention map is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `F2 F1^T`: position-by-position relations, `[M2, M1]`.
    Position,
    /// `F1^T F2`: channel-by-channel relations, `[C1, C2]`.
    Channel,
}

/// Accumulated floating-point operation count of attention products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    flops: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, flops: u64) {
        self.flops += flops;
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset(&mut self) {
        self.flops = 0;
    }
}

/// Exact attention product of two reshaped features (`[positions, channels]`).
///
/// Position mode returns `a b^T`, channel mode `a^T b`; the counter grows by
/// `2 * rows * cols * inner`.
pub fn attention_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: AttentionMode,
    counter: &mut FlopCounter,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape("attention operands must be matrices".into()));
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (ta, tb, rows, cols, inner) = match mode {
        AttentionMode::Position => (false, true, ar, br, ac),
        AttentionMode::Channel => (true, false, ac, bc, ar),
    };
    let other_inner = match mode {
        AttentionMode::Position => bc,
        AttentionMode::Channel => br,
    };
    if inner != other_inner {
        return Err(Error::Shape(format!(
            "{mode:?} product needs matching inner dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    counter.add(2 * (rows * cols * inner) as u64);
    Ok(matmul_values(a, ta, b, tb))
}

/// Row indices of each polyphase component; `None` marks zero padding.
pub fn polyphase_rows(m: usize, s: usize) -> Vec<Vec<Option<usize>>> {
    let per_phase = m.div_ceil(s);
    (0..s)
        .map(|p| {
            (0..per_phase)
                .map(|a| {
                    let r = a * s + p;
                    (r < m).then_some(r)
                })
                .collect()
        })
        .collect()
}

fn gather<T: Scalar>(f: &Tensor<T>, rows: &[Option<usize>]) -> Tensor<T> {
    let (_, n) = f.dims2();
    let mut out = Tensor::zeros(&[rows.len(), n]);
    for (r, src) in rows.iter().enumerate() {
        if let Some(s) = *src {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(&f.data()[s * n..(s + 1) * n]);
        }
    }
    out
}

/// Polyphase approximation of the self-attention product of `f` (`[M, N]`).
///
/// Rows are zero-padded to a multiple of `s` and split into `s` interleaved
/// phases (row `i` joins phase `i mod s`). Each phase forms its own product, so
/// the cost is `sum_p 2 N M_p^2`, about `1/s` of the exact product.
///
/// * Position mode: entry `(i, j)` of the `[M, M]` result is reconstructed from
///   the phase of row `i`, pairing `i` with the same-phase row of `j`'s polyphase
///   group (`s * (j div s) + i mod s`).
/// * Channel mode: the `[N, N]` result is `s` times the product of phase 0,
///   an estimate of the full sum over positions.
///
/// With `s = 1` both modes reduce to [`attention_matmul`].
pub fn lite_matmul<T: Scalar>(
    f: &Tensor<T>,
    s: usize,
    mode: AttentionMode,
    counter: &mut FlopCounter,
) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::InvalidArgument("polyphase factor must be >= 1".into()));
    }
    if f.rank() != 2 {
        return Err(Error::Shape("lite_matmul expects a [M, N] matrix".into()));
    }
    if s == 1 {
        return attention_matmul(f, f, mode, counter);
    }
    let (m, _) = f.dims2();
    let phases = polyphase_rows(m, s);
    match mode {
        AttentionMode::Position => {
            let blocks: Vec<Tensor<T>> = phases
                .iter()
                .map(|rows| {
                    let fp = gather(f, rows);
                    attention_matmul(&fp, &fp, AttentionMode::Position, counter)
                })
                .collect::<Result<_>>()?;
            let per = m.div_ceil(s);
            Ok(Tensor::from_fn(&[m, m], |i| {
                let (r, c) = (i[0], i[1]);
                blocks[r % s].at2(r / s, (c / s).min(per - 1))
            }))
        }
        AttentionMode::Channel => {
            let f0 = gather(f, &phases[0]);
            let mut out = attention_matmul(&f0, &f0, AttentionMode::Channel, counter)?;
            out.scale_inplace(T::lit(s as f64));
            Ok(out)
        }
    }
}

/// Differentiable polyphase position logits `q_i . k_j'` for `q`, `k` of shape `[C', M]`,
/// where `j'` is the row of `j`'s polyphase group in `i`'s phase. Returns `[M, M]`.
pub fn lite_position_logits<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, s: usize) -> Var {
    if s <= 1 {
        return g.matmul(q, true, k, false);
    }
    let m = g.shape(q)[1];
    let per = m.div_ceil(s);
    let qt = g.transpose2(q);
    let kt = g.transpose2(k);
    let phases = polyphase_rows(m, s);
    let blocks: Vec<Var> = phases
        .iter()
        .map(|rows| {
            let qp = g.gather_rows(qt, rows);
            let kp = g.gather_rows(kt, rows);
            g.matmul(qp, false, kp, true)
        })
        .collect();
    // [s*per, per] -> rows back in position order -> columns expanded per group
    let stacked = g.concat0(&blocks);
    let row_order: Vec<Option<usize>> = (0..m).map(|i| Some((i % s) * per + i / s)).collect();
    let rows = g.gather_rows(stacked, &row_order);
    let cols_t = g.transpose2(rows);
    let col_order: Vec<Option<usize>> = (0..m).map(|j| Some(j / s)).collect();
    let expanded = g.gather_rows(cols_t, &col_order);
    g.transpose2(expanded)
}

/// Differentiable channel logits `(1/M) q k^T` for `q`, `k` of shape `[C', M]`, with the
/// inner sum over positions restricted to polyphase component 0 (and rescaled) when `s > 1`.
pub fn lite_channel_logits<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, s: usize) -> Var {
    let m = g.shape(q)[1];
    let scale = T::lit(s.max(1) as f64 / m as f64);
    let prod = if s <= 1 {
        g.matmul(q, false, k, true)
    } else {
        let rows = &polyphase_rows(m, s)[0];
        let qt = g.transpose2(q);
        let kt = g.transpose2(k);
        let q0 = g.gather_rows(qt, rows);
        let k0 = g.gather_rows(kt, rows);
        g.matmul(q0, true, k0, false)
    };
    g.scale(prod, scale)
}

/// A normalized attention map together with the axis it is normalized over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub mode: AttentionMode,
    /// Rank-2; each row is one normalization slice.
    pub data: Tensor<T>,
}

impl<T: Scalar> AttentionMap<T> {
    /// Largest deviation of a normalization slice sum from 1 and smallest entry.
    pub fn normalization_error(&self) -> (f64, f64) {
        let (r, c) = self.data.dims2();
        let mut worst = 0f64;
        let mut min = f64::INFINITY;
        for i in 0..r {
            let row = &self.data.data()[i * c..(i + 1) * c];
            let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
            worst = worst.max((s - 1.0).abs());
            for v in row {
                min = min.min(v.to_f64_lossy());
            }
        }
        (worst, min)
    }
}

/// Embedding width used by query/key/value transforms.
pub fn embed_width(c: usize) -> usize {
    (c / 2).max(1)
}

/// `[C, H, W] -> [C, H*W]`.
pub(crate) fn flatten<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2]])
}

pub(crate) fn check_feature<T: Scalar>(g: &Graph<'_, T>, x: Var, channels: usize, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Shape(format!("{what}: expected [C,H,W], got {s:?}")));
    }
    if s[1] * s[2] == 0 {
        return Err(Error::Shape(format!("{what}: empty spatial extent {s:?}")));
    }
    if s[0] != channels {
        return Err(Error::Shape(format!("{what}: expected {channels} channels, got {}", s[0])));
    }
    Ok((s[1], s[2]))
}

/// Embedded-Gaussian position attention of `x` (`[C,H,W]`): returns the softmax
/// map `[HW, HW]` over keys for every query.
fn position_attention<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var, s: usize) -> Result<Var> {
    let q = layers::linear(g, &format!("{prefix}.wq"), x)?;
    let k = layers::linear(g, &format!("{prefix}.wk"), x)?;
    let (q, k) = (flatten(g, q), flatten(g, k));
    let logits = lite_position_logits(g, q, k, s);
    Ok(g.softmax(logits, 1))
}

/// `out[:, i] = sum_j attn[i, j] values[:, j]` for `values` `[C, HW]`.
fn aggregate_positions<T: Scalar>(g: &mut Graph<'_, T>, attn: Var, values: Var) -> Var {
    g.matmul(values, false, attn, true)
}

/// Residual non-local block with embedded-Gaussian affinities:
/// `Z = X + W_z sum_j softmax_j((W_q X_i)^T W_k X_j) W_v X_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonLocalBlock {
    pub channels: usize,
}

impl NonLocalBlock {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }

    pub fn embed(&self) -> usize {
        embed_width(self.channels)
    }

    /// `W_q`, `W_k`, `W_v` random; `W_z` zero so the block starts as identity.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let (c, e) = (self.channels, self.embed());
        for name in ["wq", "wk", "wv"] {
            layers::add_conv(store, &format!("{prefix}.{name}"), e, c, 1, false, Init::Kaiming, rng);
        }
        layers::add_conv(store, &format!("{prefix}.wz"), c, e, 1, true, Init::Zeros, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        ContextAttentionSpec::non_local(prefix).apply(g, &[x], self.channels)
    }

    /// Evaluates the block on plain values.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, prefix, xv)?;
        Ok(g.value(out).clone())
    }

    /// The `[HW, HW]` attention map the block uses on `x`.
    pub fn attention_map<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str, x: &FeatureMap<T>) -> Result<AttentionMap<T>> {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x.clone());
        check_feature(&g, xv, self.channels, "non-local block")?;
        let a = position_attention(&mut g, prefix, xv, 1)?;
        Ok(AttentionMap {
            mode: AttentionMode::Position,
            data: g.value(a).clone(),
        })
    }
}

/// Global-context block: one position softmax pools a context vector, which a
/// bottleneck (1x1, layer norm, ReLU, 1x1) turns into a per-channel offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalContextBlock {
    pub channels: usize,
}

impl GlobalContextBlock {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }

    pub fn bottleneck(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let (c, r) = (self.channels, self.bottleneck());
        layers::add_conv(store, &format!("{prefix}.wk"), 1, c, 1, false, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{prefix}.w1"), r, c, 1, true, Init::Kaiming, rng);
        layers::add_layer_norm(store, &format!("{prefix}.ln"), r);
        layers::add_conv(store, &format!("{prefix}.wz"), c, r, 1, true, Init::Zeros, rng);
    }

    /// Softmax over positions of `W_k X`, as a `[1, HW]` map.
    fn pooling_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let logits = layers::linear(g, &format!("{prefix}.wk"), x)?;
        let logits = flatten(g, logits);
        Ok(g.softmax(logits, 1))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let (h, w) = check_feature(g, x, self.channels, "global-context block")?;
        let attn = self.pooling_weights(g, prefix, x)?;
        let xm = flatten(g, x);
        let ctx = g.matmul(xm, false, attn, true);
        let ctx = g.reshape(ctx, &[self.channels, 1, 1]);
        let t = layers::linear(g, &format!("{prefix}.w1"), ctx)?;
        let t = layers::layer_norm(g, &format!("{prefix}.ln"), t)?;
        let t = g.relu(t);
        let t = layers::linear(g, &format!("{prefix}.wz"), t)?;
        let t = g.broadcast_spatial(t, h, w);
        Ok(g.add(x, t))
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, prefix, xv)?;
        Ok(g.value(out).clone())
    }

    /// Pooled context vector `sum_j A_j X_j`, `[C]`.
    pub fn context_vector<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str, x: &FeatureMap<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x.clone());
        check_feature(&g, xv, self.channels, "global-context block")?;
        let attn = self.pooling_weights(&mut g, prefix, xv)?;
        let xm = flatten(&mut g, xv);
        let ctx = g.matmul(xm, false, attn, true);
        g.value(ctx).clone().reshape(&[self.channels])
    }

    /// The `[1, HW]` position softmax (one normalization slice).
    pub fn attention_map<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str, x: &FeatureMap<T>) -> Result<AttentionMap<T>> {
        let mut g = Graph::new(store, false);
        let xv = g.constant(x.clone());
        check_feature(&g, xv, self.channels, "global-context block")?;
        let a = self.pooling_weights(&mut g, prefix, xv)?;
        Ok(AttentionMap {
            mode: AttentionMode::Channel,
            data: g.value(a).clone(),
        })
    }
}

type InputsFn<T> = Box<dyn for<'g, 'p> Fn(&'g mut Graph<'p, T>, &[Var]) -> Result<Var>>;
type PairFn<T> = Box<dyn for<'g, 'p> Fn(&'g mut Graph<'p, T>, Var, Var) -> Result<Var>>;

/// `Z = G(T(X), F(A(X), sum_k w_k X_k))` over one or more same-sized inputs.
///
/// * `attention` builds an attention map from the inputs,
/// * `target` is the main operation on the inputs,
/// * `aggregate` combines the attention map with the weighted input sum and
///   transforms it into a context feature,
/// * `fuse` merges the target output with the context.
pub struct ContextAttentionSpec<T> {
    pub input_weights: Vec<T>,
    pub attention: InputsFn<T>,
    pub target: InputsFn<T>,
    pub aggregate: PairFn<T>,
    pub fuse: PairFn<T>,
}

impl<T: Scalar> ContextAttentionSpec<T> {
    /// The single-input non-local block: embedded-Gaussian attention, all-pass
    /// target, `W_z W_v`-transformed aggregation and additive fusion.
    pub fn non_local(prefix: &str) -> Self {
        let (pa, pg) = (prefix.to_string(), prefix.to_string());
        Self {
            input_weights: vec![T::one()],
            attention: Box::new(move |g, xs| position_attention(g, &pa, xs[0], 1)),
            target: Box::new(|_, xs| Ok(xs[0])),
            aggregate: Box::new(move |g, attn, mixed| {
                let (_, h, w) = g.value(mixed).dims3();
                let v = layers::linear(g, &format!("{pg}.wv"), mixed)?;
                let e = g.shape(v)[0];
                let vm = flatten(g, v);
                let ctx = aggregate_positions(g, attn, vm);
                let ctx = g.reshape(ctx, &[e, h, w]);
                layers::linear(g, &format!("{pg}.wz"), ctx)
            }),
            fuse: Box::new(|g, t, c| Ok(g.add(t, c))),
        }
    }

    /// Evaluates the framework; `channels` is the expected input width.
    pub fn apply(&self, g: &mut Graph<'_, T>, inputs: &[Var], channels: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("context framework needs at least one input".into()));
        }
        if self.input_weights.is_empty() {
            return Err(Error::InvalidArgument("empty input weight list".into()));
        }
        if self.input_weights.len() != inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} input weights for {} inputs",
                self.input_weights.len(),
                inputs.len()
            )));
        }
        if self.input_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("input weights".into()));
        }
        let first = g.shape(inputs[0]).to_vec();
        check_feature(g, inputs[0], channels, "context framework")?;
        for &x in &inputs[1..] {
            if g.shape(x) != first.as_slice() {
                return Err(Error::Shape(format!(
                    "context framework inputs differ: {first:?} vs {:?}",
                    g.shape(x)
                )));
            }
        }
        let target = (self.target)(g, inputs)?;
        let attn = (self.attention)(g, inputs)?;
        let weighted: Vec<Var> = inputs
            .iter()
            .zip(&self.input_weights)
            .map(|(&x, &w)| g.scale(x, w))
            .collect();
        let mixed = g.add_n(&weighted);
        let context = (self.aggregate)(g, attn, mixed)?;
        (self.fuse)(g, target, context)
    }
}

/// Evaluates a framework instance on plain values.
pub fn apply_context_framework<T: Scalar>(
    spec: &ContextAttentionSpec<T>,
    store: &ParamStore<T>,
    inputs: &[FeatureMap<T>],
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new(store, false);
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let channels = inputs.first().map(|x| x.shape()[0]).unwrap_or(0);
    let out = spec.apply(&mut g, &vars, channels)?;
    Ok(g.value(out).clone())
}
