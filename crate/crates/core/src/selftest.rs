//! Built-in invariant suite: finite-difference gradient checks of every block,
//! attention-map normalization over random inputs, and the identity behaviour
//! of freshly initialized context blocks. The `selftest` command runs it, and
//! the integration tests share its fixtures.

use rand::Rng;

use crate::attention::{
    attention_matmul, lite_matmul, AttentionMap, AttentionMode, FlopCounter, GlobalContextBlock, NonLocalBlock,
};
use crate::autodiff::check::{check_gradients, randomize_params, CheckOptions, GradCheck};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::flow::{decode_flo, encode_flo, FlowField, FramePair};
use crate::layers::{seeded_rng, ModelRng};
use crate::network::{init_params, stcflow_forward, NetworkConfig};
use crate::psc::{psc_forward, PscBlock, PscCarry};
use crate::rrcu::{rrcu_forward, transposed_upsample, RrcuBlock, UpsampleKernelField};
use crate::scalar::Scalar;
use crate::tcc::{correlate, tcc_forward, TccBlock};
use crate::tensor::Tensor;
use crate::train::{multiscale_loss_graph, LossConfig};
use crate::Tensor64;

/// Largest accepted relative error of an analytic gradient.
pub const GRAD_TOL: f64 = 1e-4;
/// Largest accepted deviation of an attention map's row sums from one.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Outcome of one invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteOptions {
    /// Random inputs drawn for the normalization sweep (six maps each).
    pub normalization_trials: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            normalization_trials: 200,
            seed: 0,
        }
    }
}

/// Runs every invariant and reports each one; fixture errors abort the run.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, r) in gradient_suite()? {
        checks.push(Check::new(
            format!("gradient {name}"),
            r.max_rel_error < GRAD_TOL,
            format!("max rel error {:.2e} over {} entries ({})", r.max_rel_error, r.entries, r.worst),
        ));
    }

    let n = normalization_sweep(opts.normalization_trials, opts.seed)?;
    checks.push(Check::new(
        "attention maps sum to one",
        n.max_sum_error < NORMALIZATION_TOL && n.min_entry >= 0.0,
        format!("{} maps, max |sum-1| {:.1e}, min entry {:.1e}", n.maps, n.max_sum_error, n.min_entry),
    ));

    for (name, dev) in fresh_block_deviation()? {
        checks.push(Check::new(
            format!("fresh {name} is the identity"),
            dev == 0.0,
            format!("max deviation {dev:.1e}"),
        ));
    }

    let mut rng = seeded_rng(opts.seed ^ 0x51);
    let f = uniform(&[5, 7, 9], -3.0, 3.0, &mut rng);
    let warped = crate::network::warp(&f, &FlowField::zeros(7, 9))?;
    checks.push(Check::new("warp by zero flow", warped == f, "bit-exact comparison"));

    let flow = FlowField::new(uniform(&[2, 13, 17], -50.0, 50.0, &mut rng).cast::<f32>())?;
    let back = decode_flo(&encode_flo(&flow)?)?;
    let same = back.tensor().data().iter().zip(flow.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(Check::new(".flo round trip", same, "bit-exact comparison"));

    checks.push(lite_check(&mut rng)?);
    checks.push(shape_check(&mut rng)?);
    Ok(checks)
}

fn lite_check(rng: &mut ModelRng) -> Result<Check> {
    let mut exact = true;
    let mut ratio_err = 0f64;
    for m in [8, 16, 32, 64] {
        let f = uniform(&[m, 6], -1.0, 1.0, rng);
        let mut c1 = FlopCounter::new();
        let l1 = lite_matmul(&f, 1, AttentionMode::Position, &mut c1)?;
        exact &= l1 == attention_matmul(&f, &f, AttentionMode::Position, &mut FlopCounter::new())?;
        for s in [2usize, 4] {
            let mut cs = FlopCounter::new();
            lite_matmul(&f, s, AttentionMode::Position, &mut cs)?;
            let ratio = cs.flops() as f64 / c1.flops() as f64;
            ratio_err = ratio_err.max((ratio - 1.0 / s as f64).abs());
        }
    }
    Ok(Check::new(
        "lite product",
        exact && ratio_err == 0.0,
        format!("s=1 matches the exact product: {exact}; FLOP ratio error at s=2,4: {ratio_err:.1e}"),
    ))
}

fn shape_check(rng: &mut ModelRng) -> Result<Check> {
    // widths do not change the shapes, so the toy model keeps this quick
    let cfg = NetworkConfig::toy(8);
    let params = init_params::<f32>(&cfg, 0)?;
    let mut frame = || uniform(&[3, 448, 384], 0.0, 1.0, rng).cast::<f32>();
    let pair = FramePair::new(frame(), frame())?;
    let out = stcflow_forward(&pair, &cfg, &params)?;
    let got: Vec<(usize, usize)> = out.stage_flows.iter().map(|f| (f.height(), f.width())).collect();
    let want = [(7, 6), (14, 12), (28, 24), (56, 48), (112, 96)];
    let last = out.final_flow.tensor().shape().to_vec();
    Ok(Check::new(
        "448x384 shape contract",
        got == want && last == [2, 448, 384],
        format!("stage flows {got:?}, final {last:?}"),
    ))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ModelRng) -> Tensor64 {
    Tensor64::uniform(shape, lo, hi, rng)
}

/// A store initialized by `init`, then fully randomized so that zero-initialized
/// output projections carry gradient too.
pub fn random_store(seed: u64, init: impl FnOnce(&mut ParamStore<f64>, &mut ModelRng)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    init(&mut store, &mut rng);
    randomize_params(&mut store, 0.5, seed ^ 0xA5A5);
    store
}

pub fn nl_block() -> NonLocalBlock {
    NonLocalBlock::new(4)
}

pub fn gc_block() -> GlobalContextBlock {
    GlobalContextBlock::new(8)
}

/// Stage-4 PSC with a 3-channel carry and polyphase factor 2.
pub fn psc_block() -> PscBlock {
    PscBlock::new(4, 4, Some(3), 2)
}

pub fn tcc_block(lite: usize) -> TccBlock {
    TccBlock::new(3, 4, 1, lite)
}

pub type Case = (&'static str, GradCheck);

fn run(
    name: &'static str,
    store: &ParamStore<f64>,
    inputs: &[Tensor64],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<Case> {
    let report = check_gradients(store, inputs, CheckOptions::default(), f)?;
    Ok((name, report))
}

pub fn grad_non_local() -> Result<Case> {
    let block = nl_block();
    let store = random_store(1, |s, r| block.init(s, "nl", r));
    let x = uniform(&[4, 3, 4], -1.0, 1.0, &mut seeded_rng(11));
    run("non_local_block", &store, &[x], |g, v| block.forward(g, "nl", v[0]))
}

pub fn grad_global_context() -> Result<Case> {
    let block = gc_block();
    let store = random_store(2, |s, r| block.init(s, "gc", r));
    let x = uniform(&[8, 3, 3], -1.0, 1.0, &mut seeded_rng(12));
    run("global_context_block", &store, &[x], |g, v| block.forward(g, "gc", v[0]))
}

pub fn grad_psc() -> Result<Case> {
    let block = psc_block();
    let store = random_store(3, |s, r| block.init(s, r));
    let mut rng = seeded_rng(13);
    let f = uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
    let cp = uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
    let cc = uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
    run("psc_forward", &store, &[f, cp, cc], |g, v| {
        let carry = PscCarry { c_p: v[1], c_c: v[2] };
        let (out, next) = block.forward(g, v[0], Some(carry))?;
        // the carries leave the block as well
        let c = g.concat0(&[next.c_p, next.c_c]);
        let c = g.scale(c, 0.5);
        let o = g.concat0(&[out, c]);
        Ok(o)
    })
}

pub fn grad_correlate() -> Result<Case> {
    let store = ParamStore::new();
    let mut rng = seeded_rng(14);
    let f1 = uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
    let f2 = uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
    run("correlate", &store, &[f1, f2], |g, v| Ok(g.correlation(v[0], v[1], 2)))
}

pub fn grad_tcc(lite: usize) -> Result<Case> {
    let block = tcc_block(lite);
    let store = random_store(4 + lite as u64, |s, r| block.init(s, r));
    let mut rng = seeded_rng(15);
    let f1 = uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
    let f2 = uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
    let name = if lite > 1 { "tcc_forward (lite)" } else { "tcc_forward" };
    run(name, &store, &[f1, f2], |g, v| block.forward(g, v[0], v[1]))
}

pub fn grad_pixel_shuffle() -> Result<Case> {
    let store = ParamStore::new();
    let x = uniform(&[8, 2, 3], -1.0, 1.0, &mut seeded_rng(16));
    run("pixel_shuffle", &store, &[x], |g, v| Ok(g.pixel_shuffle(v[0], 2)))
}

pub fn grad_rrcu() -> Result<Case> {
    let block = RrcuBlock::new(4);
    let store = random_store(6, |s, r| block.init(s, r));
    let mut rng = seeded_rng(17);
    let y = uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let yp = uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
    run("rrcu_forward", &store, &[y, yp], |g, v| block.forward(g, v[0], v[1]))
}

pub fn grad_warp() -> Result<Case> {
    let store = ParamStore::new();
    let mut rng = seeded_rng(18);
    let f = uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
    // large enough that some samples leave the frame
    let flow = uniform(&[2, 5, 6], -2.5, 2.5, &mut rng);
    run("warp", &store, &[f, flow], |g, v| Ok(g.warp(v[0], v[1])))
}

fn loss_inputs(rng: &mut ModelRng) -> Vec<Tensor64> {
    [1usize, 2, 4, 8, 16]
        .iter()
        .map(|&s| uniform(&[2, s, s], -3.0, 3.0, rng))
        .collect()
}

pub fn grad_multiscale_loss(cfg: LossConfig, name: &'static str) -> Result<Case> {
    let store = ParamStore::new();
    let mut rng = seeded_rng(19);
    let inputs = loss_inputs(&mut rng);
    let gt = crate::flow::FlowField::new(uniform(&[2, 16, 16], -3.0, 3.0, &mut rng))?;
    run(name, &store, &inputs, |g, v| {
        let (total, _) = multiscale_loss_graph(g, v, &gt, &cfg)?;
        Ok(total)
    })
}

/// Every gradient case of the suite.
pub fn gradient_suite() -> Result<Vec<Case>> {
    Ok(vec![
        grad_non_local()?,
        grad_global_context()?,
        grad_psc()?,
        grad_correlate()?,
        grad_tcc(1)?,
        grad_tcc(2)?,
        grad_pixel_shuffle()?,
        grad_rrcu()?,
        grad_warp()?,
        grad_multiscale_loss(LossConfig::default(), "multiscale_loss (L2)")?,
        grad_multiscale_loss(LossConfig::charbonnier(), "multiscale_loss (Charbonnier)")?,
    ])
}

/// Worst normalization deviation found by [`normalization_sweep`].
#[derive(Clone, Copy, Debug, Default)]
pub struct NormReport {
    pub max_sum_error: f64,
    pub min_entry: f64,
    pub maps: usize,
}

impl NormReport {
    fn add(&mut self, (err, min): (f64, f64)) {
        if self.maps == 0 {
            self.min_entry = min;
        }
        self.max_sum_error = self.max_sum_error.max(err);
        self.min_entry = self.min_entry.min(min);
        self.maps += 1;
    }
}

fn rows_of<T: Scalar>(data: Tensor<T>, mode: AttentionMode) -> (f64, f64) {
    AttentionMap { mode, data }.normalization_error()
}

/// Builds random f32 blocks and inputs and checks every attention map: PSC
/// position rows, PSC channel pooling, TCC cross-attention rows, RRCU kernels
/// and the non-local and GC maps.
pub fn normalization_sweep(trials: usize, seed: u64) -> Result<NormReport> {

    let mut rng = seeded_rng(seed);
    let mut report = NormReport::default();
    for t in 0..trials {
        let c = rng.random_range(2..=6);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let lite = [1, 2, 4][t % 3];
        let scale = rng.random_range(0.5..4.0);
        let psc = PscBlock::new(3, c, None, lite);
        let tcc = TccBlock::new(3, c, 1, lite);
        let nl = NonLocalBlock::new(c);
        let gc = GlobalContextBlock::new(c);
        let store64 = random_store(seed.wrapping_add(t as u64), |s, r| {
            psc.init(s, r);
            tcc.init(s, r);
            nl.init(s, "nl", r);
            gc.init(s, "gc", r);
        });
        let store: ParamStore<f32> = store64.cast();
        let f1: Tensor<f32> = uniform(&[c, h, w], -scale, scale, &mut rng).cast();
        let f2: Tensor<f32> = uniform(&[c, h, w], -scale, scale, &mut rng).cast();

        report.add(rows_of(psc.position_attention(&store, &f1)?, AttentionMode::Position));
        report.add(rows_of(psc.channel_attention(&store, &f1)?, AttentionMode::Channel));
        report.add(nl.attention_map(&store, "nl", &f1)?.normalization_error());
        report.add(gc.attention_map(&store, "gc", &f1)?.normalization_error());

        let mut g = Graph::new(&store, false);
        let (a, b) = (g.constant(f1.clone()), g.constant(f2));
        let at = tcc.attention(&mut g, a, b)?;
        report.add(rows_of(g.value(at).clone(), AttentionMode::Channel));

        let logits: Tensor<f32> = uniform(&[36, h, w], -3.0 * scale, 3.0 * scale, &mut rng).cast();
        let k = UpsampleKernelField::new(logits, 2, 3)?.normalized()?;
        let (kk, oh, ow) = k.dims3();
        let per_position = Tensor::from_fn(&[oh * ow, kk], |i| k.data()[i[1] * oh * ow + i[0]]);
        report.add(rows_of(per_position, AttentionMode::Position));
    }
    Ok(report)
}

/// Largest deviation from the identity or baseline behaviour of freshly
/// initialized context blocks, by block name.
pub fn fresh_block_deviation() -> Result<Vec<(&'static str, f64)>> {

    let mut rng = seeded_rng(77);
    let mut out = Vec::new();
    let x = uniform(&[6, 4, 4], -1.0, 1.0, &mut rng);
    let x2 = uniform(&[6, 4, 4], -1.0, 1.0, &mut rng);

    let mut store = ParamStore::new();
    let nl = NonLocalBlock::new(6);
    let gc = GlobalContextBlock::new(6);
    let first = PscBlock::new(3, 6, None, 2);
    let second = PscBlock::new(4, 6, Some(6), 2);
    let tcc = TccBlock::new(3, 6, 2, 2);
    let rrcu = RrcuBlock::new(4);
    nl.init(&mut store, "nl", &mut rng);
    gc.init(&mut store, "gc", &mut rng);
    first.init(&mut store, &mut rng);
    second.init(&mut store, &mut rng);
    tcc.init(&mut store, &mut rng);
    rrcu.init(&mut store, &mut rng);

    out.push(("non_local_block", nl.apply(&store, "nl", &x)?.max_abs_diff(&x)));
    out.push(("global_context_block", gc.apply(&store, "gc", &x)?.max_abs_diff(&x)));
    let (y3, s3) = psc_forward(&first, &store, &x, None)?;
    let coarse = uniform(&[6, 2, 2], -1.0, 1.0, &mut rng);
    let (y4, _) = psc_forward(&second, &store, &coarse, Some(&s3))?;
    out.push(("psc_forward", y3.max_abs_diff(&x).max(y4.max_abs_diff(&coarse))));
    let want = correlate(&x, &x2, 2)?.data;
    out.push(("tcc_forward", tcc_forward(&tcc, &store, &x, &x2)?.max_abs_diff(&want)));

    let y = FlowField::new(uniform(&[2, 4, 4], -2.0, 2.0, &mut rng))?;
    let yp = FlowField::new(uniform(&[2, 4, 4], -2.0, 2.0, &mut rng))?;
    let got = rrcu_forward(&rrcu, &store, &y, &yp)?;
    let mut g = Graph::new(&store, false);
    let yv = g.constant(y.tensor().clone());
    let base = transposed_upsample(&mut g, "rrcu.stage4.deconv", yv)?;
    out.push(("rrcu_forward", got.tensor().max_abs_diff(g.value(base))));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_short_sweep() {
        let opts = SuiteOptions {
            normalization_trials: 12,
            seed: 4,
        };
        let checks = run_suite(&opts).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(checks.len() > 15);
    }
}
