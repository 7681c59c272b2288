//! Coarse-to-fine flow network: a six-stage feature pyramid, optional context
//! modules, per-stage decoders and the final x4 upsampling.
//!
//! Stage `k` works at `1 / 2^k` of the (padded) input resolution. Flow is
//! predicted at stages 6 to 2; each finer stage warps the second frame's
//! features by the upsampled coarser flow and predicts a residual on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{warp_values, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowField, FramePair};
use crate::layers::{self, seeded_rng, Init};
use crate::psc::{self, PscBlock, PscCarry, PscState};
use crate::rrcu::{self, RrcuBlock};
use crate::scalar::Scalar;
use crate::tcc::{self, CostKind, Decoder, TccBlock, Upsampled, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::FeatureMap;

pub const STAGES: usize = 6;
/// Padded inputs must be a multiple of this size.
pub const SIZE_MULTIPLE: usize = 1 << STAGES;
/// Stages that predict flow, coarse to fine.
pub const FLOW_STAGES: [usize; 5] = [6, 5, 4, 3, 2];
/// Stages with PSC (fine to coarse) and with RRCU upsampling into them.
pub const CONTEXT_STAGES: [usize; 3] = [3, 4, 5];
/// Stages whose cost volume may use TCC.
pub const TCC_STAGES: [usize; 4] = [3, 4, 5, 6];

fn default_stage_channels() -> [usize; STAGES] {
    [16, 32, 64, 96, 128, 196]
}

fn default_decoder_widths() -> Vec<usize> {
    vec![128, 96, 64, 32]
}

fn default_max_displacement() -> usize {
    4
}

fn default_lite() -> usize {
    2
}

fn yes() -> bool {
    true
}

/// Architecture description. Widths are divided by `toy_scale` when set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; STAGES],
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "default_max_displacement")]
    pub max_displacement: usize,
    #[serde(default = "default_lite")]
    pub lite_factor: usize,
    /// Apply the lite factor inside TCC's attention product too.
    #[serde(default = "yes")]
    pub tcc_lite: bool,
    #[serde(default = "yes")]
    pub use_psc: bool,
    #[serde(default = "yes")]
    pub use_tcc: bool,
    #[serde(default = "yes")]
    pub use_rrcu: bool,
    #[serde(default)]
    pub toy_scale: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: default_stage_channels(),
            decoder_widths: default_decoder_widths(),
            max_displacement: default_max_displacement(),
            lite_factor: default_lite(),
            tcc_lite: true,
            use_psc: true,
            use_tcc: true,
            use_rrcu: true,
            toy_scale: None,
        }
    }
}

impl NetworkConfig {
    /// Full model with all widths divided by `scale`.
    pub fn toy(scale: usize) -> Self {
        Self {
            toy_scale: Some(scale),
            ..Self::default()
        }
    }

    /// The same architecture with every context module switched off.
    pub fn baseline(&self) -> Self {
        Self {
            use_psc: false,
            use_tcc: false,
            use_rrcu: false,
            ..self.clone()
        }
    }

    pub fn with_modules(&self, psc: bool, tcc: bool, rrcu: bool) -> Self {
        Self {
            use_psc: psc,
            use_tcc: tcc,
            use_rrcu: rrcu,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_displacement < 1 {
            return Err(Error::InvalidArgument("max_displacement must be >= 1".into()));
        }
        if ![1, 2, 4].contains(&self.lite_factor) {
            return Err(Error::InvalidArgument(format!(
                "lite_factor must be 1, 2 or 4, got {}",
                self.lite_factor
            )));
        }
        if self.decoder_widths.is_empty() {
            return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
        }
        if self.toy_scale == Some(0) {
            return Err(Error::InvalidArgument("toy_scale must be >= 1".into()));
        }
        if self.stage_channels.iter().chain(&self.decoder_widths).any(|&c| c == 0) {
            return Err(Error::InvalidArgument("widths must be >= 1".into()));
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        (c / self.toy_scale.unwrap_or(1)).max(1)
    }

    /// Feature width at stage `k` (1-based).
    pub fn channels(&self, k: usize) -> usize {
        self.scaled(self.stage_channels[k - 1])
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.decoder_widths.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn cost_channels(&self) -> usize {
        tcc::displacement_channels(self.max_displacement)
    }

    pub fn psc_blocks(&self) -> Vec<PscBlock> {
        let chans: Vec<usize> = CONTEXT_STAGES.iter().map(|&k| self.channels(k)).collect();
        psc::pyramid_blocks(&CONTEXT_STAGES, &chans, self.lite_factor)
    }

    pub fn cost_kind(&self, k: usize) -> CostKind {
        if self.use_tcc && TCC_STAGES.contains(&k) {
            let lite = if self.tcc_lite { self.lite_factor } else { 1 };
            CostKind::Contextual(TccBlock::new(k, self.channels(k), self.max_displacement, lite))
        } else {
            CostKind::Correlation {
                max_displacement: self.max_displacement,
            }
        }
    }

    pub fn decoder(&self, k: usize) -> Decoder {
        Decoder::new(k, self.cost_channels(), self.channels(k), k < 6, &self.decoder_widths())
    }

    /// Whether the flow fed into stage `k` comes from an RRCU block.
    pub fn uses_rrcu_into(&self, k: usize) -> bool {
        self.use_rrcu && CONTEXT_STAGES.contains(&k)
    }
}

fn pyramid_prefix(k: usize) -> String {
    format!("pyr.stage{k}")
}

fn upflow_name(k: usize) -> String {
    format!("upflow.stage{k}")
}

fn upfeat_name(k: usize) -> String {
    format!("upfeat.stage{k}")
}

/// Creates every parameter of `config`, deterministically from `seed`.
pub fn init_params<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    init_into(config, &mut store, &mut rng);
    Ok(store)
}

fn init_into<T: Scalar, R: Rng + ?Sized>(config: &NetworkConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let mut cin = 3;
    for k in 1..=STAGES {
        let c = config.channels(k);
        let p = pyramid_prefix(k);
        layers::add_conv(store, &format!("{p}.conv0"), c, cin, 3, true, Init::Kaiming, rng);
        layers::add_conv(store, &format!("{p}.conv1"), c, c, 3, true, Init::Kaiming, rng);
        cin = c;
    }
    if config.use_psc {
        for b in config.psc_blocks() {
            b.init(store, rng);
        }
    }
    let feat_width = *config.decoder_widths().last().expect("validated");
    for k in FLOW_STAGES {
        if let CostKind::Contextual(b) = config.cost_kind(k) {
            b.init(store, rng);
        }
        config.decoder(k).init(store, rng);
        if k < 6 {
            if config.uses_rrcu_into(k) {
                RrcuBlock::new(k).init(store, rng);
            } else {
                layers::add_deconv(store, &upflow_name(k), 2, 2, 4, true, Init::Bilinear, rng);
            }
            layers::add_deconv(store, &upfeat_name(k), feat_width, 2, 4, true, Init::Kaiming, rng);
        }
    }
}

/// Number of scalar parameters, after checking that `params` matches `config`
/// name for name and shape for shape.
pub fn count_parameters<T: Scalar>(config: &NetworkConfig, params: &ParamStore<T>) -> Result<usize> {
    check_compatible(config, params)?;
    Ok(params.scalar_count())
}

/// Fails unless `params` holds exactly the tensors `config` creates.
pub fn check_compatible<T: Scalar>(config: &NetworkConfig, params: &ParamStore<T>) -> Result<()> {
    let template = init_params::<f32>(config, 0)?;
    if template.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "configuration has {} tensors, parameters have {}",
            template.len(),
            params.len()
        )));
    }
    for (name, t) in template.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, configuration expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Two-convolution pyramid stage outputs for one frame, stages 1..6.
pub fn pyramid_graph<T: Scalar>(g: &mut Graph<'_, T>, frame: Var) -> Result<Vec<Var>> {
    let s = g.shape(frame).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("frames must be [3,H,W], got {s:?}")));
    }
    if s[1] % SIZE_MULTIPLE != 0 || s[2] % SIZE_MULTIPLE != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape(format!(
            "frame size {}x{} is not a positive multiple of {SIZE_MULTIPLE}; pad the input first",
            s[1], s[2]
        )));
    }
    let slope = T::lit(LEAKY_SLOPE);
    let mut x = frame;
    let mut out = Vec::with_capacity(STAGES);
    for k in 1..=STAGES {
        let p = pyramid_prefix(k);
        let y = layers::conv(g, &format!("{p}.conv0"), x, 2, 1)?;
        let y = g.leaky_relu(y, slope);
        let y = layers::conv(g, &format!("{p}.conv1"), y, 1, 1)?;
        x = g.leaky_relu(y, slope);
        out.push(x);
    }
    Ok(out)
}

/// Stage features of one frame, stages 1..6.
pub fn extract_pyramid<T: Scalar>(
    frame: &Tensor<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
) -> Result<Vec<FeatureMap<T>>> {
    config.validate()?;
    for k in 1..=STAGES {
        let name = format!("{}.conv1.weight", pyramid_prefix(k));
        let got = params.get(&name)?.shape()[0];
        if got != config.channels(k) {
            return Err(Error::Shape(format!(
                "stage {k} parameters have {got} channels, configuration says {}",
                config.channels(k)
            )));
        }
    }
    let mut g = Graph::new(params, false);
    let f = g.constant(frame.clone());
    let vars = pyramid_graph(&mut g, f)?;
    Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Backward bilinear warp: `out(c, x) = F(c, x + flow(x))`, zero outside the frame.
pub fn warp<T: Scalar>(f: &FeatureMap<T>, flow: &FlowField<T>) -> Result<FeatureMap<T>> {
    if f.rank() != 3 || f.shape()[1..] != flow.tensor().shape()[1..] {
        return Err(Error::Shape(format!(
            "cannot warp {:?} by a flow of shape {:?}",
            f.shape(),
            flow.tensor().shape()
        )));
    }
    Ok(warp_values(f, flow.tensor()))
}

/// Graph nodes of one flow-predicting stage.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub stage: usize,
    pub feature: Var,
    pub flow: Var,
    pub decoder_feat: Var,
    pub psc: Option<PscCarry>,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub final_flow: Var,
    /// Stages 6..2.
    pub stage_flows: Vec<Var>,
    pub stages: Vec<StageVars>,
}

/// Full forward pass on a graph.
pub fn forward_graph<T: Scalar>(g: &mut Graph<'_, T>, config: &NetworkConfig, frame1: Var, frame2: Var) -> Result<ForwardVars> {
    config.validate()?;
    if g.shape(frame1) != g.shape(frame2) {
        return Err(Error::Shape("frames differ in shape".into()));
    }
    let (_, h, w) = g.value(frame1).dims3();
    let mut p1 = pyramid_graph(g, frame1)?;
    let mut p2 = pyramid_graph(g, frame2)?;
    let mut carries: Vec<Option<PscCarry>> = vec![None; STAGES + 1];
    if config.use_psc {
        let blocks = config.psc_blocks();
        let (e1, c1) = apply_psc(g, &blocks, p1)?;
        let (e2, _) = apply_psc(g, &blocks, p2)?;
        p1 = e1;
        p2 = e2;
        for (&k, c) in CONTEXT_STAGES.iter().zip(c1) {
            carries[k] = Some(c);
        }
    }

    let mut stage_flows = Vec::with_capacity(FLOW_STAGES.len());
    let mut stages = Vec::with_capacity(FLOW_STAGES.len());
    let mut prev: Option<(Var, Var)> = None; // (flow, decoder feature) of the coarser stage
    let mut fed_flow: Option<Var> = None; // upsampled flow that fed the coarser stage
    for k in FLOW_STAGES {
        let (f1, f2) = (p1[k - 1], p2[k - 1]);
        let up = match prev {
            None => None,
            Some((coarse_flow, coarse_feat)) => {
                let flow = if config.uses_rrcu_into(k) {
                    let y_prev = match fed_flow {
                        Some(v) => v,
                        None => {
                            let s = g.shape(coarse_flow).to_vec();
                            g.constant(Tensor::zeros(&s))
                        }
                    };
                    RrcuBlock::new(k).forward(g, coarse_flow, y_prev)?
                } else {
                    rrcu::transposed_upsample(g, &upflow_name(k), coarse_flow)?
                };
                let feat = layers::deconv_x2(g, &upfeat_name(k), coarse_feat)?;
                Some(Upsampled { flow, feat })
            }
        };
        let f2w = match up {
            Some(u) => g.warp(f2, u.flow),
            None => f2,
        };
        let (flow, feat) = tcc::contextual_pwc_block(g, &config.cost_kind(k), &config.decoder(k), f1, f2w, up)?;
        stage_flows.push(flow);
        stages.push(StageVars {
            stage: k,
            feature: f1,
            flow,
            decoder_feat: feat,
            psc: carries[k],
        });
        fed_flow = up.map(|u| u.flow);
        prev = Some((flow, feat));
    }
    let finest = *stage_flows.last().expect("five stages");
    let up = g.resize_bilinear(finest, h, w);
    let final_flow = g.scale(up, T::lit(4.0));
    Ok(ForwardVars {
        final_flow,
        stage_flows,
        stages,
    })
}

/// Runs the PSC chain over stages 3..5 of one pyramid (weights shared between frames).
fn apply_psc<T: Scalar>(g: &mut Graph<'_, T>, blocks: &[PscBlock], mut p: Vec<Var>) -> Result<(Vec<Var>, Vec<PscCarry>)> {
    let mut carry = None;
    let mut carries = Vec::with_capacity(blocks.len());
    for block in blocks {
        let i = block.stage - 1;
        let (e, next) = block.forward(g, p[i], carry)?;
        p[i] = e;
        carries.push(next);
        carry = Some(next);
    }
    Ok((p, carries))
}

/// Per-stage values recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct StageState<T> {
    pub stage: usize,
    pub feature: FeatureMap<T>,
    pub flow: FlowField<T>,
    pub decoder_feat: FeatureMap<T>,
    pub psc_state: Option<PscState<T>>,
}

#[derive(Clone, Debug)]
pub struct PyramidState<T> {
    /// Stages 6..2.
    pub stages: Vec<StageState<T>>,
}

#[derive(Clone, Debug)]
pub struct StcFlowOutput<T> {
    pub final_flow: FlowField<T>,
    /// Stages 6..2, in pixels at each stage's resolution.
    pub stage_flows: Vec<FlowField<T>>,
    pub state: PyramidState<T>,
}

/// Predicts the flow from `frame1` to `frame2`; sizes must be multiples of 64.
pub fn stcflow_forward<T: Scalar>(
    pair: &FramePair<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
) -> Result<StcFlowOutput<T>> {
    let mut g = Graph::new(params, false);
    let a = g.constant(pair.frame1.clone());
    let b = g.constant(pair.frame2.clone());
    let out = forward_graph(&mut g, config, a, b)?;
    let flow = |v: Var| FlowField::new(g.value(v).clone());
    let stages = out
        .stages
        .iter()
        .map(|s| {
            Ok(StageState {
                stage: s.stage,
                feature: g.value(s.feature).clone(),
                flow: flow(s.flow)?,
                decoder_feat: g.value(s.decoder_feat).clone(),
                psc_state: s.psc.map(|c| PscState {
                    c_p: g.value(c.c_p).clone(),
                    c_c: g.value(c.c_c).clone(),
                    stage: s.stage,
                }),
            })
        })
        .collect::<Result<_>>()?;
    Ok(StcFlowOutput {
        final_flow: flow(out.final_flow)?,
        stage_flows: out.stage_flows.iter().map(|&v| flow(v)).collect::<Result<_>>()?,
        state: PyramidState { stages },
    })
}

/// Original size of a padded input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    /// Cuts a flow predicted on the padded input back to the original size.
    pub fn crop<T: Scalar>(&self, flow: &FlowField<T>) -> Result<FlowField<T>> {
        if flow.height() < self.height || flow.width() < self.width {
            return Err(Error::Shape(format!(
                "cannot crop {}x{} to {}x{}",
                flow.height(),
                flow.width(),
                self.height,
                self.width
            )));
        }
        let src = flow.tensor();
        FlowField::new(Tensor::from_fn(&[2, self.height, self.width], |i| src.at3(i[0], i[1], i[2])))
    }
}

fn pad_frame<T: Scalar>(f: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (_, fh, fw) = f.dims3();
    Tensor::from_fn(&[3, h, w], |i| {
        if i[1] < fh && i[2] < fw {
            f.at3(i[0], i[1], i[2])
        } else {
            T::zero()
        }
    })
}

/// Zero-pads both frames on the bottom/right to multiples of 64.
pub fn pad_input<T: Scalar>(pair: &FramePair<T>) -> Result<(FramePair<T>, CropRecord)> {
    let (h, w) = (pair.height(), pair.width());
    if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE {
        return Err(Error::Shape(format!("frames must be at least {SIZE_MULTIPLE}x{SIZE_MULTIPLE}, got {h}x{w}")));
    }
    let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE), w.next_multiple_of(SIZE_MULTIPLE));
    let record = CropRecord { height: h, width: w };
    if (ph, pw) == (h, w) {
        return Ok((pair.clone(), record));
    }
    let padded = FramePair::new(pad_frame(&pair.frame1, ph, pw), pad_frame(&pair.frame2, ph, pw))?;
    Ok((padded, record))
}

/// Pads, predicts and crops: flow for frames of any size >= 64x64.
pub fn infer<T: Scalar>(pair: &FramePair<T>, config: &NetworkConfig, params: &ParamStore<T>) -> Result<FlowField<T>> {
    let (padded, record) = pad_input(pair)?;
    let out = stcflow_forward(&padded, config, params)?;
    record.crop(&out.final_flow)
}
