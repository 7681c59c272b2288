//! Losses, synthetic data, the training loop, and the ablation and lite-product
//! benchmark harnesses.

pub mod ablation;
pub mod bench;
pub mod loss;
pub mod synthetic;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, standard_grid, AblationEntry, AblationRow, AblationTable};
pub use bench::{bench_litemul, BenchRecord};
pub use loss::{downsample_flow, multiscale_loss, multiscale_loss_graph, LossConfig, LossMode};
pub use synthetic::{generate_one, generate_synthetic, SyntheticSample, SyntheticSpec};

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{self, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn d_steps() -> usize {
    2000
}
fn d_lr() -> f64 {
    1e-4
}
fn d_halve() -> f64 {
    0.6
}
fn d_batch() -> usize {
    8
}

/// Optimizer and schedule settings. The learning rate is constant and halves
/// once, after `halve_at` of the steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_halve")]
    pub halve_at: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Seeds both parameter initialization and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: d_steps(),
            lr: d_lr(),
            halve_at: d_halve(),
            batch_size: d_batch(),
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.halve_at) {
            return Err(Error::InvalidArgument("halve_at must lie in [0, 1]".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidArgument("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let cut = (self.halve_at * self.steps as f64).round() as usize;
        if step >= cut {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// 1-based.
    pub step: usize,
    pub total_loss: f64,
    /// Unweighted per-stage losses, coarse to fine.
    pub stage_losses: Vec<f64>,
    pub lr: f64,
}

/// Adaptive-moment optimizer with `beta = (0.9, 0.999)`.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    t: i32,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(ADAM_EPS * c2.sqrt());
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one sample.
pub struct SampleGrad<T> {
    pub total: f64,
    pub stages: Vec<f64>,
    pub grads: BTreeMap<String, Tensor<T>>,
}

pub fn sample_gradients<T: Scalar>(
    net: &NetworkConfig,
    loss: &LossConfig,
    params: &ParamStore<T>,
    sample: &SyntheticSample<T>,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new(params, true);
    let a = g.constant(sample.pair.frame1.clone());
    let b = g.constant(sample.pair.frame2.clone());
    let out = network::forward_graph(&mut g, net, a, b)?;
    let (total, stages) = multiscale_loss_graph(&mut g, &out.stage_flows, &sample.gt_flow, loss)?;
    let value = |v| g.value(v).data()[0].to_f64_lossy();
    let stage_vals = stages.iter().map(|&s| value(s)).collect();
    let total_val = value(total);
    Ok(SampleGrad {
        total: total_val,
        stages: stage_vals,
        grads: g.param_grads(total),
    })
}

/// Trained parameters and the per-step log.
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub log: Vec<LogEntry>,
}

/// Trains freshly initialized parameters.
pub fn train<T: Scalar>(
    net: &NetworkConfig,
    loss: &LossConfig,
    data: &[SyntheticSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let params = network::init_params(net, cfg.seed)?;
    train_from(net, loss, data, cfg, params, |_| {})
}

/// Trains `params` in place, reporting each log entry as it is produced.
pub fn train_from<T: Scalar>(
    net: &NetworkConfig,
    loss: &LossConfig,
    data: &[SyntheticSample<T>],
    cfg: &TrainConfig,
    mut params: ParamStore<T>,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    loss.validate()?;
    network::check_compatible(net, &params)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let mut order_rng = crate::layers::ModelRng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut total = 0.0;
        let mut stages = vec![0.0; loss.stage_weights.len()];
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let idx = order.pop().expect("refilled");
            let sg = sample_gradients(net, loss, &params, &data[idx])?;
            if !sg.total.is_finite() {
                return Err(Error::Divergence {
                    step: step + 1,
                    detail: format!("loss is {} on sample {idx}", sg.total),
                });
            }
            total += sg.total;
            stages.iter_mut().zip(&sg.stages).for_each(|(a, b)| *a += b);
            for (name, g) in sg.grads {
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut norm2 = 0.0;
        for g in acc.values_mut() {
            g.scale_inplace(T::lit(inv));
            norm2 += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        if !norm2.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                detail: "non-finite gradient".into(),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = norm2.sqrt();
            if norm > clip {
                acc.values_mut().for_each(|g| g.scale_inplace(T::lit(clip / norm)));
            }
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut params, &acc, lr)?;
        let entry = LogEntry {
            step: step + 1,
            total_loss: total * inv,
            stage_losses: stages.iter().map(|s| s * inv).collect(),
            lr,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Writes the log as JSON lines.
pub fn write_log(path: impl AsRef<Path>, log: &[LogEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Pixel-weighted AEE and Fl-all of the model's final flow over `samples`.
pub fn evaluate_samples<T: Scalar>(
    net: &NetworkConfig,
    params: &ParamStore<T>,
    samples: &[SyntheticSample<T>],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut aee, mut fl, mut count) = (0.0, 0.0, 0usize);
    for s in samples {
        let pred = network::infer(&s.pair, net, params)?;
        let r = metrics::evaluate(&pred, &s.gt_flow, None)?;
        aee += r.aee * r.count as f64;
        fl += r.fl_all * r.count as f64;
        count += r.count;
    }
    Ok(EvalReport {
        aee: aee / count as f64,
        fl_all: fl / count as f64,
        count,
    })
}
