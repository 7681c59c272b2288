//! Multi-scale supervision of the stage flows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Penalty, Var};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Squared endpoint error.
    L2,
    /// `(|e|^2 + eps^2)^q` of the endpoint error `e`.
    Charbonnier,
}

fn default_weights() -> Vec<f64> {
    vec![0.32, 0.08, 0.02, 0.01, 0.005]
}

fn default_mode() -> LossMode {
    LossMode::L2
}

fn default_eps() -> f64 {
    0.01
}

fn default_q() -> f64 {
    0.4
}

/// Stage weights run coarse to fine (stage 6 first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_weights")]
    pub stage_weights: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: LossMode,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_q")]
    pub q: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            stage_weights: default_weights(),
            mode: default_mode(),
            epsilon: default_eps(),
            q: default_q(),
        }
    }
}

impl LossConfig {
    pub fn charbonnier() -> Self {
        Self {
            mode: LossMode::Charbonnier,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_weights.is_empty() || self.stage_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("stage weights must be positive and finite".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidArgument("Charbonnier exponent must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn penalty(&self) -> Penalty {
        match self.mode {
            LossMode::L2 => Penalty::SquaredL2,
            LossMode::Charbonnier => Penalty::Charbonnier {
                eps: self.epsilon,
                q: self.q,
            },
        }
    }
}

/// Average-pools a flow by `factor` and divides the vectors by it, giving the
/// same motion in pixels of the coarser grid.
pub fn downsample_flow<T: Scalar>(flow: &FlowField<T>, factor: usize) -> Result<FlowField<T>> {
    let (h, w) = (flow.height(), flow.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} flow is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::lit((factor * factor * factor) as f64);
    let src = flow.tensor();
    let out = Tensor::from_fn(&[2, oh, ow], |i| {
        let mut acc = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                acc += src.at3(i[0], i[1] * factor + dy, i[2] * factor + dx);
            }
        }
        acc / norm
    });
    FlowField::new(out)
}

fn stage_targets<T: Scalar>(shapes: &[(usize, usize)], gt: &FlowField<T>, weights: usize) -> Result<Vec<FlowField<T>>> {
    if shapes.len() != weights {
        return Err(Error::InvalidArgument(format!(
            "{} stage flows but {weights} loss weights",
            shapes.len()
        )));
    }
    shapes
        .iter()
        .map(|&(h, w)| {
            let factor = gt.height() / h.max(1);
            if factor * h != gt.height() || factor * w != gt.width() {
                return Err(Error::Shape(format!(
                    "stage flow {h}x{w} is not an integer fraction of {}x{}",
                    gt.height(),
                    gt.width()
                )));
            }
            downsample_flow(gt, factor)
        })
        .collect()
}

/// Total weighted loss and the unweighted per-stage losses, on a graph.
pub fn multiscale_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    stage_flows: &[Var],
    gt: &FlowField<T>,
    config: &LossConfig,
) -> Result<(Var, Vec<Var>)> {
    config.validate()?;
    let shapes: Vec<(usize, usize)> = stage_flows
        .iter()
        .map(|&v| {
            let s = g.shape(v);
            if s.len() != 3 || s[0] != 2 {
                return Err(Error::Shape(format!("stage flow must be [2,H,W], got {s:?}")));
            }
            Ok((s[1], s[2]))
        })
        .collect::<Result<_>>()?;
    let targets = stage_targets(&shapes, gt, config.stage_weights.len())?;
    let penalty = config.penalty();
    let mut stage = Vec::with_capacity(targets.len());
    let mut weighted = Vec::with_capacity(targets.len());
    for ((&v, t), &wgt) in stage_flows.iter().zip(&targets).zip(&config.stage_weights) {
        let l = g.flow_penalty(v, t.tensor(), penalty);
        stage.push(l);
        weighted.push(g.scale(l, T::lit(wgt)));
    }
    let total = g.add_n(&weighted);
    Ok((total, stage))
}

/// `sum_k w_k sum_pixels rho(|flow_k - gt_k|)` with `gt_k` the pooled ground truth.
pub fn multiscale_loss<T: Scalar>(stage_flows: &[FlowField<T>], gt: &FlowField<T>, config: &LossConfig) -> Result<f64> {
    let store = crate::autodiff::ParamStore::new();
    let mut g = Graph::new(&store, false);
    let vars: Vec<Var> = stage_flows.iter().map(|f| g.constant(f.tensor().clone())).collect();
    let (total, _) = multiscale_loss_graph(&mut g, &vars, gt, config)?;
    Ok(g.value(total).data()[0].to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_error_on_two_by_two_costs_four() {
        let gt = FlowField::<f64>::zeros(2, 2);
        let pred = FlowField::constant(2, 2, 1.0, 0.0);
        let cfg = LossConfig {
            stage_weights: vec![1.0],
            ..LossConfig::default()
        };
        assert_eq!(multiscale_loss(&[pred], &gt, &cfg).unwrap(), 4.0);
    }

    #[test]
    fn exact_predictions_cost_nothing_in_l2() {
        let gt = FlowField::new(Tensor::from_fn(&[2, 8, 8], |i| (i[0] + i[1] * 2 + i[2]) as f64 * 0.25)).unwrap();
        let flows: Vec<_> = [4, 2, 1].iter().map(|&f| downsample_flow(&gt, f).unwrap()).collect();
        let cfg = LossConfig {
            stage_weights: vec![0.5, 0.2, 0.1],
            ..LossConfig::default()
        };
        assert_eq!(multiscale_loss(&flows, &gt, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn charbonnier_floor_at_zero_error() {
        let gt = FlowField::<f64>::zeros(4, 4);
        let cfg = LossConfig {
            stage_weights: vec![1.0],
            ..LossConfig::charbonnier()
        };
        let loss = multiscale_loss(&[gt.clone()], &gt, &cfg).unwrap();
        let want = 16.0 * (0.01f64 * 0.01).powf(0.4);
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn weight_count_must_match_stage_count() {
        let gt = FlowField::<f64>::zeros(4, 4);
        assert!(multiscale_loss(&[gt.clone()], &gt, &LossConfig::default()).is_err());
    }

    #[test]
    fn config_rejects_bad_exponent_and_weights() {
        let mut c = LossConfig::charbonnier();
        c.q = 1.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.stage_weights[2] = 0.0;
        assert!(c.validate().is_err());
    }
}
