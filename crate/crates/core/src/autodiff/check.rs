//! Central finite-difference verification of tape adjoints.

use rand::SeedableRng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::ModelRng;
use crate::tensor::Tensor;

/// Step of the default central difference.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Agreement below this needs no refinement.
const SETTLED: f64 = 1e-6;

/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Where the worst entry lives, e.g. `input 0 [17]` or `param psc.stage3.wq.weight [4]`.
    pub worst: String,
    pub entries: usize,
}

/// Options of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    /// At most this many entries per tensor are perturbed, spread evenly.
    pub max_entries: usize,
    pub seed: u64,
    /// Entries that disagree are retried this many times with the step cut
    /// tenfold each time; the best agreement counts. A leaky ReLU or max-pool
    /// switch within one step of the probe spoils only the coarse quotients,
    /// while a wrong adjoint disagrees at every step.
    pub refinements: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_entries: 48,
            seed: 0,
            refinements: 0,
        }
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max + (i * 7919) % (len / max).max(1)).collect()
}

/// Compares the adjoints of `f` with central differences.
///
/// `f` maps the input variables to an arbitrary tensor; it is reduced to a
/// scalar through a fixed random projection so that every output entry
/// contributes. Every input and every parameter that `f` binds is probed.
pub fn check_gradients<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) || opts.max_entries == 0 {
        return Err(Error::InvalidArgument("gradient check needs a positive step and entry budget".into()));
    }
    let out_shape = {
        let mut g = Graph::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let mut rng = ModelRng::seed_from_u64(opts.seed);
    let projection = Tensor::<f64>::uniform(&out_shape, -1.0, 1.0, &mut rng);

    let loss = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = g.dot_const(out, &projection);
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = g.dot_const(out, &projection);
    let grads = g.backward(root);
    let analytic = |v: Var, shape: &[usize]| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let mut record = |label: String, a: f64, quotient: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        let mut h = opts.step;
        let mut e = rel_error(a, quotient(h)?);
        for _ in 0..opts.refinements {
            if e < SETTLED {
                break;
            }
            h /= 10.0;
            e = e.min(rel_error(a, quotient(h)?));
        }
        report.entries += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = label;
        }
        Ok(())
    };

    for (k, (&v, t)) in vars.iter().zip(inputs).enumerate() {
        let a = analytic(v, t.shape());
        for i in probe_indices(t.len(), opts.max_entries) {
            let mut shifted = inputs.to_vec();
            record(format!("input {k} [{i}]"), a.data()[i], &mut |h| {
                shifted[k].data_mut()[i] = t.data()[i] + h;
                let up = loss(store, &shifted)?;
                shifted[k].data_mut()[i] = t.data()[i] - h;
                let down = loss(store, &shifted)?;
                Ok((up - down) / (2.0 * h))
            })?;
        }
    }
    for (name, &v) in g.bound_params() {
        let t = store.get(name)?;
        let a = analytic(v, t.shape());
        for i in probe_indices(t.len(), opts.max_entries) {
            let mut shifted = store.clone();
            record(format!("param {name} [{i}]"), a.data()[i], &mut |h| {
                shifted.get_mut(name)?.data_mut()[i] = t.data()[i] + h;
                let up = loss(&shifted, inputs)?;
                shifted.get_mut(name)?.data_mut()[i] = t.data()[i] - h;
                let down = loss(&shifted, inputs)?;
                Ok((up - down) / (2.0 * h))
            })?;
        }
    }
    Ok(report)
}

/// Replaces every parameter with `N(0, std^2)` draws, e.g. to wake zero-initialized branches.
pub fn randomize_params(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ModelRng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        *t = Tensor::normal(t.shape(), std, &mut rng);
    }
}
