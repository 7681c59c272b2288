use super::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel penalty applied to the endpoint error of a flow residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// Squared endpoint error.
    SquaredL2,
    /// `(|e|^2 + eps^2)^q`.
    Charbonnier { eps: f64, q: f64 },
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| ctx.grad.clone()),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| ctx.grad.map(|g| -g)),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
            ]
        })
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push(out, xs, move |ctx| {
            (0..n)
                .map(|i| ctx.needs[i].then(|| ctx.grad.clone()))
                .collect()
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, &[a], move |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    g * slope
                }
            }))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// `sum(a * w)` against a constant weight tensor; handy as a probe objective.
    pub fn dot_const(&mut self, a: Var, w: &Tensor<T>) -> Var {
        assert_eq!(self.shape(a), w.shape(), "dot_const shape mismatch");
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&x, &y)| x * y)
            .sum();
        let w = w.clone();
        self.push(Tensor::scalar(s), &[a], move |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(w.map(|y| y * g))]
        })
    }

    /// Sum over pixels of `penalty(|pred - target|)` for `[2,H,W]` flows.
    pub fn flow_penalty(&mut self, pred: Var, target: &Tensor<T>, penalty: Penalty) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "flow_penalty shape mismatch");
        let (c, h, w) = p.dims3();
        assert_eq!(c, 2, "flow_penalty expects 2 channels");
        let n = h * w;
        let pd = p.data();
        let td = target.data();
        let mut total = T::zero();
        for i in 0..n {
            let du = pd[i] - td[i];
            let dv = pd[n + i] - td[n + i];
            let sq = du * du + dv * dv;
            total += match penalty {
                Penalty::SquaredL2 => sq,
                Penalty::Charbonnier { eps, q } => {
                    (sq + T::lit(eps * eps)).powf(T::lit(q))
                }
            };
        }
        let target = target.clone();
        self.push(Tensor::scalar(total), &[pred], move |ctx| {
            let g = ctx.grad.data()[0];
            let pd = ctx.inputs[0].data();
            let td = target.data();
            let mut out = Tensor::zeros(ctx.inputs[0].shape());
            let od = out.data_mut();
            for i in 0..n {
                let du = pd[i] - td[i];
                let dv = pd[n + i] - td[n + i];
                let factor = match penalty {
                    Penalty::SquaredL2 => T::lit(2.0),
                    Penalty::Charbonnier { eps, q } => {
                        let base = du * du + dv * dv + T::lit(eps * eps);
                        T::lit(2.0 * q) * base.powf(T::lit(q - 1.0))
                    }
                };
                od[i] = g * factor * du;
                od[n + i] = g * factor * dv;
            }
            vec![Some(out)]
        })
    }
}
