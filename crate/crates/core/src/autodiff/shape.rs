use super::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.push(out, &[a], |ctx| {
            vec![Some(
                ctx.grad
                    .clone()
                    .reshape(ctx.inputs[0].shape())
                    .expect("reshape adjoint"),
            )]
        })
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let tail: Vec<usize> = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        let sizes: Vec<usize> = xs.iter().map(|&x| self.value(x).len()).collect();
        self.push(out, xs, move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let part = &ctx.grad.data()[off..off + n];
                    off += n;
                    ctx.needs[i].then(|| {
                        Tensor::from_vec(ctx.inputs[i].shape(), part.to_vec()).expect("slice")
                    })
                })
                .collect()
        })
    }

    /// Rows `start..end` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start <= end && end <= v.shape()[0], "slice0 out of range");
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_vec(&shape, v.data()[start * inner..end * inner].to_vec())
            .expect("slice shape");
        self.push(out, &[a], move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            g.data_mut()[start * inner..end * inner].copy_from_slice(ctx.grad.data());
            vec![Some(g)]
        })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        self.push(out, &[a], |ctx| vec![Some(transpose(ctx.grad))])
    }

    /// Row gather along axis 0; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: &[Option<usize>]) -> Var {
        let v = self.value(a);
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let mut data = vec![T::zero(); rows.len() * inner];
        for (r, src) in rows.iter().enumerate() {
            if let Some(s) = *src {
                data[r * inner..(r + 1) * inner]
                    .copy_from_slice(&v.data()[s * inner..(s + 1) * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data).expect("gather shape");
        let rows = rows.to_vec();
        self.push(out, &[a], move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            let gd = g.data_mut();
            for (r, src) in rows.iter().enumerate() {
                if let Some(s) = *src {
                    for k in 0..inner {
                        gd[s * inner + k] += ctx.grad.data()[r * inner + k];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// `[C,1,1]` (or `[C]`) broadcast to `[C,h,w]`.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Var {
        let c = self.value(v).len();
        let src = self.value(v).data().to_vec();
        let out = Tensor::from_fn(&[c, h, w], |i| src[i[0]]);
        self.push(out, &[v], move |ctx| {
            let gd = ctx.grad.data();
            let sums: Vec<T> = (0..c)
                .map(|ch| gd[ch * h * w..(ch + 1) * h * w].iter().copied().sum())
                .collect();
            vec![Some(
                Tensor::from_vec(ctx.inputs[0].shape(), sums).expect("broadcast adjoint"),
            )]
        })
    }

    /// Spatial mean of `[C,H,W]`, giving `[C,1,1]`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).dims3();
        let n = T::lit((h * w) as f64);
        let means: Vec<T> = (0..c)
            .map(|ch| self.value(a).channel(ch).iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::from_vec(&[c, 1, 1], means).expect("mean shape");
        self.push(out, &[a], move |ctx| {
            let g = ctx.grad.data().to_vec();
            vec![Some(Tensor::from_fn(&[c, h, w], |i| g[i[0]] / n))]
        })
    }

    /// Interleaves two `[C,H,W]` maps along a time axis: channel `2c+t` holds frame `t`.
    pub fn stack_time(&mut self, f1: Var, f2: Var) -> Var {
        let a = self.value(f1);
        let b = self.value(f2);
        assert_eq!(a.shape(), b.shape(), "stack_time shape mismatch");
        let (c, h, w) = a.dims3();
        let plane = h * w;
        let mut data = Vec::with_capacity(2 * a.len());
        for ch in 0..c {
            data.extend_from_slice(a.channel(ch));
            data.extend_from_slice(b.channel(ch));
        }
        let out = Tensor::from_vec(&[2 * c, h, w], data).expect("stack shape");
        self.push(out, &[f1, f2], move |ctx| {
            let gd = ctx.grad.data();
            let mut ga = Vec::with_capacity(c * plane);
            let mut gb = Vec::with_capacity(c * plane);
            for ch in 0..c {
                ga.extend_from_slice(&gd[(2 * ch) * plane..(2 * ch + 1) * plane]);
                gb.extend_from_slice(&gd[(2 * ch + 1) * plane..(2 * ch + 2) * plane]);
            }
            vec![
                ctx.needs[0].then(|| Tensor::from_vec(&[c, h, w], ga).expect("shape")),
                ctx.needs[1].then(|| Tensor::from_vec(&[c, h, w], gb).expect("shape")),
            ]
        })
    }
}

pub(crate) fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = a.dims2();
    let src = a.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], data).expect("transpose shape")
}
